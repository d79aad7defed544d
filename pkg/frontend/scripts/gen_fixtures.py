#!/usr/bin/env python3
"""Record viewer parity fixtures: for five scripted (scene, k, seed, query)
cases, capture the exact service responses (upload, cluster, query, points)
and the CLI scene-query output for the same inputs.

The vitest parity suite replays these through the viewer's data layer and
asserts the displayed ranking equals the CLI output byte-for-byte.

Usage: python3 scripts/gen_fixtures.py [--ckpt PATH] (run from frontend/)
"""

import argparse
import json
import struct
import sys
import tempfile
from pathlib import Path

from click.testing import CliRunner
from fastapi.testclient import TestClient

from trialign.checkpoint import save_checkpoint
from trialign.cli import main as cli_main
from trialign.corpus import build_corpus
from trialign.geometry import Placement, compose_scene, generate_shape
from trialign.seeding import derive_rng
from trialign.service import create_app
from trialign.training import TrainConfig, pretrain_bimodal, pretrain_cg3d
from trialign.encoders import EncoderConfig

CASES = [
    {"name": "sphere_cube", "objects": ["sphere", "cube"], "k": 2, "seed": 11,
     "query": "this is a sphere"},
    {"name": "cube_cylinder", "objects": ["cube", "cylinder"], "k": 2, "seed": 3,
     "query": "this is a cylinder"},
    {"name": "three_way", "objects": ["sphere", "cube", "cylinder"], "k": 3,
     "seed": 7, "query": "this is a cube"},
    {"name": "cone_disc", "objects": ["cone", "disc"], "k": 2, "seed": 21,
     "query": "this is a cone"},
    {"name": "pyramid_sphere_disc", "objects": ["pyramid", "sphere", "disc"],
     "k": 3, "seed": 5, "query": "this is a pyramid"},
]
SPOTS = [(0.0, 0.0, 0.0), (9.0, 0.0, 0.0), (4.0, 8.0, 0.0)]


def quick_checkpoint(workdir: Path):
    """A small but real checkpoint; parity only needs exact transport."""
    manifest = build_corpus(
        ["sphere", "cube", "cylinder", "cone", "pyramid", "disc"],
        per_class=8, n_points=256, out_dir=workdir / "corpus", seed=99,
        image_size=64)
    cfg = TrainConfig(batch_size=8, steps=60, seed=0, n_points=128,
                      encoder=EncoderConfig(layers=2, n_prompt_tokens=2))
    base, _ = pretrain_bimodal(manifest, cfg, steps=30)
    ckpt, _ = pretrain_cg3d(manifest, base, cfg, steps=60)
    return ckpt


def scene_bytes(objects, case_seed: int) -> bytes:
    parts = []
    for j, cls in enumerate(objects):
        pc = generate_shape(cls, 500, derive_rng(case_seed, "fixture-obj", j))
        parts.append((pc, Placement(translation=SPOTS[j])))
    scene = compose_scene(parts)
    header = b"PCLD" + struct.pack("<II", 1, scene.points.shape[0])
    return header + scene.points.astype("<f4").tobytes()


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--ckpt", default=None,
                        help="existing checkpoint; default trains a small one")
    parser.add_argument("--out", default="fixtures")
    args = parser.parse_args()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        if args.ckpt:
            from trialign.checkpoint import load_checkpoint
            ckpt = load_checkpoint(args.ckpt)
        else:
            ckpt = quick_checkpoint(workdir)
        ckpt_path = workdir / "ckpt.bin"
        save_checkpoint(ckpt, ckpt_path)
        client = TestClient(create_app(ckpt))
        runner = CliRunner()

        for case in CASES:
            body = scene_bytes(case["objects"], case["seed"])
            scene_path = workdir / f"{case['name']}.pcld"
            scene_path.write_bytes(body)

            upload = client.post("/scenes", content=body)
            scene_id = upload.json()["scene_id"]
            cluster = client.post(f"/scenes/{scene_id}/cluster",
                                  json={"k": case["k"], "seed": case["seed"],
                                        "strip_floor": False})
            query = client.post(f"/scenes/{scene_id}/query",
                                json={"text": case["query"]})
            points = {}
            for j in range(case["k"]):
                resp = client.get(f"/scenes/{scene_id}/points",
                                  params={"cluster": j})
                points[str(j)] = resp.json()

            cli = runner.invoke(cli_main, [
                "scene-query", "--ckpt", str(ckpt_path), "--scene", str(scene_path),
                "--k", str(case["k"]), "--seed", str(case["seed"]),
                "--query", case["query"]])
            assert cli.exit_code == 0, cli.output

            fixture = {
                "name": case["name"],
                "k": case["k"],
                "seed": case["seed"],
                "query": case["query"],
                "upload": upload.json(),
                "cluster": {"body": cluster.json(), "raw": cluster.text},
                "query_http": {"body": query.json(), "raw": query.text},
                "points": points,
                "cli_output": json.loads(cli.output),
            }
            path = out_dir / f"{case['name']}.json"
            path.write_text(json.dumps(fixture, indent=1))
            print(f"wrote {path}")


if __name__ == "__main__":
    sys.exit(main())

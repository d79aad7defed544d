"""End-to-end CLI smoke tests over a miniature pipeline: every subcommand
runs, report files appear next to their CSVs, and figures render."""

import json

import pytest
from click.testing import CliRunner

from trialign.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def config_path(workdir):
    cfg = {
        "batch_size": 8,
        "steps": 8,
        "n_points": 64,
        "encoder": {"layers": 2, "n_prompt_tokens": 2},
        "corpus": {"classes": ["sphere", "cube", "cylinder", "torus"],
                   "per_class": 6, "n_points": 128, "unseen": ["torus"],
                   "image_size": 64},
    }
    path = workdir / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def corpus_dir(workdir, runner, config_path):
    out = workdir / "corpus"
    result = runner.invoke(main, ["gen-data", "--config", config_path,
                                  "--seed", "5", "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def base_ckpt(workdir, runner, config_path, corpus_dir):
    out = workdir / "base.bin"
    result = runner.invoke(main, ["pretrain-bimodal", "--config", config_path,
                                  "--seed", "1", "--corpus", str(corpus_dir),
                                  "--out", str(out), "--steps", "4"])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def cg3d_ckpt(workdir, runner, config_path, corpus_dir, base_ckpt):
    out = workdir / "cg3d.bin"
    result = runner.invoke(main, ["pretrain", "--config", config_path,
                                  "--seed", "2", "--corpus", str(corpus_dir),
                                  "--base", str(base_ckpt), "--out", str(out),
                                  "--steps", "8"])
    assert result.exit_code == 0, result.output
    return out


class TestGenData:
    def test_manifest_exists(self, corpus_dir):
        assert (corpus_dir / "manifest.jsonl").exists()
        lines = (corpus_dir / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 1 + 4 * 6

    def test_deterministic_rebuild(self, workdir, runner, config_path, corpus_dir):
        again = workdir / "corpus2"
        result = runner.invoke(main, ["gen-data", "--config", config_path,
                                      "--seed", "5", "--out", str(again)])
        assert result.exit_code == 0
        assert (again / "manifest.jsonl").read_bytes() == \
            (corpus_dir / "manifest.jsonl").read_bytes()


class TestTrainingCommands:
    def test_bimodal_artifacts(self, base_ckpt):
        assert base_ckpt.exists()
        assert base_ckpt.with_suffix(".log.csv").exists()
        assert base_ckpt.with_suffix(".log.png").exists()

    def test_cg3d_artifacts(self, cg3d_ckpt):
        assert cg3d_ckpt.exists()
        log = cg3d_ckpt.with_suffix(".log.csv").read_text().splitlines()
        assert log[0] == "step,loss_3d,loss_p,lr_3d,lr_p"
        assert len(log) == 9
        assert cg3d_ckpt.with_suffix(".log.png").exists()


class TestEvalCommands:
    def test_zeroshot_with_report(self, workdir, runner, config_path, corpus_dir,
                                  cg3d_ckpt):
        report = workdir / "zs.csv"
        result = runner.invoke(main, ["zeroshot", "--config", config_path,
                                      "--ckpt", str(cg3d_ckpt),
                                      "--corpus", str(corpus_dir),
                                      "--report", str(report)])
        assert result.exit_code == 0, result.output
        assert "overall:" in result.output
        assert report.exists()
        assert report.with_suffix(".png").exists()

    def test_retrieve_text_query(self, workdir, runner, config_path, corpus_dir,
                                 cg3d_ckpt):
        report = workdir / "hits.csv"
        result = runner.invoke(main, ["retrieve", "--config", config_path,
                                      "--ckpt", str(cg3d_ckpt),
                                      "--corpus", str(corpus_dir),
                                      "--query", "this is a sphere",
                                      "--topk", "3", "--report", str(report)])
        assert result.exit_code == 0, result.output
        assert report.read_text().splitlines()[0] == "rank,id,similarity"
        assert len(report.read_text().splitlines()) == 4

    def test_retrieve_requires_exactly_one_query(self, runner, config_path,
                                                 corpus_dir, cg3d_ckpt):
        result = runner.invoke(main, ["retrieve", "--config", config_path,
                                      "--ckpt", str(cg3d_ckpt),
                                      "--corpus", str(corpus_dir)])
        assert result.exit_code != 0

    def test_finetune_scratch(self, workdir, runner, config_path, corpus_dir):
        report = workdir / "ft.csv"
        result = runner.invoke(main, ["finetune", "--config", config_path,
                                      "--seed", "3", "--corpus", str(corpus_dir),
                                      "--steps", "6", "--report", str(report)])
        assert result.exit_code == 0, result.output
        assert "test accuracy" in result.output
        assert report.exists() and report.with_suffix(".png").exists()

    def test_finetune_from_checkpoint(self, runner, config_path, corpus_dir,
                                      cg3d_ckpt):
        result = runner.invoke(main, ["finetune", "--config", config_path,
                                      "--seed", "3", "--corpus", str(corpus_dir),
                                      "--ckpt", str(cg3d_ckpt), "--steps", "6"])
        assert result.exit_code == 0, result.output

    def test_linear_probe_both_pathways(self, runner, config_path, corpus_dir,
                                        cg3d_ckpt):
        for pathway in ("base", "prompted"):
            result = runner.invoke(main, ["linear-probe", "--config", config_path,
                                          "--ckpt", str(cg3d_ckpt),
                                          "--corpus", str(corpus_dir),
                                          "--pathway", pathway,
                                          "--classes", "torus,cube"])
            assert result.exit_code == 0, result.output
            assert "held-out accuracy" in result.output

    def test_linear_probe_single_class_rejected(self, runner, config_path,
                                                corpus_dir, cg3d_ckpt):
        result = runner.invoke(main, ["linear-probe", "--config", config_path,
                                      "--ckpt", str(cg3d_ckpt),
                                      "--corpus", str(corpus_dir),
                                      "--classes", "torus"])
        assert result.exit_code != 0

    def test_export_embeddings(self, workdir, runner, corpus_dir, cg3d_ckpt):
        out = workdir / "emb.csv"
        result = runner.invoke(main, ["export-embeddings", "--ckpt", str(cg3d_ckpt),
                                      "--corpus", str(corpus_dir),
                                      "--out", str(out), "--modalities", "3D,2D"])
        assert result.exit_code == 0, result.output
        assert len(out.read_text().splitlines()) == 1 + 2 * 24

    def test_scene_query_json(self, workdir, runner, cg3d_ckpt):
        import struct
        from trialign.geometry import Placement, compose_scene, generate_shape
        from trialign.seeding import derive_rng

        a = generate_shape("sphere", 100, derive_rng(0, "a"))
        b = generate_shape("cube", 100, derive_rng(1, "b"))
        scene = compose_scene([(a, Placement(translation=(0, 0, 0))),
                               (b, Placement(translation=(12, 0, 0)))])
        scene_path = workdir / "scene.pcld"
        with open(scene_path, "wb") as fh:
            fh.write(b"PCLD" + struct.pack("<II", 1, scene.points.shape[0]))
            fh.write(scene.points.astype("<f4").tobytes())
        json_out = workdir / "sq.json"
        result = runner.invoke(main, ["scene-query", "--ckpt", str(cg3d_ckpt),
                                      "--scene", str(scene_path), "--k", "2",
                                      "--seed", "4", "--query", "this is a cube",
                                      "--json-out", str(json_out)])
        assert result.exit_code == 0, result.output
        payload = json.loads(json_out.read_text())
        assert payload["query"] == "this is a cube"
        assert len(payload["results"]) == 2

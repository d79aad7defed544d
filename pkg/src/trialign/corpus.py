"""Triplet corpus construction: point files, depth renders, captions, and
the JSON Lines manifest with its seen/unseen class split.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .geometry import (
    AugmentConfig,
    DepthImage,
    augment,
    generate_shape,
    project_depth,
    random_view,
    read_pc,
    write_pc,
)
from .seeding import derive_rng

DPTH_MAGIC = b"DPTH"

DEFAULT_TEMPLATES = (
    "A photo of a {OBJECT}",
    "This is a {OBJECT}",
    "a 3d model of a {OBJECT}",
)


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class CaptionTemplate:
    pattern: str

    def __post_init__(self):
        if self.pattern.count("{OBJECT}") != 1:
            raise TemplateError(
                f"template must contain exactly one {{OBJECT}} placeholder: {self.pattern!r}")


def render_caption(template, class_name: str) -> str:
    """Substitute the class name and lowercase-normalize the result."""
    if isinstance(template, str):
        template = CaptionTemplate(template)
    return template.pattern.replace("{OBJECT}", class_name).lower()


@dataclass
class Triplet:
    id: str
    class_name: str
    pc_path: str
    image_path: str
    caption: str


@dataclass
class Manifest:
    records: List[Triplet]
    classes: List[str]
    unseen: List[str]
    image_mode: str = "depth"
    root: Optional[Path] = None

    @property
    def seen(self) -> List[str]:
        return [c for c in self.classes if c not in self.unseen]

    def class_index(self, class_name: str) -> int:
        return self.classes.index(class_name)

    def resolve(self, rel_path: str) -> Path:
        return (self.root / rel_path) if self.root is not None else Path(rel_path)


def write_depth(path, img: DepthImage) -> None:
    """Binary grid: DPTH | u32 H | u32 W | H*W little-endian float32."""
    px = np.ascontiguousarray(img.pixels, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(DPTH_MAGIC)
        fh.write(struct.pack("<II", px.shape[0], px.shape[1]))
        fh.write(px.tobytes())


def read_depth(path) -> DepthImage:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DPTH_MAGIC:
        raise ValueError(f"bad depth image magic in {path}")
    h, w = struct.unpack_from("<II", data, 4)
    px = np.frombuffer(data, dtype="<f4", count=h * w, offset=12).reshape(h, w)
    return DepthImage(pixels=px.copy())


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w") as fh:
        header = {"classes": manifest.classes, "unseen": manifest.unseen,
                  "image_mode": manifest.image_mode}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in manifest.records:
            row = {"id": rec.id, "class": rec.class_name, "pc_path": rec.pc_path,
                   "image_path": rec.image_path, "caption": rec.caption}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_manifest(path) -> Manifest:
    path = Path(path)
    with open(path) as fh:
        header = json.loads(fh.readline())
        records = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            records.append(Triplet(id=row["id"], class_name=row["class"],
                                   pc_path=row["pc_path"], image_path=row["image_path"],
                                   caption=row["caption"]))
    return Manifest(records=records, classes=list(header["classes"]),
                    unseen=list(header.get("unseen", [])),
                    image_mode=header.get("image_mode", "depth"), root=path.parent)


def build_corpus(classes: Sequence[str], per_class: int, n_points: int,
                 out_dir, seed: int, unseen: Sequence[str] = (),
                 templates: Sequence[str] = DEFAULT_TEMPLATES,
                 image_size: int = 64, image_mode: str = "depth",
                 view_elevation_deg: float = 30.0) -> Manifest:
    """Generate aligned (points, depth image, caption) triplets on disk.

    Deterministic given the seed; rebuilding writes byte-identical files.
    The view elevation range controls the render distribution, so two
    corpora can be given deliberately shifted image statistics.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if not classes:
        raise ValueError("classes must be nonempty")
    if image_mode != "depth":
        raise ValueError("only depth image mode is implemented")
    parsed = [CaptionTemplate(t) if isinstance(t, str) else t for t in templates]
    out_dir = Path(out_dir)
    (out_dir / "points").mkdir(parents=True, exist_ok=True)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for class_name in classes:
        for j in range(per_class):
            rec_id = f"{class_name}_{j:05d}"
            rng = derive_rng(seed, "record", rec_id)
            pc = generate_shape(class_name, n_points, rng)
            pose = random_view(rng, elevation_deg=view_elevation_deg)
            img = project_depth(pc, pose, image_size, image_size)
            tmpl = parsed[int(rng.integers(0, len(parsed)))]
            caption = render_caption(tmpl, class_name)
            pc_rel = f"points/{rec_id}.pcld"
            img_rel = f"images/{rec_id}.dpth"
            write_pc(out_dir / pc_rel, pc)
            write_depth(out_dir / img_rel, img)
            records.append(Triplet(id=rec_id, class_name=class_name,
                                   pc_path=pc_rel, image_path=img_rel, caption=caption))
    manifest = Manifest(records=records, classes=list(classes), unseen=list(unseen),
                        image_mode=image_mode, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def _subset_of(rec_id: str, eval_frac: float) -> str:
    """Stable instance-level train/eval assignment from the record id."""
    h = int.from_bytes(hashlib.sha1(rec_id.encode()).digest()[:4], "little")
    return "eval" if (h % 10_000) < eval_frac * 10_000 else "train"


def training_records(manifest: Manifest, eval_frac: float = 0.25) -> List[Triplet]:
    """Train-subset records of seen classes; unseen classes contribute none."""
    return [r for r in manifest.records
            if r.class_name not in manifest.unseen
            and _subset_of(r.id, eval_frac) == "train"]


def eval_records(manifest: Manifest, eval_frac: float = 0.25,
                 classes: Optional[Sequence[str]] = None) -> List[Triplet]:
    """Held-out records: eval subset of seen classes plus all unseen-class records."""
    wanted = set(classes) if classes is not None else None
    out = []
    for r in manifest.records:
        if wanted is not None and r.class_name not in wanted:
            continue
        if r.class_name in manifest.unseen or _subset_of(r.id, eval_frac) == "eval":
            out.append(r)
    return out


def instance_split(manifest: Manifest, eval_frac: float = 0.25,
                   ) -> tuple[List[Triplet], List[Triplet]]:
    """Instance-level train/eval split over all classes, ignoring the
    seen/unseen partition (for supervised fine-tuning)."""
    train = [r for r in manifest.records if _subset_of(r.id, eval_frac) == "train"]
    ev = [r for r in manifest.records if _subset_of(r.id, eval_frac) == "eval"]
    return train, ev


@dataclass
class Batch:
    """Aligned arrays for one batch; tokens are filled in by the encoder stack."""

    points: np.ndarray        # (B, n_points, 3) float32
    images: np.ndarray        # (B, H, W) float32
    captions: List[str]
    class_idx: np.ndarray     # (B,) int64
    ids: List[str]


def resample_points(pts: np.ndarray, n: int,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Fix the point count: strided downsample in eval, random choice in train,
    repeat-pad when too short."""
    m = pts.shape[0]
    if m == n:
        return pts
    if m > n:
        if rng is None:
            idx = np.linspace(0, m - 1, n).round().astype(np.int64)
        else:
            idx = np.sort(rng.choice(m, size=n, replace=False))
        return pts[idx]
    reps = int(np.ceil(n / m))
    return np.concatenate([pts] * reps, axis=0)[:n]


def load_batch(manifest: Manifest, indices: Sequence[int], n_points: int,
               train: bool = False, aug: Optional[AugmentConfig] = None,
               rng: Optional[np.random.Generator] = None) -> Batch:
    """Load aligned triplets; training mode augments point clouds.

    Depth images are served as stored; augmentation applies to geometry only.
    """
    if train and rng is None:
        raise ValueError("training mode requires an rng")
    aug = aug or AugmentConfig()
    points, images, captions, cls, ids = [], [], [], [], []
    for i in indices:
        if not 0 <= i < len(manifest.records):
            raise IndexError(f"record index {i} out of range (corpus has "
                             f"{len(manifest.records)} records)")
        rec = manifest.records[i]
        try:
            pc = read_pc(manifest.resolve(rec.pc_path))
            img = read_depth(manifest.resolve(rec.image_path))
        except FileNotFoundError as exc:
            raise IOError(f"missing file for record {rec.id}: {exc}") from exc
        if train:
            pc = augment(pc, aug, rng)
            pts = resample_points(pc.points, n_points, rng)
        else:
            pts = resample_points(pc.points, n_points)
        points.append(pts)
        images.append(img.pixels)
        captions.append(rec.caption)
        cls.append(manifest.class_index(rec.class_name))
        ids.append(rec.id)
    return Batch(points=np.stack(points), images=np.stack(images), captions=captions,
                 class_idx=np.asarray(cls, dtype=np.int64), ids=ids)

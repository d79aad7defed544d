"""Point cloud primitives: normalization, augmentation, depth rendering,
procedural shape synthesis, scene composition, and file I/O.

All operations are pure given their inputs and an explicit seeded
generator; nothing here touches global RNG state.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

SHAPE_CLASSES = (
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "pyramid",
    "disc",
    "capsule",
)

FLOOR_ID = -1

PCLD_MAGIC = b"PCLD"
PCLD_VERSION = 1


class FormatError(ValueError):
    """Malformed point cloud file; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class PointCloud:
    """A set of 3D coordinates with an optional class label."""

    points: np.ndarray  # (N, 3) float32
    label: Optional[str] = None
    id: Optional[str] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass
class ViewPose:
    """Rigid view: orthonormal rotation plus a positive uniform scale."""

    rotation: np.ndarray  # (3, 3)
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal within 1e-6")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        self.rotation = R


@dataclass
class DepthImage:
    """H x W grid of depth values, 0 = background, (0, 1] = occupied."""

    pixels: np.ndarray  # (H, W) float32
    view: Optional[ViewPose] = None

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class SceneCloud:
    """Scene-scale point set with optional ground-truth object assignment."""

    points: np.ndarray  # (M, 3) float32
    object_ids: Optional[np.ndarray] = None  # (M,) int, evaluation only

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.object_ids is not None:
            self.object_ids = np.asarray(self.object_ids, dtype=np.int64)
            if self.object_ids.shape[0] != self.points.shape[0]:
                raise ValueError("object_ids length must match points")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass
class AugmentConfig:
    scale_min: float = 0.8
    scale_max: float = 1.2
    rotate: bool = True
    drop_frac: float = 0.2
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05

    def __post_init__(self):
        if self.scale_min > self.scale_max:
            raise ValueError("scale_min must be <= scale_max")
        if not 0.0 <= self.drop_frac < 1.0:
            raise ValueError("drop_frac must lie in [0, 1)")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(scale_min=1.0, scale_max=1.0, rotate=False, drop_frac=0.0,
                   jitter_sigma=0.0)


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Center at the origin and scale the farthest point onto the unit sphere.

    Degenerate clouds (all points coincident) collapse to the origin.
    """
    pts = pc.points.astype(np.float64)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1).max())
    if radius > 0:
        centered = centered / radius
    return replace(pc, points=centered.astype(np.float32))


def augment(pc: PointCloud, cfg: AugmentConfig, rng: np.random.Generator) -> PointCloud:
    """Scale, rotate about z, randomly drop points, then apply clipped jitter.

    Identity config returns the input points bit-identically. Dropping
    never removes the last point.
    """
    pts = pc.points
    scale = 1.0
    if (cfg.scale_min, cfg.scale_max) != (1.0, 1.0):
        scale = rng.uniform(cfg.scale_min, cfg.scale_max)
        pts = pts * np.float32(scale)
    if cfg.rotate:
        theta = rng.uniform(0.0, 2.0 * math.pi)
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=np.float32)
        pts = pts @ rot.T
    if cfg.drop_frac > 0.0:
        keep = max(1, pts.shape[0] - int(round(cfg.drop_frac * pts.shape[0])))
        idx = rng.choice(pts.shape[0], size=keep, replace=False)
        pts = pts[np.sort(idx)]
    if cfg.jitter_sigma > 0.0:
        noise = rng.normal(0.0, cfg.jitter_sigma, size=pts.shape)
        noise = np.clip(noise, -cfg.jitter_clip, cfg.jitter_clip)
        pts = pts + noise.astype(np.float32)
    return replace(pc, points=pts)


def random_view(rng: np.random.Generator, elevation_deg: float = 30.0) -> ViewPose:
    """Uniform rotation about z composed with elevation jitter about x."""
    theta = rng.uniform(0.0, 2.0 * math.pi)
    phi = math.radians(rng.uniform(-elevation_deg, elevation_deg))
    cz, sz = math.cos(theta), math.sin(theta)
    cx, sx = math.cos(phi), math.sin(phi)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return ViewPose(rotation=rx @ rz)


def project_depth(pc: PointCloud, pose: ViewPose, h: int, w: int) -> DepthImage:
    """Orthographic depth render onto an h x w grid over [-1, 1]^2.

    The viewer looks down -z, so larger z is nearer; where several points
    land on one pixel the nearest wins. Occupied pixels get 1 - depth,
    clamped away from the background value 0.
    """
    if h < 8 or w < 8:
        raise ValueError("depth image must be at least 8x8")
    pts = (pc.points.astype(np.float64) @ pose.rotation.T) * pose.scale
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    cols = np.clip(np.floor((x + 1.0) / 2.0 * w), 0, w - 1).astype(np.int64)
    rows = np.clip(np.floor((1.0 - y) / 2.0 * h), 0, h - 1).astype(np.int64)
    values = np.clip((z + 1.0) / 2.0, 1e-6, 1.0)
    img = np.zeros((h, w), dtype=np.float64)
    np.maximum.at(img, (rows, cols), values)
    return DepthImage(pixels=img.astype(np.float32), view=pose)


def _surface_points(class_name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Near-uniform samples on the parametric surface of a canonical shape.

    Each class other than sphere and cube is a family: aspect parameters
    are drawn per call so instances span a continuum (squat cylinders
    shade into thick discs, long capsules into tall cylinders). That
    overlap is what lets encoders place related shapes near each other.
    """
    u = rng.random(n)
    v = rng.random(n)
    if class_name == "sphere":
        phi = 2.0 * np.pi * u
        cos_t = 2.0 * v - 1.0
        sin_t = np.sqrt(1.0 - cos_t ** 2)
        return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    if class_name == "cube":
        # area-uniform over the six faces
        face = rng.integers(0, 6, size=n)
        a = 2.0 * u - 1.0
        b = 2.0 * v - 1.0
        pts = np.empty((n, 3))
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        for ax in range(3):
            m = axis == ax
            others = [o for o in range(3) if o != ax]
            pts[m, ax] = sign[m]
            pts[m, others[0]] = a[m]
            pts[m, others[1]] = b[m]
        return pts
    if class_name == "cylinder":
        # r=1, half-height drawn from squat to rod-like
        hh = rng.uniform(0.3, 2.0)
        lateral = 2.0 * np.pi * 2 * hh
        cap = np.pi
        pick = rng.random(n) * (lateral + 2 * cap)
        pts = np.empty((n, 3))
        m_lat = pick < lateral
        phi = 2.0 * np.pi * u
        pts[m_lat] = np.stack(
            [np.cos(phi[m_lat]), np.sin(phi[m_lat]), hh * (2.0 * v[m_lat] - 1.0)], axis=1)
        m_cap = ~m_lat
        r = np.sqrt(v[m_cap])
        top = pick[m_cap] < lateral + cap
        zc = np.where(top, hh, -hh)
        pts[m_cap] = np.stack(
            [r * np.cos(2.0 * np.pi * u[m_cap]), r * np.sin(2.0 * np.pi * u[m_cap]), zc],
            axis=1)
        return pts
    if class_name == "cone":
        # base r=1 at z=-h/2, apex at z=h/2, height drawn per instance
        h = rng.uniform(1.0, 3.0)
        slant = np.pi * math.sqrt(1.0 + h * h)
        base = np.pi
        pick = rng.random(n) * (slant + base)
        pts = np.empty((n, 3))
        m_sl = pick < slant
        r = np.sqrt(v[m_sl])  # area-uniform along the slant
        phi = 2.0 * np.pi * u[m_sl]
        pts[m_sl] = np.stack([r * np.cos(phi), r * np.sin(phi), h * (0.5 - r)], axis=1)
        m_b = ~m_sl
        rb = np.sqrt(v[m_b])
        phib = 2.0 * np.pi * u[m_b]
        pts[m_b] = np.stack(
            [rb * np.cos(phib), rb * np.sin(phib), np.full(m_b.sum(), -h / 2.0)], axis=1)
        return pts
    if class_name == "torus":
        # R=1, minor radius drawn thin to fat; minor angle rejection-corrected
        big_r = 1.0
        small_r = rng.uniform(0.15, 0.45)
        phi = 2.0 * np.pi * u
        theta = np.empty(n)
        filled = 0
        while filled < n:
            cand = 2.0 * np.pi * rng.random(n)
            accept = rng.random(n) < (big_r + small_r * np.cos(cand)) / (big_r + small_r)
            good = cand[accept]
            take = min(n - filled, good.shape[0])
            theta[filled:filled + take] = good[:take]
            filled += take
        rad = big_r + small_r * np.cos(theta)
        return np.stack([rad * np.cos(phi), rad * np.sin(phi), small_r * np.sin(theta)],
                        axis=1)
    if class_name == "pyramid":
        # square base (side 2) at z=-h/2, apex at (0, 0, h/2)
        h = rng.uniform(0.8, 2.4)
        base_area = 4.0
        faces_area = 4.0 * math.sqrt(1.0 + h * h)
        pick = rng.random(n) * (base_area + faces_area)
        pts = np.empty((n, 3))
        m_base = pick < base_area
        pts[m_base] = np.stack(
            [2.0 * u[m_base] - 1.0, 2.0 * v[m_base] - 1.0, np.full(m_base.sum(), -h / 2.0)],
            axis=1)
        m_f = ~m_base
        nf = m_f.sum()
        face = rng.integers(0, 4, size=nf)
        # uniform in triangle via sqrt trick
        s = np.sqrt(u[m_f])
        t = v[m_f]
        apex = np.array([0.0, 0.0, h / 2.0])
        corners = np.array(
            [[[-1, -1, 0], [1, -1, 0]], [[1, -1, 0], [1, 1, 0]],
             [[1, 1, 0], [-1, 1, 0]], [[-1, 1, 0], [-1, -1, 0]]], dtype=np.float64)
        corners[:, :, 2] = -h / 2.0
        c0 = corners[face, 0]
        c1 = corners[face, 1]
        pts[m_f] = apex * (1 - s)[:, None] + c0 * (s * (1 - t))[:, None] + c1 * (s * t)[:, None]
        return pts
    if class_name == "disc":
        # solid plate: two faces of radius 1 plus a rim, thickness per instance
        half_t = rng.uniform(0.02, 0.15)
        faces = 2.0 * np.pi
        rim = 2.0 * np.pi * 2 * half_t
        pick = rng.random(n) * (faces + rim)
        pts = np.empty((n, 3))
        m_face = pick < faces
        r = np.sqrt(v[m_face])
        phi = 2.0 * np.pi * u[m_face]
        zs = np.where(rng.random(m_face.sum()) < 0.5, half_t, -half_t)
        pts[m_face] = np.stack([r * np.cos(phi), r * np.sin(phi), zs], axis=1)
        m_rim = ~m_face
        phir = 2.0 * np.pi * u[m_rim]
        pts[m_rim] = np.stack(
            [np.cos(phir), np.sin(phir), half_t * (2.0 * v[m_rim] - 1.0)], axis=1)
        return pts
    if class_name == "capsule":
        # r=0.4 cylinder with hemispherical caps, shaft length per instance
        r = 0.4
        hh = rng.uniform(0.2, 1.6)
        lateral = 2.0 * np.pi * r * (2 * hh)
        caps = 4.0 * np.pi * r ** 2
        pick = rng.random(n) * (lateral + caps)
        pts = np.empty((n, 3))
        m_lat = pick < lateral
        phi = 2.0 * np.pi * u
        pts[m_lat] = np.stack(
            [r * np.cos(phi[m_lat]), r * np.sin(phi[m_lat]), hh * (2.0 * v[m_lat] - 1.0)],
            axis=1)
        m_cap = ~m_lat
        nc = m_cap.sum()
        cos_t = rng.random(nc)  # polar angle within a hemisphere
        sin_t = np.sqrt(1.0 - cos_t ** 2)
        phic = 2.0 * np.pi * u[m_cap]
        top = rng.random(nc) < 0.5
        zsign = np.where(top, 1.0, -1.0)
        pts[m_cap] = np.stack(
            [r * sin_t * np.cos(phic), r * sin_t * np.sin(phic),
             zsign * (hh + r * cos_t)], axis=1)
        return pts
    raise ValueError(
        f"unknown shape class {class_name!r}; valid classes: {', '.join(SHAPE_CLASSES)}")


def generate_shape(class_name: str, n_points: int, rng: np.random.Generator) -> PointCloud:
    """Sample a labeled procedural shape, normalized to the unit sphere.

    The parametric shapes are constructed centered on the origin, so
    normalization is a pure rescale; a sphere keeps all radii at exactly 1.
    """
    if class_name not in SHAPE_CLASSES:
        raise ValueError(
            f"unknown shape class {class_name!r}; valid classes: {', '.join(SHAPE_CLASSES)}")
    if n_points < 16:
        raise ValueError("n_points must be >= 16")
    pts = _surface_points(class_name, n_points, rng)
    radius = np.sqrt((pts ** 2).sum(axis=1).max())
    if radius > 0:
        pts = pts / radius
    return PointCloud(points=pts.astype(np.float32), label=class_name)


@dataclass
class Placement:
    translation: Sequence[float] = (0.0, 0.0, 0.0)
    scale: float = 1.0


def compose_scene(objects, floor: bool = False,
                  floor_points: int = 256,
                  rng: Optional[np.random.Generator] = None) -> SceneCloud:
    """Union of placed object clouds with per-point object ids.

    `objects` is a sequence of (PointCloud, Placement). With floor=True a
    flat slab at the scene's minimum height is appended under FLOOR_ID.
    """
    if not objects:
        raise ValueError("compose_scene requires at least one object")
    chunks, ids = [], []
    for i, (pc, placement) in enumerate(objects):
        t = np.asarray(placement.translation, dtype=np.float32)
        if not np.isfinite(t).all() or not math.isfinite(placement.scale):
            raise ValueError("placement must be finite")
        chunks.append(pc.points * np.float32(placement.scale) + t)
        ids.append(np.full(pc.n_points, i, dtype=np.int64))
    pts = np.concatenate(chunks, axis=0)
    obj_ids = np.concatenate(ids, axis=0)
    if floor:
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        span = np.maximum(hi[:2] - lo[:2], 1e-3)
        side = int(math.ceil(math.sqrt(floor_points)))
        gx, gy = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side))
        fx = (lo[0] - 0.1 * span[0]) + gx.ravel() * span[0] * 1.2
        fy = (lo[1] - 0.1 * span[1]) + gy.ravel() * span[1] * 1.2
        fz = np.full(fx.shape, lo[2])
        if rng is not None:
            fz = fz + rng.normal(0.0, 0.002, size=fz.shape)
        slab = np.stack([fx, fy, fz], axis=1).astype(np.float32)
        pts = np.concatenate([pts, slab], axis=0)
        obj_ids = np.concatenate(
            [obj_ids, np.full(slab.shape[0], FLOOR_ID, dtype=np.int64)], axis=0)
    return SceneCloud(points=pts, object_ids=obj_ids)


def write_pc(path, pc: PointCloud) -> None:
    """Write the binary container: PCLD | u32 version | u32 N | float32 xyz."""
    pts = np.ascontiguousarray(pc.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PCLD_MAGIC)
        fh.write(struct.pack("<II", PCLD_VERSION, pts.shape[0]))
        fh.write(pts.tobytes())


def read_pc(path) -> PointCloud:
    """Read either the binary PCLD container or a text .xyz file."""
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_pc_bytes(data)


def parse_pc_bytes(data: bytes) -> PointCloud:
    """Parse point cloud bytes, sniffing binary magic vs .xyz text."""
    if data[:4] == PCLD_MAGIC:
        if len(data) < 12:
            raise FormatError("truncated header", offset=len(data))
        version, n = struct.unpack_from("<II", data, 4)
        if version != PCLD_VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        need = 12 + n * 12
        if len(data) < need:
            raise FormatError(f"truncated payload, expected {need} bytes", offset=len(data))
        pts = np.frombuffer(data, dtype="<f4", count=n * 3, offset=12).reshape(n, 3)
        if not np.isfinite(pts).all():
            bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
            raise FormatError("non-finite coordinate", offset=12 + bad * 12)
        if n < 1:
            raise FormatError("empty point cloud", offset=8)
        return PointCloud(points=pts.copy())
    # text path: one "x y z" per line
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("bad magic and not valid text", offset=exc.start) from exc
    rows = []
    offset = 0
    for line in io.StringIO(text):
        stripped = line.strip()
        if stripped:
            parts = stripped.split()
            if len(parts) != 3:
                raise FormatError(f"expected 3 columns, got {len(parts)}", offset=offset)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise FormatError("non-numeric coordinate", offset=offset) from None
        offset += len(line.encode("utf-8"))
    if not rows:
        raise FormatError("no points found", offset=0)
    pts = np.asarray(rows, dtype=np.float32)
    if not np.isfinite(pts).all():
        raise FormatError("non-finite coordinate", offset=0)
    return PointCloud(points=pts)


def write_xyz(path, pc: PointCloud) -> None:
    with open(path, "w") as fh:
        for x, y, z in pc.points:
            fh.write(f"{x} {y} {z}\n")

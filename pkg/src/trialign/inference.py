"""Inference paths over a trained checkpoint: zero-shot classification,
cross-modal retrieval, scene clustering and language querying, and raw
embedding export.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .checkpoint import Checkpoint
from .corpus import Manifest, load_batch, render_caption, resample_points
from .encoders import TriModalModel, tokenize_batch
from .geometry import DepthImage, PointCloud, SceneCloud, normalize_unit_sphere
from .seeding import derive_rng

DEFAULT_BANK_TEMPLATE = "This is a {OBJECT}"


@dataclass
class TextClassBank:
    class_names: List[str]
    template: str
    matrix: np.ndarray  # (C, d) unit rows

    def __post_init__(self):
        norms = np.linalg.norm(self.matrix, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("bank rows must be unit norm within 1e-5")


class InferenceSession:
    """Caches the materialized model for repeated queries over one checkpoint."""

    def __init__(self, ckpt: Checkpoint, n_points: int = 256):
        self.ckpt = ckpt
        self.model: TriModalModel = ckpt.build_model()
        self.model.eval()
        self.n_points = n_points
        self.use_prompts = self.model.prompt_tokens.numel() > 0

    def embed_text(self, texts: Sequence[str]) -> np.ndarray:
        tokens, eos = tokenize_batch(texts, self.ckpt.vocab, self.ckpt.cfg.text_len)
        with torch.no_grad():
            return self.model.embed_text(tokens, eos).numpy()

    def embed_images(self, images: Sequence[DepthImage],
                     use_prompts: Optional[bool] = None) -> np.ndarray:
        use = self.use_prompts if use_prompts is None else use_prompts
        batch = torch.from_numpy(np.stack([im.pixels for im in images]))
        with torch.no_grad():
            return self.model.embed_image(batch, use_prompts=use).numpy()

    def embed_clouds(self, clouds: Sequence[PointCloud]) -> np.ndarray:
        pts = np.stack([resample_points(pc.points, self.n_points) for pc in clouds])
        with torch.no_grad():
            return self.model.embed_3d(torch.from_numpy(pts)).numpy()


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max()
    e = np.exp(z)
    return e / e.sum()


def build_text_bank(class_names: Sequence[str], template: str,
                    session: InferenceSession) -> TextClassBank:
    """One unit-norm text embedding per class from the prompt template."""
    if not class_names:
        raise ValueError("class list must be nonempty")
    if len(set(class_names)) != len(class_names):
        raise ValueError("duplicate class names in bank")
    captions = [render_caption(template, c) for c in class_names]
    matrix = session.embed_text(captions)
    return TextClassBank(class_names=list(class_names), template=template, matrix=matrix)


def zero_shot_classify(pc: PointCloud, bank: TextClassBank,
                       session: InferenceSession) -> Tuple[str, np.ndarray]:
    """Predict the class whose text embedding scores highest against the
    cloud's embedding; ties break to the lowest class index.
    """
    f3d = session.embed_clouds([pc])[0]
    scores = softmax(bank.matrix @ f3d)
    return bank.class_names[int(scores.argmax())], scores


@dataclass
class RetrievalHit:
    record_id: str
    similarity: float
    rank: int


def _rank_hits(ids: Sequence[str], sims: np.ndarray, topk: int) -> List[RetrievalHit]:
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    return [RetrievalHit(record_id=ids[i], similarity=float(sims[i]), rank=r + 1)
            for r, i in enumerate(order[:topk])]


class RetrievalIndex:
    """3D embeddings of a manifest's records, queryable by any modality."""

    def __init__(self, manifest: Manifest, session: InferenceSession,
                 record_ids: Optional[Sequence[str]] = None, batch_size: int = 64):
        self.session = session
        wanted = set(record_ids) if record_ids is not None else None
        entries = [(i, r) for i, r in enumerate(manifest.records)
                   if wanted is None or r.id in wanted]
        self.ids = [r.id for _, r in entries]
        self.classes = [r.class_name for _, r in entries]
        vecs = []
        for i0 in range(0, len(entries), batch_size):
            chunk = entries[i0:i0 + batch_size]
            batch = load_batch(manifest, [i for i, _ in chunk], session.n_points)
            with torch.no_grad():
                vecs.append(session.model.embed_3d(
                    torch.from_numpy(batch.points)).numpy())
        self.matrix = np.concatenate(vecs, axis=0) if vecs else np.zeros((0, 1))

    def query_embedding(self, vec: np.ndarray, topk: int) -> List[RetrievalHit]:
        sims = self.matrix @ vec
        return _rank_hits(self.ids, sims, min(topk, len(self.ids)))

    def query_text(self, text: str, topk: int) -> List[RetrievalHit]:
        return self.query_embedding(self.session.embed_text([text])[0], topk)

    def query_image(self, image: DepthImage, topk: int) -> List[RetrievalHit]:
        return self.query_embedding(self.session.embed_images([image])[0], topk)

    def query_cloud(self, pc: PointCloud, topk: int) -> List[RetrievalHit]:
        return self.query_embedding(self.session.embed_clouds([pc])[0], topk)


def retrieve(query: Union[str, DepthImage, PointCloud], manifest: Manifest,
             session: InferenceSession, topk: int = 5,
             index: Optional[RetrievalIndex] = None) -> List[RetrievalHit]:
    """Rank database point clouds against a text, image, or cloud query."""
    if topk < 1:
        raise ValueError("topk must be >= 1")
    index = index or RetrievalIndex(manifest, session)
    if isinstance(query, str):
        return index.query_text(query, topk)
    if isinstance(query, DepthImage):
        return index.query_image(query, topk)
    if isinstance(query, PointCloud):
        return index.query_cloud(query, topk)
    raise TypeError(f"unsupported query type {type(query)!r}")


# ---------------------------------------------------------------------------
# scene clustering and querying

@dataclass
class ClusterSet:
    k: int
    assignment: np.ndarray        # (M',) cluster index per kept point
    centroids: np.ndarray         # (k, 3)
    kept_indices: np.ndarray      # (M',) indices into the original scene
    embeddings: Optional[np.ndarray] = None  # (k, d) unit rows

    def members(self, cluster: int) -> np.ndarray:
        return self.kept_indices[self.assignment == cluster]


def strip_height_extremes(scene: SceneCloud, lower_pct: float = 5.0,
                          upper_pct: float = 95.0) -> np.ndarray:
    """Indices of points inside the [lower, upper] height percentile band."""
    z = scene.points[:, 2].astype(np.float64)
    lo, hi = np.percentile(z, [lower_pct, upper_pct])
    return np.flatnonzero((z >= lo) & (z <= hi))


def kmeans_seed_indices(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; draw order is part of the contract so an
    independent reimplementation with the same rng reproduces it exactly.
    """
    m = pts.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(m)
    d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            chosen[j] = rng.integers(m)
        else:
            r = rng.random() * total
            chosen[j] = min(int(np.searchsorted(np.cumsum(d2), r, side="right")), m - 1)
        d2 = np.minimum(d2, ((pts - pts[chosen[j]]) ** 2).sum(axis=1))
    return chosen


def lloyd(pts: np.ndarray, k: int, rng: np.random.Generator,
          max_iter: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding on xyz coordinates.

    Ties assign to the lowest centroid index; an emptied cluster reseeds at
    the point farthest from its assigned centroid.
    """
    if k < 1 or k > pts.shape[0]:
        raise ValueError(f"k={k} invalid for {pts.shape[0]} points")
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    centroids = pts[kmeans_seed_indices(pts, k, rng)].copy()
    assignment = np.full(pts.shape[0], -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignment = d2.argmin(axis=1)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        point_d2 = d2[np.arange(pts.shape[0]), assignment]
        for j in range(k):
            members = assignment == j
            if members.any():
                centroids[j] = pts[members].mean(axis=0)
            else:
                far = int(point_d2.argmax())
                centroids[j] = pts[far]
                point_d2[far] = -1.0
    return assignment, centroids


def kmeans_objective(pts: np.ndarray, assignment: np.ndarray,
                     centroids: np.ndarray) -> float:
    diff = pts.astype(np.float64) - centroids[assignment]
    return float((diff ** 2).sum())


def cluster_scene(scene: SceneCloud, k: int, seed: int, strip_floor: bool = False,
                  session: Optional[InferenceSession] = None,
                  max_iter: int = 100) -> ClusterSet:
    """Cluster the scene's coordinates, then recenter, normalize, and encode
    each cluster to its shared-space embedding.
    """
    if strip_floor:
        kept = strip_height_extremes(scene)
    else:
        kept = np.arange(scene.n_points)
    if kept.size < k:
        raise ValueError(f"scene has {kept.size} points after stripping, need >= k={k}")
    pts = scene.points[kept]
    rng = derive_rng(seed, "kmeans")
    assignment, centroids = lloyd(pts, k, rng, max_iter)
    counts = np.bincount(assignment, minlength=k)
    if (counts == 0).any():
        raise ValueError(f"scene collapses to fewer than k={k} distinct positions")
    embeddings = None
    if session is not None:
        clusters = []
        for j in range(k):
            sub = pts[assignment == j]
            clusters.append(normalize_unit_sphere(PointCloud(points=sub)))
        embeddings = session.embed_clouds(clusters)
    return ClusterSet(k=k, assignment=assignment, centroids=centroids,
                      kept_indices=kept, embeddings=embeddings)


@dataclass
class ClusterScore:
    cluster: int
    score: float
    rank: int


def scene_query(clusters: ClusterSet, query: str,
                session: InferenceSession) -> List[ClusterScore]:
    """Rank clusters against a text query by softmax over inner products."""
    if not query.strip():
        raise ValueError("query text must be nonempty")
    if clusters.embeddings is None:
        raise ValueError("cluster set carries no embeddings; cluster with a session")
    ftext = session.embed_text([query])[0]
    scores = softmax(clusters.embeddings @ ftext)
    order = sorted(range(clusters.k), key=lambda j: (-scores[j], j))
    return [ClusterScore(cluster=j, score=float(scores[j]), rank=r + 1)
            for r, j in enumerate(order)]


# ---------------------------------------------------------------------------
# embedding export

def export_embeddings(manifest: Manifest, session: InferenceSession, out_path,
                      modalities: Sequence[str] = ("3D",), batch_size: int = 64) -> int:
    """Write one CSV row per (record, modality): id, class, modality, then the
    embedding columns. Rows are ordered by record id, then modality.
    """
    d = session.ckpt.cfg.embed_dim
    order = sorted(range(len(manifest.records)), key=lambda i: manifest.records[i].id)
    rows = []
    for i0 in range(0, len(order), batch_size):
        chunk = order[i0:i0 + batch_size]
        batch = load_batch(manifest, chunk, session.n_points)
        recs = [manifest.records[i] for i in chunk]
        vecs: Dict[str, np.ndarray] = {}
        with torch.no_grad():
            if "3D" in modalities:
                vecs["3D"] = session.model.embed_3d(torch.from_numpy(batch.points)).numpy()
            if "2D" in modalities:
                vecs["2D"] = session.model.embed_image(
                    torch.from_numpy(batch.images),
                    use_prompts=session.use_prompts).numpy()
        for j, rec in enumerate(recs):
            for mod in modalities:
                rows.append([rec.id, rec.class_name, mod] + vecs[mod][j].tolist())
    rows.sort(key=lambda r: (r[0], r[2]))
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class", "modality"] + [f"e{i}" for i in range(d)])
        writer.writerows(rows)
    return len(rows)

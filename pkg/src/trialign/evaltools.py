"""Evaluation helpers shared by the CLI and the acceptance suite: labeled
array extraction for fine-tuning, probe feature extraction, and zero-shot
accuracy over a manifest.
"""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from .corpus import Manifest, eval_records, instance_split, load_batch
from .inference import DEFAULT_BANK_TEMPLATE, InferenceSession, build_text_bank
from .seeding import derive_rng


def _indices_of(manifest: Manifest, records) -> List[int]:
    position = {id(r): i for i, r in enumerate(manifest.records)}
    return [position[id(r)] for r in records]


def classification_arrays(manifest: Manifest, n_points: int, eval_frac: float,
                          fraction: float = 1.0, seed: int = 0,
                          ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Labeled (points, class index) arrays: train split possibly subsampled
    per class by `fraction`, eval split complete. All classes participate.
    """
    train, test = instance_split(manifest, eval_frac)
    if fraction < 1.0:
        rng = derive_rng(seed, "finetune-fraction")
        kept = []
        for cname in manifest.classes:
            rows = [r for r in train if r.class_name == cname]
            take = max(1, int(round(fraction * len(rows))))
            pick = rng.choice(len(rows), size=take, replace=False)
            kept.extend(rows[i] for i in sorted(pick))
        train = kept
    xs, ys = [], []
    for recs in (train, test):
        batch = load_batch(manifest, _indices_of(manifest, recs), n_points)
        xs.append(batch.points)
        ys.append(batch.class_idx)
    return xs[0], ys[0], xs[1], ys[1]


def probe_features(manifest: Manifest, session: InferenceSession,
                   class_names: Sequence[str], use_prompts: bool,
                   seed: int = 0, train_frac: float = 0.7,
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pre-projection image features for the given classes, split into probe
    train/test sets. The prompted pathway injects the checkpoint's tokens.
    """
    recs = [(i, r) for i, r in enumerate(manifest.records)
            if r.class_name in class_names]
    feats, labels = [], []
    for i0 in range(0, len(recs), 64):
        chunk = recs[i0:i0 + 64]
        batch = load_batch(manifest, [i for i, _ in chunk], session.n_points)
        with torch.no_grad():
            f = session.model.encode_image(torch.from_numpy(batch.images),
                                           use_prompts=use_prompts).numpy()
        feats.append(f)
        labels.extend(list(class_names).index(r.class_name) for _, r in chunk)
    x = np.concatenate(feats, axis=0)
    y = np.asarray(labels, dtype=np.int64)
    rng = derive_rng(seed, "probe-split")
    order = rng.permutation(len(y))
    cut = int(round(train_frac * len(y)))
    tr, te = order[:cut], order[cut:]
    return x[tr], y[tr], x[te], y[te]


def zero_shot_accuracy(session: InferenceSession, manifest: Manifest,
                       class_names: Sequence[str],
                       template: str = DEFAULT_BANK_TEMPLATE,
                       eval_frac: float = 0.25,
                       batch_size: int = 64) -> Tuple[float, Dict[str, float]]:
    """Batched zero-shot accuracy over held-out records of the given classes."""
    bank = build_text_bank(class_names, template, session)
    records = eval_records(manifest, eval_frac, classes=class_names)
    idxs = _indices_of(manifest, records)
    correct: Dict[str, List[int]] = {c: [0, 0] for c in class_names}
    for i0 in range(0, len(idxs), batch_size):
        batch = load_batch(manifest, idxs[i0:i0 + batch_size], session.n_points)
        with torch.no_grad():
            f3d = session.model.embed_3d(torch.from_numpy(batch.points)).numpy()
        pred = (f3d @ bank.matrix.T).argmax(axis=1)
        for j, rec in enumerate(records[i0:i0 + batch_size]):
            correct[rec.class_name][1] += 1
            correct[rec.class_name][0] += int(
                bank.class_names[pred[j]] == rec.class_name)
    per_class = {c: (v[0] / v[1] if v[1] else 0.0) for c, v in correct.items()}
    total = sum(v[1] for v in correct.values())
    overall = sum(v[0] for v in correct.values()) / max(1, total)
    return overall, per_class


def adjusted_rand_index(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """Chance-corrected agreement between two partitions of the same points."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("partitions must cover the same points")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    expected = sum_rows * sum_cols / comb2(n)
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))

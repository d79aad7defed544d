"""Report rendering: every training or evaluation command that writes a
CSV also drops a matching figure next to it.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def _read_csv(path) -> List[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def save_loss_curves(log_csv, out_png, title: str = "training loss") -> Path:
    """Loss and learning-rate curves from a training log CSV."""
    rows = _read_csv(log_csv)
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(7, 6), sharex=True,
                                         height_ratios=[2, 1])
    for column, label in (("loss_3d", "3D alignment"), ("loss_p", "image-text")):
        pts = [(int(r["step"]), float(r[column])) for r in rows if r.get(column)]
        if pts:
            xs, ys = zip(*pts)
            ax_loss.plot(xs, ys, label=label, linewidth=0.9)
    ax_loss.set_ylabel("loss")
    ax_loss.set_title(title)
    ax_loss.legend(loc="upper right", fontsize=8)
    for column, label in (("lr_3d", "lr 3D"), ("lr_p", "lr prompts")):
        pts = [(int(r["step"]), float(r[column])) for r in rows if r.get(column)]
        if pts:
            xs, ys = zip(*pts)
            ax_lr.plot(xs, ys, label=label, linewidth=0.9)
    ax_lr.set_xlabel("step")
    ax_lr.set_ylabel("learning rate")
    ax_lr.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def save_accuracy_bars(per_class: Dict[str, float], out_png,
                       title: str = "accuracy by class",
                       overall: Optional[float] = None) -> Path:
    names = list(per_class)
    values = [per_class[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names)), 4))
    ax.bar(range(len(names)), values, color="#4878b0")
    if overall is not None:
        ax.axhline(overall, color="#d1605e", linestyle="--", linewidth=1,
                   label=f"overall {overall:.3f}")
        ax.legend(fontsize=8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def save_series(series: Dict[str, Sequence[float]], out_png, xlabel: str,
                ylabel: str, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in series.items():
        ax.plot(range(len(values)), values, label=label, linewidth=0.9)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def write_rows_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path

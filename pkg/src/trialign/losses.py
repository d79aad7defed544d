"""Contrastive objectives: multi-positive NCE over inner-product blocks and
the composite losses for the 3D tower and the prompt tokens.

Positives are class-level: any same-class pair in the batch counts. With
one sample per class this reduces to the usual instance-matched InfoNCE.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch


class ParameterError(ValueError):
    pass


class ContractViolation(ValueError):
    pass


@dataclass
class SimilarityBlock:
    matrix: torch.Tensor    # (B, B) inner products
    pos_mask: torch.Tensor  # (B, B) bool, True where classes match
    tau: float = 0.07

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if self.matrix.shape != self.pos_mask.shape or self.matrix.ndim != 2:
            raise ValueError("matrix and pos_mask must be matching 2-D arrays")
        if not bool(self.pos_mask.any(dim=1).all()):
            raise ContractViolation("every anchor row needs at least one positive")


def nce(block: SimilarityBlock) -> torch.Tensor:
    """Per-anchor cross-entropy averaged over that anchor's positives, then
    over the batch. The denominator runs over every candidate column;
    stabilized by row-max subtraction inside logsumexp.
    """
    logits = block.matrix / block.tau
    lse = torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = logits - lse
    pos = block.pos_mask.to(log_prob.dtype)
    per_anchor = -(log_prob * pos).sum(dim=1) / pos.sum(dim=1)
    return per_anchor.mean()


def _class_mask(labels_a: torch.Tensor, labels_b: torch.Tensor) -> torch.Tensor:
    return labels_a.unsqueeze(1) == labels_b.unsqueeze(0)


def pair_loss(f_a: torch.Tensor, f_b: torch.Tensor,
              labels: Optional[torch.Tensor] = None, tau: float = 0.07) -> torch.Tensor:
    """Symmetric two-direction NCE between two modality batches.

    With labels, positives are same-class pairs; without, only the aligned
    instance counts (identity mask).
    """
    if f_a.shape != f_b.shape:
        raise ValueError("modality batches must have equal shapes")
    sim = f_a @ f_b.T
    if labels is None:
        mask = torch.eye(f_a.shape[0], dtype=torch.bool, device=f_a.device)
    else:
        mask = _class_mask(labels, labels)
    fwd = nce(SimilarityBlock(matrix=sim, pos_mask=mask, tau=tau))
    bwd = nce(SimilarityBlock(matrix=sim.T, pos_mask=mask.T, tau=tau))
    return fwd + bwd


def loss_3d(f3d: torch.Tensor, f2d: Optional[torch.Tensor],
            ftext: Optional[torch.Tensor], labels: Optional[torch.Tensor],
            tau: float = 0.07) -> torch.Tensor:
    """Objective for the 3D tower: 3D-image plus 3D-text alignment.

    Either counterpart may be omitted (ablation flags), but not both.
    """
    if f2d is None and ftext is None:
        raise ParameterError("loss_3d needs at least one counterpart modality")
    total = f3d.new_zeros(())
    if f2d is not None:
        total = total + pair_loss(f3d, f2d, labels, tau)
    if ftext is not None:
        total = total + pair_loss(f3d, ftext, labels, tau)
    return total


def loss_prompt(f2d: torch.Tensor, ftext: torch.Tensor,
                labels: Optional[torch.Tensor], tau: float = 0.07) -> torch.Tensor:
    """Objective for the prompt tokens: symmetric image-text alignment."""
    return pair_loss(f2d, ftext, labels, tau)

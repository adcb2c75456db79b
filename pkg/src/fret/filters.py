"""Reliability filters: entropy scoring, per-class top-K selection, soft
pseudo-labels from center similarity, and the consistency cut that gates
which samples feed the losses.

All functions are pure and deterministic; entropy ties are broken by
ascending sample index so runs are reproducible across platforms.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .objectives import DEGENERATE_NORM, ClassCenters

__all__ = [
    "entropy",
    "topk_per_class",
    "soft_pseudo_labels",
    "consistency_filter",
]


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Per-row Shannon entropy (nats) of the softmax of logit rows ``p``."""
    if p.ndim != 2:
        raise ValueError(f"expected a 2-d logit batch, got shape {tuple(p.shape)}")
    log_sm = F.log_softmax(p, dim=1)
    return -(log_sm.exp() * log_sm).sum(dim=1)


def _stable_entropy_order(h: torch.Tensor) -> torch.Tensor:
    """Sample indices ordered by ascending entropy, ties by ascending index."""
    return torch.argsort(h, stable=True)


def topk_per_class(h: torch.Tensor, p: torch.Tensor, k1: int) -> torch.Tensor:
    """Indices of the ``k1`` lowest-entropy samples of each predicted class.

    Classes with fewer than ``k1`` samples contribute all of theirs; the union
    is returned sorted ascending.
    """
    if k1 < 1:
        raise ValueError(f"k1 must be >= 1, got {k1}")
    if h.numel() != p.shape[0]:
        raise ValueError("one entropy score required per logit row")
    preds = p.argmax(dim=1)
    order = _stable_entropy_order(h)
    picked: list[torch.Tensor] = []
    for cls in preds.unique():
        cls_order = order[preds[order] == cls]
        picked.append(cls_order[:k1])
    return torch.sort(torch.cat(picked)).values


def soft_pseudo_labels(r_a: torch.Tensor, centers: ClassCenters) -> torch.Tensor:
    """Row-stochastic n×C matrix: softmax of cosine similarity to valid centers.

    Classes without a valid center get probability exactly 0; the softmax runs
    over the valid subset only.
    """
    if not bool(centers.valid.any()):
        raise ValueError("soft pseudo-labels need at least one valid center")
    valid_idx = torch.nonzero(centers.valid, as_tuple=False).squeeze(1)
    cen = centers.centers[valid_idx]
    row_norms = torch.linalg.vector_norm(r_a, dim=1).clamp_min(DEGENERATE_NORM)
    cen_norms = torch.linalg.vector_norm(cen, dim=1).clamp_min(DEGENERATE_NORM)
    sims = (r_a @ cen.T) / (row_norms.unsqueeze(1) * cen_norms.unsqueeze(0))
    y_hat = torch.zeros(r_a.shape[0], centers.valid.numel(), dtype=r_a.dtype)
    y_hat[:, valid_idx] = F.softmax(sims, dim=1)
    return y_hat


def _entropy_cut_size(k2: float, n: int) -> int:
    # ceil with a tiny slack so exact products like 0.7 * 10 do not round up,
    # clamped so any positive k2 admits at least one sample
    return min(n, max(1, math.ceil(k2 * n - 1e-9)))


def consistency_filter(
    h: torch.Tensor, p: torch.Tensor, y_hat: torch.Tensor, k2: float
) -> torch.Tensor:
    """Low-entropy samples whose prediction agrees with their pseudo-label.

    Keeps the ``ceil(k2 * n)`` lowest-entropy samples, then retains those with
    ``argmax(p) == argmax(y_hat)``. May be empty; callers skip the step then.
    """
    if not 0.0 < k2 <= 1.0:
        raise ValueError(f"k2 must lie in (0, 1], got {k2}")
    n = h.numel()
    if p.shape[0] != n or y_hat.shape[0] != n:
        raise ValueError("entropy, logits and pseudo-labels must align row-wise")
    cut = _stable_entropy_order(h)[: _entropy_cut_size(k2, n)]
    consistent = p.argmax(dim=1)[cut] == y_hat.argmax(dim=1)[cut]
    return torch.sort(cut[consistent]).values

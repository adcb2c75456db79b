"""Losses that couple redundancy elimination with class discriminability.

The representation-layer loss pulls each attention representation toward its
predicted-class center and pushes it away from every other center and from the
sample's own redundancy representation, InfoNCE-style over cosine
similarities. The prediction-layer loss sharpens attention predictions by
entropy minimization and applies negative learning to redundancy predictions
against the complement of the attention logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import EmptySelectionError, NonFiniteLossError, ShapeMismatchError

__all__ = [
    "DEGENERATE_NORM",
    "ClassCenters",
    "LossBreakdown",
    "class_centers",
    "contrastive_loss",
    "prediction_loss",
    "gfret_loss",
]

# Below this Euclidean norm a vector has no usable direction: cosine terms
# that would involve it are skipped rather than computed.
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class ClassCenters:
    """Per-class mean embeddings with validity flags.

    ``centers[j]`` is the mean embedding of contributing samples predicted as
    class ``j``; ``valid[j]`` is False (and the row zero) when no sample
    contributed.
    """

    centers: torch.Tensor  # C × d
    valid: torch.Tensor  # C bool
    counts: torch.Tensor  # C int64


@dataclass(frozen=True)
class LossBreakdown:
    """Combined objective ``total = l_r + lam * (l_p_entropy + l_p_negative)``."""

    l_r: torch.Tensor
    l_p_entropy: torch.Tensor
    l_p_negative: torch.Tensor
    total: torch.Tensor
    lam: float

    def to_dict(self) -> dict[str, float]:
        return {
            "l_r": float(self.l_r.detach()),
            "l_p_entropy": float(self.l_p_entropy.detach()),
            "l_p_negative": float(self.l_p_negative.detach()),
            "total": float(self.total.detach()),
            "lambda": self.lam,
        }


def class_centers(
    z: torch.Tensor, p: torch.Tensor, selected: torch.Tensor
) -> ClassCenters:
    """Mean embedding per predicted class over the ``selected`` sample indices."""
    selected = torch.as_tensor(selected, dtype=torch.long)
    if selected.numel() == 0:
        raise EmptySelectionError("no samples selected for class centers")
    if z.shape[0] != p.shape[0]:
        raise ShapeMismatchError(
            f"embeddings ({z.shape[0]} rows) and logits ({p.shape[0]} rows) disagree"
        )
    num_classes = p.shape[1]
    preds = p[selected].argmax(dim=1)
    counts = torch.bincount(preds, minlength=num_classes)
    sums = torch.zeros(num_classes, z.shape[1], dtype=z.dtype)
    sums = sums.index_add(0, preds, z[selected])
    denom = counts.clamp(min=1).to(z.dtype).unsqueeze(1)
    return ClassCenters(centers=sums / denom, valid=counts > 0, counts=counts)


def _row_norms(x: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(x, dim=1)


def _cosine_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine; callers must exclude degenerate rows beforehand."""
    return (a * b).sum(dim=1) / (_row_norms(a) * _row_norms(b))


def contrastive_loss(
    r_a: torch.Tensor,
    r_r: torch.Tensor,
    centers: ClassCenters,
    assign: torch.Tensor,
) -> torch.Tensor:
    """Center-contrastive loss over attention vs. redundancy representations.

    Per sample i with assigned class o:
    ``-log exp(cos(r_a_i, c_o)) / (Σ_j exp(cos(r_a_i, c_j)) + exp(cos(r_a_i, r_r_i)))``
    where j ranges over valid classes (the assigned one included). Samples
    whose own vectors or assigned center are degenerate are skipped.
    """
    assign = torch.as_tensor(assign, dtype=torch.long)
    if r_a.shape != r_r.shape:
        raise ShapeMismatchError(
            f"attention {tuple(r_a.shape)} vs redundancy {tuple(r_r.shape)}"
        )
    if assign.numel() != r_a.shape[0]:
        raise ShapeMismatchError("one class assignment required per sample")
    if not bool(centers.valid[assign].all()):
        raise ValueError("a sample is assigned to a class with no valid center")

    center_ok = centers.valid & (_row_norms(centers.centers) >= DEGENERATE_NORM)
    usable = torch.nonzero(center_ok, as_tuple=False).squeeze(1)
    keep = (
        (_row_norms(r_a) >= DEGENERATE_NORM)
        & (_row_norms(r_r) >= DEGENERATE_NORM)
        & center_ok[assign]
    )
    if usable.numel() == 0 or not bool(keep.any()):
        return (r_a.sum() + r_r.sum()) * 0.0

    a = r_a[keep]
    b = r_r[keep]
    cls = assign[keep]
    cen = centers.centers[usable]  # V × d
    sims = (a @ cen.T) / (
        _row_norms(a).unsqueeze(1) * _row_norms(cen).unsqueeze(0)
    )  # n × V
    sim_rr = _cosine_rows(a, b)  # n

    # position of each assigned class inside the usable-center subset
    pos_of_class = torch.full((centers.valid.numel(),), -1, dtype=torch.long)
    pos_of_class[usable] = torch.arange(usable.numel())
    numer = sims.gather(1, pos_of_class[cls].unsqueeze(1)).squeeze(1)
    denom = torch.logsumexp(torch.cat([sims, sim_rr.unsqueeze(1)], dim=1), dim=1)
    return (denom - numer).sum()


def prediction_loss(
    p_a: torch.Tensor, p_r: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Entropy term on attention logits, negative-learning term on redundancy logits.

    The negative term scores the redundancy softmax against the log-softmax of
    the elementwise complement ``1 − p_a`` of the attention logits, computed
    with stable log-softmax throughout.
    """
    if p_a.shape != p_r.shape:
        raise ShapeMismatchError(
            f"attention {tuple(p_a.shape)} vs redundancy {tuple(p_r.shape)} logits"
        )
    if p_a.numel() == 0:
        raise ValueError("empty logit batch")
    if not (torch.isfinite(p_a).all() and torch.isfinite(p_r).all()):
        raise NonFiniteLossError("logits contain non-finite entries")
    log_sm_a = F.log_softmax(p_a, dim=1)
    entropy_term = -(log_sm_a.exp() * log_sm_a).sum()
    log_sm_complement = F.log_softmax(1.0 - p_a, dim=1)
    negative_term = -(F.softmax(p_r, dim=1) * log_sm_complement).sum()
    return entropy_term, negative_term


def gfret_loss(
    r_a: torch.Tensor,
    r_r: torch.Tensor,
    p_a: torch.Tensor,
    p_r: torch.Tensor,
    centers: ClassCenters,
    assign: torch.Tensor,
    lam: float,
) -> LossBreakdown:
    """Combine representation- and prediction-layer losses for one batch."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    l_r = contrastive_loss(r_a, r_r, centers, assign)
    l_p_entropy, l_p_negative = prediction_loss(p_a, p_r)
    total = l_r + lam * (l_p_entropy + l_p_negative)
    return LossBreakdown(
        l_r=l_r,
        l_p_entropy=l_p_entropy,
        l_p_negative=l_p_negative,
        total=total,
        lam=lam,
    )

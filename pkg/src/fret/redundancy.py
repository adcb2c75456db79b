"""Feature redundancy score, its differentiable loss form, and normalized traces.

The redundancy of an embedding batch ``Z`` (rows = samples, columns = features)
is the entrywise L1 norm of the off-diagonal of the Gram matrix of the
column-normalized batch: the sum of absolute cosine similarities between
distinct feature columns. Zero everywhere iff the feature columns are pairwise
orthogonal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import NonFiniteLossError

__all__ = [
    "RedundancyScore",
    "NrsTrace",
    "column_normalize",
    "redundancy_score",
    "sfret_loss",
    "nrs_update",
]


@dataclass(frozen=True)
class RedundancyScore:
    """Scalar redundancy of one embedding batch."""

    value: float
    dim: int
    batch_size: int


@dataclass
class NrsTrace:
    """Per-step redundancy trace, normalized by its value at the first step.

    ``normalized[k] = raw[k] / raw[0]``; if the first recorded raw value is 0,
    every normalized entry is defined as 0.
    """

    steps: list[int] = field(default_factory=list)
    raw: list[float] = field(default_factory=list)
    normalized: list[float] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "raw", "normalized"])
            for s, r, n in zip(self.steps, self.raw, self.normalized):
                writer.writerow([s, f"{r:.12g}", f"{n:.12g}"])


def column_normalize(z: torch.Tensor) -> torch.Tensor:
    """Scale each column of ``z`` to unit Euclidean norm.

    Exactly-zero columns are left zero so dead features contribute nothing
    downstream instead of producing NaNs.
    """
    if z.ndim != 2:
        raise ValueError(f"expected a 2-d batch, got shape {tuple(z.shape)}")
    norms = torch.linalg.vector_norm(z, dim=0, keepdim=True)
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    return z / safe


def _offdiag_abs_sum(z: torch.Tensor) -> torch.Tensor:
    zt = column_normalize(z)
    gram = zt.T @ zt
    off = gram - torch.diag_embed(torch.diagonal(gram))
    return off.abs().sum()


def redundancy_score(z: torch.Tensor) -> RedundancyScore:
    """Sum of |cos| over all ordered pairs of distinct feature columns of ``z``."""
    with torch.no_grad():
        value = _offdiag_abs_sum(z)
    return RedundancyScore(value=float(value), dim=z.shape[1], batch_size=z.shape[0])


def sfret_loss(z: torch.Tensor) -> torch.Tensor:
    """Differentiable redundancy of ``z``, for direct minimization.

    Forward value equals ``redundancy_score(z).value``; gradients flow into
    ``z`` through both the Gram product and the column normalization.
    """
    if not torch.isfinite(z).all():
        raise NonFiniteLossError("embedding batch contains non-finite entries")
    return _offdiag_abs_sum(z)


def nrs_update(trace: NrsTrace, step: int, z: torch.Tensor) -> NrsTrace:
    """Append the redundancy of ``z`` at ``step`` to ``trace`` (in place)."""
    if trace.steps and step <= trace.steps[-1]:
        raise ValueError(f"step {step} not after last recorded step {trace.steps[-1]}")
    raw = redundancy_score(z).value
    trace.steps.append(step)
    trace.raw.append(raw)
    baseline = trace.raw[0]
    trace.normalized.append(raw / baseline if baseline > 0 else 0.0)
    return trace

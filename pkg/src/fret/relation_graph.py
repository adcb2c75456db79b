"""Second-order feature relation graph and its attention/redundancy split.

A batch ``Z`` (n×d) induces the d×d relation graph ``G_F = ZᵀZ``. A symmetric
mask splits it into an attention graph ``G_A = G_F ⊙ M`` holding the relations
to keep and a redundancy graph ``G_R = G_F − G_A`` holding everything else.
Each part propagates the batch through a one-layer graph convolution
``Z · D^{−1/2} G D^{−1/2}`` followed by the classifier head.

Degrees use absolute row sums plus a small epsilon: the redundancy graph has
signed entries, so plain row sums could be zero or negative and the inverse
square root undefined.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeMismatchError

__all__ = [
    "DEGREE_EPS",
    "MaskMatrix",
    "GraphPair",
    "PropagatedBatch",
    "identity_mask",
    "feature_graph",
    "decompose",
    "normalize_graph",
    "propagate",
    "dump_graphs",
]

DEGREE_EPS = 1e-8


@dataclass(frozen=True)
class MaskMatrix:
    """Symmetric d×d selection mask; ``identity`` keeps only self-relations."""

    m: torch.Tensor
    kind: str = "custom"

    def __post_init__(self) -> None:
        if self.m.ndim != 2 or self.m.shape[0] != self.m.shape[1]:
            raise ShapeMismatchError(f"mask must be square, got {tuple(self.m.shape)}")
        if not torch.equal(self.m, self.m.T):
            raise ValueError("mask must be exactly symmetric")


def identity_mask(dim: int, dtype: torch.dtype = torch.float32) -> MaskMatrix:
    return MaskMatrix(m=torch.eye(dim, dtype=dtype), kind="identity")


@dataclass(frozen=True)
class GraphPair:
    """Mask-selected attention graph and residual redundancy graph.

    ``g_a + g_r`` reproduces ``source`` bit-for-bit because ``g_r`` is defined
    by subtraction.
    """

    g_a: torch.Tensor
    g_r: torch.Tensor
    source: torch.Tensor


@dataclass(frozen=True)
class PropagatedBatch:
    """Attention/redundancy representations and their head projections."""

    r_a: torch.Tensor
    p_a: torch.Tensor
    r_r: torch.Tensor
    p_r: torch.Tensor


def feature_graph(z: torch.Tensor) -> torch.Tensor:
    """Second-order feature relation graph ``ZᵀZ`` of a batch (raw, unnormalized)."""
    if z.ndim != 2:
        raise ValueError(f"expected a 2-d batch, got shape {tuple(z.shape)}")
    return z.T @ z


def decompose(g_f: torch.Tensor, mask: MaskMatrix) -> GraphPair:
    """Split ``g_f`` into masked attention part and residual redundancy part."""
    if g_f.shape != mask.m.shape:
        raise ShapeMismatchError(
            f"graph shape {tuple(g_f.shape)} != mask shape {tuple(mask.m.shape)}"
        )
    g_a = g_f * mask.m.to(g_f.dtype)
    g_r = g_f - g_a
    return GraphPair(g_a=g_a, g_r=g_r, source=g_f)


def normalize_graph(g: torch.Tensor) -> torch.Tensor:
    """Symmetric degree normalization ``D^{−1/2} G D^{−1/2}``.

    ``D_ii = Σ_j |G_ij| + eps`` keeps the scaling defined for signed graphs
    and for all-zero rows.
    """
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeMismatchError(f"graph must be square, got {tuple(g.shape)}")
    degree = g.abs().sum(dim=1) + DEGREE_EPS
    inv_sqrt = degree.rsqrt()
    return g * inv_sqrt.unsqueeze(0) * inv_sqrt.unsqueeze(1)


def propagate(z: torch.Tensor, pair: GraphPair, head: nn.Module) -> PropagatedBatch:
    """One-layer graph convolution of ``z`` through both graphs, then the head."""
    if z.shape[1] != pair.g_a.shape[0]:
        raise ShapeMismatchError(
            f"batch width {z.shape[1]} != graph dimension {pair.g_a.shape[0]}"
        )
    r_a = z @ normalize_graph(pair.g_a)
    r_r = z @ normalize_graph(pair.g_r)
    return PropagatedBatch(r_a=r_a, p_a=head(r_a), r_r=r_r, p_r=head(r_r))


def dump_graphs(pair: GraphPair, out_dir, stem: str = "graph") -> list:
    """Write the three graphs as dense ``.npy`` arrays plus an |entry| heatmap
    image for visual inspection of the redundancy structure."""
    import pathlib

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    named = {"g_f": pair.source, "g_a": pair.g_a, "g_r": pair.g_r}
    paths = []
    for name, graph in named.items():
        path = out_dir / f"{stem}.{name}.npy"
        np.save(path, graph.detach().cpu().numpy())
        paths.append(path)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.8))
    for ax, (name, graph) in zip(axes, named.items()):
        image = ax.imshow(graph.detach().abs().cpu().numpy(), cmap="Reds")
        ax.set_title(name)
        fig.colorbar(image, ax=ax, fraction=0.046)
    fig.tight_layout()
    heatmap = out_dir / f"{stem}.heatmap.png"
    fig.savefig(heatmap, dpi=110)
    plt.close(fig)
    paths.append(heatmap)
    return paths

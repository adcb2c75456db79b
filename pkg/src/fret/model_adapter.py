"""Encoder/head decomposition of a classifier and parameter-update policies.

A classifier is split at a named layer into ``encoder`` (everything up to the
final affine classification layer) and ``head`` (that affine layer), so the
adaptation loop can read embeddings and control exactly which parameters a
gradient step may touch.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Iterable

import torch
from torch import nn

from .errors import EmptySelectionError, NoNormLayersError, UnsupportedArchitectureError

__all__ = [
    "PARAM_POLICY_MODES",
    "SplitModel",
    "ParamPolicy",
    "split",
    "trainable_params",
    "norm_affine_parameters",
    "force_batch_stats",
    "clone_model",
]

_NORM_TYPES = (
    nn.BatchNorm1d,
    nn.BatchNorm2d,
    nn.BatchNorm3d,
    nn.GroupNorm,
    nn.LayerNorm,
    nn.InstanceNorm1d,
    nn.InstanceNorm2d,
    nn.InstanceNorm3d,
)

PARAM_POLICY_MODES = ("norm_affine_only", "head_only", "encoder_and_head", "full")


class SplitModel(nn.Module):
    """A classifier decomposed into embedding encoder and affine head."""

    def __init__(
        self, encoder: nn.Module, head: nn.Linear, embed_dim: int, num_classes: int
    ) -> None:
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.embed_dim = embed_dim
        self.num_classes = num_classes

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


@dataclass(frozen=True)
class ParamPolicy:
    """Selects which parameters the adaptation loop may update.

    ``collect``, when given, overrides ``mode`` with a custom selector.
    """

    mode: str = "norm_affine_only"
    collect: Callable[[SplitModel], list[nn.Parameter]] | None = None

    def __post_init__(self) -> None:
        if self.collect is None and self.mode not in PARAM_POLICY_MODES:
            raise ValueError(
                f"unknown mode {self.mode!r}; expected one of {PARAM_POLICY_MODES}"
            )


def split(model: nn.Module, cut: str) -> SplitModel:
    """Split ``model`` at the layer named ``cut`` (the final affine layer).

    The input model is left untouched; the returned composition reproduces its
    logits bit-for-bit because the head runs the exact same affine op that the
    original forward ran in place.
    """
    try:
        target = model.get_submodule(cut)
    except AttributeError as exc:
        raise UnsupportedArchitectureError(f"no layer named {cut!r}") from exc
    if not isinstance(target, nn.Linear):
        raise UnsupportedArchitectureError(
            f"layer {cut!r} is {type(target).__name__}, not an affine (Linear) layer"
        )
    encoder = copy.deepcopy(model)
    head: nn.Linear = encoder.get_submodule(cut)  # type: ignore[assignment]
    if "." in cut:
        parent_name, attr = cut.rsplit(".", 1)
        parent = encoder.get_submodule(parent_name)
    else:
        parent, attr = encoder, cut
    setattr(parent, attr, nn.Identity())
    return SplitModel(
        encoder=encoder,
        head=head,
        embed_dim=head.in_features,
        num_classes=head.out_features,
    )


def norm_affine_parameters(model: nn.Module) -> list[nn.Parameter]:
    """Scale/shift parameters of every normalization layer, nothing else."""
    params: list[nn.Parameter] = []
    for module in model.modules():
        if isinstance(module, _NORM_TYPES):
            for p in (module.weight, module.bias):
                if p is not None:
                    params.append(p)
    return params


def _dedupe(params: Iterable[nn.Parameter]) -> list[nn.Parameter]:
    seen: set[int] = set()
    out: list[nn.Parameter] = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def trainable_params(model: SplitModel, policy: ParamPolicy) -> list[nn.Parameter]:
    """Enable gradients on the policy's selection and freeze everything else."""
    if policy.collect is not None:
        selected = policy.collect(model)
    elif policy.mode == "norm_affine_only":
        selected = norm_affine_parameters(model)
    elif policy.mode == "head_only":
        selected = list(model.head.parameters())
    elif policy.mode == "encoder_and_head":
        selected = list(model.encoder.parameters()) + list(model.head.parameters())
    else:  # full
        selected = list(model.parameters())
    selected = _dedupe(selected)
    if not selected:
        raise EmptySelectionError(f"policy {policy.mode!r} matched no parameters")
    for p in model.parameters():
        p.requires_grad_(False)
    for p in selected:
        p.requires_grad_(True)
    return selected


def force_batch_stats(model: nn.Module) -> int:
    """Make every norm layer with stored statistics use current-batch statistics.

    Returns the number of layers converted; raises when the model has none, so
    callers cannot silently run a no-op recalibration.
    """
    converted = 0
    for module in model.modules():
        if isinstance(module, _NORM_TYPES) and getattr(module, "track_running_stats", False):
            module.track_running_stats = False
            module.running_mean = None
            module.running_var = None
            converted += 1
    if converted == 0:
        raise NoNormLayersError("model has no normalization layers with stored statistics")
    return converted


def clone_model(model: SplitModel) -> SplitModel:
    """Deep copy for per-segment resets and read-only metric snapshots."""
    return copy.deepcopy(model)

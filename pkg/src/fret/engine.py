"""Online adaptation loop: one forward, one method-specific loss, at most one
optimizer step per incoming batch.

Methods
-------
``source``       frozen model, stored normalization statistics, no updates.
``bn_recal``     batch-statistic normalization, no gradient steps.
``entropy_min``  mean prediction-entropy minimization, one step per batch.
``sfret``        direct redundancy-score minimization on the whole batch.
``gfret``        graph-decomposed contrastive + prediction losses on samples
                 surviving the reliability filters.

The loop is strictly sequential: predictions for a batch come from the same
forward pass that feeds the loss, so they reflect parameters adapted on
previous batches only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import torch
import torch.nn.functional as F

from . import filters
from .errors import NoNormLayersError, NonFiniteLossError
from .data import StreamBatch
from .model_adapter import (
    ParamPolicy,
    SplitModel,
    clone_model,
    force_batch_stats,
    trainable_params,
)
from .objectives import ClassCenters, LossBreakdown, class_centers, gfret_loss
from .redundancy import RedundancyScore, redundancy_score, sfret_loss
from .relation_graph import MaskMatrix, decompose, feature_graph, identity_mask, propagate

__all__ = [
    "METHODS",
    "AdaptationConfig",
    "AdaptationRecord",
    "EngineState",
    "init_state",
    "adapt_step",
    "run_stream",
    "baseline_entropy_min",
    "baseline_bn_recal",
]

METHODS = ("source", "bn_recal", "entropy_min", "sfret", "gfret")
_TRAINING_METHODS = ("entropy_min", "sfret", "gfret")


@dataclass(frozen=True)
class AdaptationConfig:
    """Everything one adaptation run needs besides the model and the stream."""

    method: str = "source"
    lr: float = 1e-4
    lam: float = 0.1
    k1: int = 100
    k2: float = 0.9
    param_policy: ParamPolicy = field(default_factory=ParamPolicy)
    batch_size: int = 128
    protocol: str = "continuous"
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.0
    graph_detach: bool = False
    propagate_bias: bool = True
    use_stored_stats: bool = False  # adapt with training-time norm statistics

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.protocol not in ("continuous", "independent"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


@dataclass
class AdaptationRecord:
    """Per-step metrics emitted by the engine (one JSONL line each)."""

    step: int
    n_seen: int
    batch_accuracy: float | None
    loss: dict[str, float] | float | None
    redundancy: RedundancyScore
    cumulative_accuracy: float | None
    segment: int
    tag: str
    skipped: bool = False
    skip_reason: str | None = None
    filter_counts: dict[str, int] | None = None

    def to_json(self) -> str:
        def clean(v: float | None) -> float | None:
            return v if v is None or math.isfinite(v) else None

        loss = self.loss
        if isinstance(loss, dict):
            loss = {k: clean(v) for k, v in loss.items()}
        else:
            loss = clean(loss)
        return json.dumps(
            {
                "step": self.step,
                "n_seen": self.n_seen,
                "batch_accuracy": clean(self.batch_accuracy),
                "loss": loss,
                "redundancy": self.redundancy.value,
                "cumulative_accuracy": clean(self.cumulative_accuracy),
                "segment": self.segment,
                "tag": self.tag,
                "skipped": self.skipped,
                "skip_reason": self.skip_reason,
                "filter_counts": self.filter_counts,
            }
        )


@dataclass
class EngineState:
    """Mutable per-run state: the working model copy, optimizer, counters."""

    model: SplitModel
    cfg: AdaptationConfig
    optimizer: torch.optim.Optimizer | None
    mask: MaskMatrix | None
    step: int = 0
    n_seen: int = 0
    n_correct: int = 0


def _make_optimizer(
    params: list[torch.nn.Parameter], cfg: AdaptationConfig
) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def init_state(source_model: SplitModel, cfg: AdaptationConfig) -> EngineState:
    """Fresh working copy of the source model, configured for ``cfg.method``."""
    model = clone_model(source_model)
    model.eval()
    if cfg.method == "bn_recal":
        baseline_bn_recal(model)
    elif cfg.method in _TRAINING_METHODS and not cfg.use_stored_stats:
        try:
            force_batch_stats(model)
        except NoNormLayersError:
            pass  # models without norm layers adapt with whatever they have
    optimizer = None
    if cfg.method in _TRAINING_METHODS:
        params = trainable_params(model, cfg.param_policy)
        optimizer = _make_optimizer(params, cfg)
    else:
        for p in model.parameters():
            p.requires_grad_(False)
    mask = identity_mask(model.embed_dim) if cfg.method == "gfret" else None
    return EngineState(model=model, cfg=cfg, optimizer=optimizer, mask=mask)


def baseline_entropy_min(p: torch.Tensor) -> torch.Tensor:
    """Mean Shannon entropy of softmaxed logits (differentiable)."""
    return filters.entropy(p).mean()


def baseline_bn_recal(model: torch.nn.Module) -> torch.nn.Module:
    """Switch stored-statistic norm layers to current-batch statistics."""
    force_batch_stats(model)
    return model


def _detached(centers: ClassCenters) -> ClassCenters:
    return ClassCenters(
        centers=centers.centers.detach(), valid=centers.valid, counts=centers.counts
    )


def _gfret_batch_loss(
    state: EngineState, z: torch.Tensor, predictions: torch.Tensor
) -> tuple[LossBreakdown | None, str | None, dict[str, int]]:
    """Run the graph/filter pipeline; None loss means the step is skipped."""
    cfg = state.cfg
    model = state.model
    graph_input = z.detach() if cfg.graph_detach else z
    pair = decompose(feature_graph(graph_input), state.mask)
    if cfg.propagate_bias:
        head_fn = model.head
    else:
        head_fn = lambda r: F.linear(r, model.head.weight)  # noqa: E731
    prop = propagate(z, pair, head_fn)

    scores = filters.entropy(predictions)
    center_pool = filters.topk_per_class(scores, predictions, cfg.k1)
    centers = class_centers(z, predictions, center_pool)
    y_hat = filters.soft_pseudo_labels(prop.r_a.detach(), _detached(centers))
    kept = filters.consistency_filter(scores, predictions, y_hat, cfg.k2)
    counts = {
        "batch": int(predictions.shape[0]),
        "center_pool": int(center_pool.numel()),
        "kept": int(kept.numel()),
        "dropped": int(predictions.shape[0] - kept.numel()),
    }
    if kept.numel() == 0:
        return None, "consistency filter kept no samples", counts
    assign = predictions[kept].argmax(dim=1)
    breakdown = gfret_loss(
        prop.r_a[kept],
        prop.r_r[kept],
        prop.p_a[kept],
        prop.p_r[kept],
        centers,
        assign,
        cfg.lam,
    )
    return breakdown, None, counts


def adapt_step(
    state: EngineState, batch: StreamBatch
) -> tuple[torch.Tensor, AdaptationRecord]:
    """Predict one batch and apply at most one optimizer step.

    Predictions come from the single forward pass that also feeds the loss,
    i.e. from parameters adapted on previous batches only. Labels are touched
    only after the update, for metrics.
    """
    cfg = state.cfg
    model = state.model
    training = cfg.method in _TRAINING_METHODS

    loss_value: dict[str, float] | float | None = None
    skipped = False
    skip_reason: str | None = None
    filter_counts: dict[str, int] | None = None

    if not training:
        with torch.no_grad():
            z = model.embed(batch.images)
            predictions = model.head(z)
    else:
        z = model.embed(batch.images)
        p = model.head(z)
        predictions = p.detach()
        loss: torch.Tensor | None = None
        try:
            if cfg.method == "entropy_min":
                loss = baseline_entropy_min(p)
                loss_value = float(loss.detach())
            elif cfg.method == "sfret":
                loss = sfret_loss(z)
                loss_value = float(loss.detach())
            else:  # gfret
                breakdown, skip_reason, filter_counts = _gfret_batch_loss(
                    state, z, predictions
                )
                if breakdown is None:
                    loss = None
                else:
                    loss = breakdown.total
                    loss_value = breakdown.to_dict()
        except NonFiniteLossError as exc:
            loss, skip_reason = None, str(exc)
        if loss is not None and not bool(torch.isfinite(loss)):
            loss_value = float(loss.detach())
            loss, skip_reason = None, "non-finite loss"
        if loss is None:
            skipped = True
        else:
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step()
        z = z.detach()

    state.step += 1
    state.n_seen += batch.images.shape[0]

    batch_accuracy = None
    cumulative = None
    if batch.labels is not None:
        correct = int((predictions.argmax(dim=1) == batch.labels).sum())
        state.n_correct += correct
        batch_accuracy = correct / batch.images.shape[0]
        cumulative = state.n_correct / state.n_seen

    record = AdaptationRecord(
        step=state.step - 1,
        n_seen=state.n_seen,
        batch_accuracy=batch_accuracy,
        loss=loss_value,
        redundancy=redundancy_score(z),
        cumulative_accuracy=cumulative,
        segment=batch.segment,
        tag=batch.tag,
        skipped=skipped,
        skip_reason=skip_reason,
        filter_counts=filter_counts,
    )
    return predictions, record


def run_stream(
    source_model: SplitModel,
    stream: Iterable[StreamBatch],
    cfg: AdaptationConfig,
) -> list[AdaptationRecord]:
    """Adapt through an ordered batch stream and return per-step records.

    ``continuous`` keeps one working model across all segments; ``independent``
    resets model and optimizer from the source model at each segment boundary.
    The source model itself is never mutated.
    """
    torch.manual_seed(cfg.seed)
    state = init_state(source_model, cfg)
    records: list[AdaptationRecord] = []
    previous_segment: int | None = None
    for batch in stream:
        if (
            cfg.protocol == "independent"
            and previous_segment is not None
            and batch.segment != previous_segment
        ):
            counters = (state.step, state.n_seen, state.n_correct)
            state = init_state(source_model, cfg)
            state.step, state.n_seen, state.n_correct = counters
        previous_segment = batch.segment
        _, record = adapt_step(state, batch)
        records.append(record)
    return records

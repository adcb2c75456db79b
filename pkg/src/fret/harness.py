"""Experiment harness: declarative configs, reproducible runs, reports.

One experiment = a dataset, a checkpoint, a list of adaptation methods, and a
list of seeds. Each (method, seed) pair runs the full stream and emits a JSONL
step log plus a redundancy-trace CSV; the harness aggregates per-segment
accuracy into ``summary.csv`` (per-seed rows and mean/std rows) and renders
trace plots. Seeds/methods can run in parallel worker processes, capped by the
``FRET_NUM_WORKERS`` environment variable; outputs are sorted before writing
so parallelism never changes the artifacts.
"""

from __future__ import annotations

import csv
import json
import multiprocessing
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import (  # noqa: E402
    ArrayDataset,
    CorruptionSpec,
    LongTailSpec,
    build_stream,
    corrupt,
    load_dataset,
)
from .desk import load_desk_model  # noqa: E402
from .engine import METHODS, AdaptationConfig, AdaptationRecord, run_stream  # noqa: E402
from .errors import ConfigError, EmptyRecordsError, RuntimeFailure  # noqa: E402
from .model_adapter import ParamPolicy, SplitModel, split  # noqa: E402
from .redundancy import NrsTrace, redundancy_score  # noqa: E402

__all__ = [
    "ExperimentConfig",
    "SummaryRow",
    "SweepRow",
    "load_config",
    "validate_config",
    "run_experiment",
    "plot_traces",
    "build_trace_figure",
    "trace_from_records",
    "redundancy_sweep",
]


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment definition (TOML file plus CLI overrides)."""

    dataset: Path
    checkpoint: Path
    out_dir: Path
    cut: str = "head"
    methods: tuple[str, ...] = ("source",)
    seeds: tuple[int, ...] = (0,)
    corruptions: tuple[CorruptionSpec | None, ...] = (None,)
    longtail: LongTailSpec | None = None
    corrupted_root: Path | None = None
    lr: float = 1e-4
    lam: float = 0.1
    k1: int = 100
    k2: float = 0.9
    param_policy: str = "norm_affine_only"
    batch_size: int = 128
    protocol: str = "continuous"
    optimizer: str = "sgd"
    momentum: float = 0.0


@dataclass(frozen=True)
class SummaryRow:
    """Final metrics for one (method, stream segment, seed)."""

    method: str
    protocol: str
    tag: str
    segment: int
    seed: int
    final_accuracy: float
    nrs_slope: float
    wall_clock_s: float


@dataclass(frozen=True)
class SweepRow:
    """Mean redundancy of the frozen model under one (kind, severity)."""

    kind: str
    severity: int
    mean_redundancy: float


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a TOML experiment file into an :class:`ExperimentConfig`."""
    path = Path(path)
    try:
        payload = tomllib.loads(path.read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc

    exp = payload.get("experiment", {})
    adapt = payload.get("adaptation", {})
    try:
        corruptions = tuple(
            CorruptionSpec(kind=c["kind"], severity=int(c["severity"]))
            for c in payload.get("corruption", [])
        ) or (None,)
        longtail = None
        if "longtail" in payload:
            longtail = LongTailSpec(
                imbalance_factor=float(payload["longtail"]["imbalance_factor"])
            )
        base = path.parent
        return ExperimentConfig(
            dataset=base / exp["dataset"],
            checkpoint=base / exp["checkpoint"],
            out_dir=base / exp.get("out_dir", "runs"),
            cut=exp.get("cut", "head"),
            methods=tuple(exp.get("methods", ["source"])),
            seeds=tuple(int(s) for s in exp.get("seeds", [0])),
            corruptions=corruptions,
            longtail=longtail,
            corrupted_root=base / exp["corrupted_root"] if "corrupted_root" in exp else None,
            lr=float(adapt.get("lr", 1e-4)),
            lam=float(adapt.get("lam", adapt.get("lambda", 0.1))),
            k1=int(adapt.get("k1", 100)),
            k2=float(adapt.get("k2", 0.9)),
            param_policy=adapt.get("param_policy", "norm_affine_only"),
            batch_size=int(adapt.get("batch_size", 128)),
            protocol=adapt.get("protocol", "continuous"),
            optimizer=adapt.get("optimizer", "sgd"),
            momentum=float(adapt.get("momentum", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def validate_config(cfg: ExperimentConfig) -> None:
    """Check everything that can be checked before running; raise ConfigError."""
    if not (Path(cfg.dataset) / "manifest.json").exists():
        raise ConfigError(f"dataset manifest not found under {cfg.dataset}")
    if not Path(cfg.checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    if not cfg.methods:
        raise ConfigError("at least one method is required")
    for m in cfg.methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
    try:
        _adaptation_config(cfg, cfg.methods[0], cfg.seeds[0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _adaptation_config(cfg: ExperimentConfig, method: str, seed: int) -> AdaptationConfig:
    return AdaptationConfig(
        method=method,
        lr=cfg.lr,
        lam=cfg.lam,
        k1=cfg.k1,
        k2=cfg.k2,
        param_policy=ParamPolicy(mode=cfg.param_policy),
        batch_size=cfg.batch_size,
        protocol=cfg.protocol,
        seed=seed,
        optimizer=cfg.optimizer,
        momentum=cfg.momentum,
    )


def _load_split_model(cfg: ExperimentConfig) -> SplitModel:
    return split(load_desk_model(cfg.checkpoint), cfg.cut)


def _run_single(
    cfg: ExperimentConfig, method: str, seed: int
) -> tuple[str, int, list[AdaptationRecord], float]:
    base = load_dataset(cfg.dataset)
    model = _load_split_model(cfg)
    stream = build_stream(
        base,
        list(cfg.corruptions),
        batch_size=cfg.batch_size,
        longtail=cfg.longtail,
        seed=seed,
        corrupted_root=cfg.corrupted_root,
    )
    start = time.perf_counter()
    records = run_stream(model, stream, _adaptation_config(cfg, method, seed))
    return method, seed, records, time.perf_counter() - start


def trace_from_records(
    records: list[AdaptationRecord], protocol: str = "continuous"
) -> NrsTrace:
    """Redundancy trace of one run, normalized at each adaptation start.

    Continuous runs normalize against the first step; independent runs restart
    the baseline at every segment boundary, where the model was reset.
    """
    trace = NrsTrace()
    baseline: float | None = None
    previous_segment: int | None = None
    for rec in records:
        if baseline is None or (
            protocol == "independent" and rec.segment != previous_segment
        ):
            baseline = rec.redundancy.value
        previous_segment = rec.segment
        trace.steps.append(rec.step)
        trace.raw.append(rec.redundancy.value)
        trace.normalized.append(
            rec.redundancy.value / baseline if baseline > 0 else 0.0
        )
    return trace


def _segment_rows(
    cfg: ExperimentConfig,
    method: str,
    seed: int,
    records: list[AdaptationRecord],
    wall_clock_s: float,
) -> list[SummaryRow]:
    trace = trace_from_records(records, cfg.protocol)
    by_segment: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        by_segment.setdefault(rec.segment, []).append(i)
    rows = []
    for segment, idxs in sorted(by_segment.items()):
        correct = 0.0
        seen = 0
        for i in idxs:
            n_batch = records[i].n_seen - (records[i - 1].n_seen if i else 0)
            if records[i].batch_accuracy is not None:
                correct += records[i].batch_accuracy * n_batch
                seen += n_batch
        first, last = idxs[0], idxs[-1]
        slope = (
            (trace.normalized[last] - trace.normalized[first]) / (last - first)
            if last > first
            else 0.0
        )
        rows.append(
            SummaryRow(
                method=method,
                protocol=cfg.protocol,
                tag=records[first].tag,
                segment=segment,
                seed=seed,
                final_accuracy=correct / seen if seen else float("nan"),
                nrs_slope=slope,
                wall_clock_s=wall_clock_s / len(by_segment),
            )
        )
    return rows


def _write_summary_csv(path: Path, rows: list[SummaryRow]) -> None:
    rows = sorted(rows, key=lambda r: (r.method, r.segment, r.seed))
    groups: dict[tuple[str, int], list[SummaryRow]] = {}
    for row in rows:
        groups.setdefault((row.method, row.segment), []).append(row)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "method",
                "protocol",
                "tag",
                "segment",
                "seed",
                "final_accuracy",
                "nrs_slope",
                "accuracy_mean",
                "accuracy_std",
                "wall_clock_s",
            ]
        )
        for (method, segment), group in sorted(groups.items()):
            for row in group:
                writer.writerow(
                    [
                        method,
                        row.protocol,
                        row.tag,
                        segment,
                        row.seed,
                        f"{row.final_accuracy:.6f}",
                        f"{row.nrs_slope:.6f}",
                        "",
                        "",
                        f"{row.wall_clock_s:.3f}",
                    ]
                )
            accs = np.array([r.final_accuracy for r in group])
            std = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
            writer.writerow(
                [
                    method,
                    group[0].protocol,
                    group[0].tag,
                    segment,
                    "all",
                    "",
                    "",
                    f"{float(accs.mean()):.6f}",
                    f"{std:.6f}",
                    f"{sum(r.wall_clock_s for r in group):.3f}",
                ]
            )


def run_experiment(cfg: ExperimentConfig) -> list[SummaryRow]:
    """Run every (method, seed) pair and write all artifacts under out_dir.

    Outputs: ``steps.<method>.<seed>.jsonl`` step logs, ``traces/nrs.*.csv``
    redundancy traces, ``summary.csv`` with per-seed rows plus mean/std rows,
    and ``plots/traces.png``. Identical configs rewrite identical artifacts
    except for wall-clock values.
    """
    validate_config(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "traces").mkdir(exist_ok=True)
    (out_dir / "plots").mkdir(exist_ok=True)

    jobs = [(method, seed) for method in cfg.methods for seed in cfg.seeds]
    workers = max(1, int(os.environ.get("FRET_NUM_WORKERS", "1")))
    results: list[tuple[str, int, list[AdaptationRecord], float]] = []
    try:
        if workers > 1 and len(jobs) > 1:
            # spawn: forking a process while torch holds OpenMP threads can deadlock
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                futures = [pool.submit(_run_single, cfg, m, s) for m, s in jobs]
                results = [f.result() for f in futures]
        else:
            results = [_run_single(cfg, m, s) for m, s in jobs]
    except Exception as exc:
        _flush_artifacts(cfg, out_dir, results)
        raise RuntimeFailure(f"experiment failed mid-run: {exc}") from exc

    return _flush_artifacts(cfg, out_dir, results)


def _flush_artifacts(
    cfg: ExperimentConfig,
    out_dir: Path,
    results: list[tuple[str, int, list[AdaptationRecord], float]],
) -> list[SummaryRow]:
    rows: list[SummaryRow] = []
    results = sorted(results, key=lambda r: (r[0], r[1]))
    for method, seed, records, wall in results:
        with open(out_dir / f"steps.{method}.{seed}.jsonl", "w") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
        trace_from_records(records, cfg.protocol).to_csv(
            out_dir / "traces" / f"nrs.{method}.{seed}.csv"
        )
        rows.extend(_segment_rows(cfg, method, seed, records, wall))
    _write_summary_csv(out_dir / "summary.csv", rows)
    if results:
        first_seed = min(seed for _, seed, _, _ in results)
        by_method = {
            method: records
            for method, seed, records, _ in results
            if seed == first_seed
        }
        plot_traces(by_method, out_dir / "plots", protocol=cfg.protocol)
    return rows


def build_trace_figure(
    records_by_method: dict[str, list[AdaptationRecord]], protocol: str = "continuous"
) -> plt.Figure:
    """Three panels over steps: normalized redundancy, loss, cumulative accuracy."""
    if not records_by_method or all(not v for v in records_by_method.values()):
        raise EmptyRecordsError("nothing to plot")
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for method, records in sorted(records_by_method.items()):
        if not records:
            continue
        steps = [r.step for r in records]
        trace = trace_from_records(records, protocol)
        axes[0].plot(steps, trace.normalized, label=method)
        losses = [
            (r.loss["total"] if isinstance(r.loss, dict) else r.loss) for r in records
        ]
        if any(l is not None for l in losses):
            axes[1].plot(steps, losses, label=method)
        accs = [r.cumulative_accuracy for r in records]
        if any(a is not None for a in accs):
            axes[2].plot(steps, accs, label=method)
    for ax, title in zip(axes, ["normalized redundancy", "loss", "cumulative accuracy"]):
        ax.set_xlabel("step")
        ax.set_title(title)
        if ax.get_lines():
            ax.legend()
    fig.tight_layout()
    return fig


def plot_traces(
    records_by_method: dict[str, list[AdaptationRecord]],
    out_dir: str | Path,
    protocol: str = "continuous",
) -> list[Path]:
    """Render the trace panels to ``traces.png`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig = build_trace_figure(records_by_method, protocol)
    target = out_dir / "traces.png"
    fig.savefig(target, dpi=110)
    plt.close(fig)
    return [target]


def redundancy_sweep(
    model: SplitModel,
    dataset: ArrayDataset,
    kinds: tuple[str, ...],
    severities: tuple[int, ...] = (1, 2, 3, 4, 5),
    batch_size: int = 128,
    seed: int = 0,
) -> list[SweepRow]:
    """Mean redundancy of the frozen model per (kind, severity), plus a clean
    severity-0 baseline row per kind."""
    model.eval()
    rows: list[SweepRow] = []
    for kind_index, kind in enumerate(kinds):
        for severity in (0, *severities):
            if severity == 0:
                images = dataset.images
            else:
                spec = CorruptionSpec(kind, severity)
                sub_seed = int(
                    np.random.SeedSequence(
                        entropy=(int(seed), kind_index, severity)
                    ).generate_state(1)[0]
                )
                images = corrupt(dataset.images, spec, seed=sub_seed)
            x = torch.from_numpy(images.transpose(0, 3, 1, 2)).contiguous()
            scores = []
            with torch.no_grad():
                for start in range(0, x.shape[0], batch_size):
                    z = model.embed(x[start : start + batch_size])
                    scores.append(redundancy_score(z).value)
            rows.append(
                SweepRow(
                    kind=kind, severity=severity, mean_redundancy=float(np.mean(scores))
                )
            )
    return rows


def write_sweep_outputs(rows: list[SweepRow], out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``sweep.csv`` and a severity-vs-redundancy line plot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "plots").mkdir(exist_ok=True)
    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "severity", "mean_redundancy"])
        for row in rows:
            writer.writerow([row.kind, row.severity, f"{row.mean_redundancy:.6f}"])
    fig, ax = plt.subplots(figsize=(6, 4))
    kinds = sorted({r.kind for r in rows})
    for kind in kinds:
        series = sorted((r.severity, r.mean_redundancy) for r in rows if r.kind == kind)
        ax.plot([s for s, _ in series], [v for _, v in series], marker="o", label=kind)
    ax.set_xlabel("severity")
    ax.set_ylabel("mean redundancy")
    ax.legend()
    fig.tight_layout()
    plot_path = out_dir / "plots" / "sweep.png"
    fig.savefig(plot_path, dpi=110)
    plt.close(fig)
    return csv_path, plot_path

"""Command-line interface.

Verbs:
  adapt     run an experiment from a TOML config (plus flag overrides)
  sweep     redundancy-vs-severity sweep of the frozen model
  plot      re-render trace plots from stored step logs
  validate  check a config without running anything
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .data import NATIVE_KINDS, load_dataset
from .engine import AdaptationRecord
from .errors import ConfigError, FretError, RuntimeFailure
from .harness import (
    load_config,
    plot_traces,
    redundancy_sweep,
    run_experiment,
    validate_config,
    write_sweep_outputs,
    _load_split_model,
)
from .redundancy import RedundancyScore


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", action="append", help="adaptation method (repeatable)")
    parser.add_argument("--seed", action="append", type=int, help="random seed (repeatable)")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--lambda", dest="lam", type=float, help="prediction-loss weight")
    parser.add_argument("--k1", type=int, help="per-class center pool size")
    parser.add_argument("--k2", type=float, help="low-entropy fraction kept")
    parser.add_argument("--protocol", choices=["continuous", "independent"])
    parser.add_argument("--out", type=Path, help="output directory")


def _apply_overrides(cfg, args):
    updates = {}
    if args.method:
        updates["methods"] = tuple(args.method)
    if args.seed:
        updates["seeds"] = tuple(args.seed)
    for name in ("lr", "lam", "k1", "k2", "protocol"):
        value = getattr(args, name)
        if value is not None:
            updates[name] = value
    if args.out is not None:
        updates["out_dir"] = args.out
    return replace(cfg, **updates) if updates else cfg


def _cmd_adapt(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    rows = run_experiment(cfg)
    print(f"wrote {len(rows)} summary rows under {cfg.out_dir}")
    return 0


def _cmd_validate(args) -> int:
    validate_config(load_config(args.config))
    print("config ok")
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    validate_config(cfg)
    model = _load_split_model(cfg)
    dataset = load_dataset(cfg.dataset)
    kinds = tuple(args.kind) if args.kind else NATIVE_KINDS
    rows = redundancy_sweep(model, dataset, kinds, batch_size=cfg.batch_size)
    csv_path, plot_path = write_sweep_outputs(rows, cfg.out_dir)
    print(f"wrote {csv_path} and {plot_path}")
    return 0


def _records_from_jsonl(path: Path) -> list[AdaptationRecord]:
    records = []
    for line in path.read_text().splitlines():
        d = json.loads(line)
        records.append(
            AdaptationRecord(
                step=d["step"],
                n_seen=d["n_seen"],
                batch_accuracy=d["batch_accuracy"],
                loss=d["loss"],
                redundancy=RedundancyScore(value=d["redundancy"], dim=0, batch_size=0),
                cumulative_accuracy=d["cumulative_accuracy"],
                segment=d["segment"],
                tag=d["tag"],
                skipped=d["skipped"],
                skip_reason=d["skip_reason"],
                filter_counts=d.get("filter_counts"),
            )
        )
    return records


def _cmd_plot(args) -> int:
    out_dir = Path(args.out)
    logs = sorted(out_dir.glob("steps.*.jsonl"))
    if not logs:
        print(f"no step logs under {out_dir}", file=sys.stderr)
        return 1
    by_method: dict[str, list[AdaptationRecord]] = {}
    for log in logs:
        method = log.stem.split(".")[1]
        if method not in by_method:  # sorted glob: first seed wins
            by_method[method] = _records_from_jsonl(log)
    paths = plot_traces(by_method, out_dir / "plots")
    print(f"wrote {paths[0]}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fret", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p_adapt = sub.add_parser("adapt", help="run an adaptation experiment")
    p_adapt.add_argument("--config", type=Path, required=True)
    _add_override_flags(p_adapt)
    p_adapt.set_defaults(fn=_cmd_adapt)

    p_sweep = sub.add_parser("sweep", help="redundancy vs corruption severity")
    p_sweep.add_argument("--config", type=Path, required=True)
    p_sweep.add_argument("--kind", action="append", help="corruption kind (repeatable)")
    p_sweep.add_argument("--out", type=Path)
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_plot = sub.add_parser("plot", help="re-render plots from step logs")
    p_plot.add_argument("--out", type=Path, required=True, help="experiment output dir")
    p_plot.set_defaults(fn=_cmd_plot)

    p_val = sub.add_parser("validate", help="validate a config file")
    p_val.add_argument("--config", type=Path, required=True)
    p_val.set_defaults(fn=_cmd_validate)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RuntimeFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    except FretError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

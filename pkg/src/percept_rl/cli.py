"""Command-line entry point: train, eval, sweep, export.

Every run directory is self-describing: the manifest plus the config
snapshot inside it suffice to reproduce the run exactly. The default
output root comes from the ``PERCEPT_RL_OUT`` environment variable when
``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, Sequence

from .config import (
    RunConfig,
    build_config,
    load_config,
    resolve_config_arg,
    validate_key,
)
from .errors import PerceptRlError, ValidationError
from .monitor import PERSISTED_FIELDS, StepMetrics, read_metrics, running_average
from .trainer import (
    evaluate_policy,
    load_policy_checkpoint,
    read_manifest,
    resume_run,
    run,
)

_FLOAT_FIELDS = tuple(
    f for f in PERSISTED_FIELDS if f not in ("step", "degenerate_groups")
)


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _default_out(kind: str, cfg: Optional[RunConfig] = None) -> str:
    root = os.environ.get("PERCEPT_RL_OUT")
    if not root:
        raise ValidationError(
            "--out is required unless the PERCEPT_RL_OUT environment variable is set"
        )
    if cfg is not None:
        name = f"{kind}-{cfg.objective.algorithm}-seed{cfg.trainer.seed}"
    else:
        name = kind
    return os.path.join(root, name)


def _load_run_config(args) -> RunConfig:
    path = resolve_config_arg(args.config) if args.config else None
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"trainer.seed={args.seed}")
    return load_config(path, tuple(overrides))


def cmd_train(args) -> int:
    if args.resume:
        result = resume_run(args.resume)
        print(f"resumed {result.out_dir} to step {result.history[-1].step}"
              if result.history else f"resumed {result.out_dir}")
        return 0
    cfg = _load_run_config(args)
    out_dir = args.out or _default_out("run", cfg)
    if os.path.exists(os.path.join(out_dir, "manifest.json")):
        raise ValidationError(
            f"{out_dir} already holds a run; choose a fresh directory"
        )
    result = run(cfg, out_dir)
    last = result.history[-1] if result.history else None
    print(f"run complete: {out_dir}")
    print(f"  steps: {len(result.history)}")
    if last is not None:
        print(f"  final mean_reward: {last.mean_reward:.4f}")
        print(f"  final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    params = load_policy_checkpoint(args.checkpoint)
    cfg = _load_run_config(args)
    summary = evaluate_policy(
        params,
        cfg.env,
        episodes=args.episodes,
        k=args.k,
        seed=args.seed if args.seed is not None else cfg.trainer.seed,
        temperature=cfg.trainer.temperature,
        greedy=args.greedy,
        mask_cfg=cfg.mask,
    )
    print(f"accuracy ({summary.dependency}): {summary.accuracy:.4f}")
    for dep, acc in summary.per_dependency.items():
        print(f"  {dep}: {acc:.4f}")
    print(f"mean perception ratio: {summary.mean_perception_ratio:.4f}")
    out_path = args.out or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), "eval.json"
    )
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"summary written to {out_path}")
    return 0


def _sweep_point(payload: tuple[dict, str]) -> str:
    config_dict, out_dir = payload
    cfg = build_config(config_dict)
    run(cfg, out_dir)
    return out_dir


def cmd_sweep(args) -> int:
    section, key, target = validate_key(args.axis)
    values = [v for v in (args.values or "").split(",") if v != ""]
    base_overrides = list(args.set or [])
    if args.seed is not None:
        base_overrides.append(f"trainer.seed={args.seed}")
    out_root = args.out or _default_out(f"sweep-{args.axis}")
    jobs: list[tuple[dict, str]] = []
    from .config import resolved_dict

    for value in values:
        path = resolve_config_arg(args.config) if args.config else None
        cfg = load_config(
            path, tuple(base_overrides + [f"{args.axis}={value}"])
        )
        point_dir = os.path.join(out_root, f"{key}_{value}")
        jobs.append((resolved_dict(cfg), point_dir))
    if not jobs:
        print("no sweep values given; nothing to run")
        return 0
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for done in pool.map(_sweep_point, jobs):
                print(f"sweep point complete: {done}")
    else:
        for job in jobs:
            print(f"sweep point complete: {_sweep_point(job)}")
    print(f"{len(jobs)} runs under {out_root}")
    return 0


def write_metrics_csv(run_dir: str, out_path: str) -> str:
    """Export a run's step records as an RFC-4180 CSV table."""
    read_manifest(run_dir)  # ensures the directory is a run
    _, steps = read_metrics(os.path.join(run_dir, "metrics.jsonl"))
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PERSISTED_FIELDS)
        for m in steps:
            writer.writerow([_fmt(getattr(m, f)) for f in PERSISTED_FIELDS])
    return out_path


def read_metrics_csv(path: str) -> list[StepMetrics]:
    """Load step records back from an exported CSV."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            kwargs = {}
            for f in PERSISTED_FIELDS:
                kwargs[f] = (
                    int(row[f]) if f in ("step", "degenerate_groups") else float(row[f])
                )
            out.append(StepMetrics(wall_ms=0, **kwargs))
    return out


def write_curves_csv(run_dir: str, out_path: str, window: int = 20) -> str:
    """Export window-smoothed metric series (trailing running averages)."""
    read_manifest(run_dir)
    _, steps = read_metrics(os.path.join(run_dir, "metrics.jsonl"))
    smoothed = {
        f: running_average([getattr(m, f) for m in steps], window)
        for f in _FLOAT_FIELDS
    }
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step",) + _FLOAT_FIELDS)
        for i, m in enumerate(steps):
            writer.writerow(
                [str(m.step)] + [_fmt(float(smoothed[f][i])) for f in _FLOAT_FIELDS]
            )
    return out_path


def cmd_export(args) -> int:
    out_dir = args.out or os.path.join(args.run, "export")
    os.makedirs(out_dir, exist_ok=True)
    if args.what == "metrics-csv":
        path = write_metrics_csv(args.run, os.path.join(out_dir, "metrics.csv"))
    else:
        path = write_curves_csv(
            args.run, os.path.join(out_dir, "curves.csv"), window=args.window
        )
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="percept-rl",
        description="Train, evaluate, sweep, and export perception-aware policy runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run training into a fresh directory")
    train.add_argument("--config", help="config file path or preset name")
    train.add_argument("--out", help="run directory (default: $PERCEPT_RL_OUT/...)")
    train.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
    train.add_argument("--seed", type=int, help="shorthand for trainer.seed")
    train.add_argument("--resume", metavar="RUN_DIR",
                       help="continue an interrupted run from its last checkpoint")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on fresh tasks")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", help="config file path or preset name")
    ev.add_argument("--set", action="append", metavar="KEY=VALUE")
    ev.add_argument("--episodes", type=int, default=200)
    ev.add_argument("--k", type=int, default=8, help="samples per prompt")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--greedy", action="store_true", help="argmax decoding")
    ev.add_argument("--out", help="where to write the summary json")
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", help="one run per value along a config axis")
    sw.add_argument("--config", help="base config file path or preset name")
    sw.add_argument("--axis", required=True, metavar="SECTION.KEY")
    sw.add_argument("--values", required=True,
                    help="comma-separated values (empty string: no runs)")
    sw.add_argument("--set", action="append", metavar="KEY=VALUE")
    sw.add_argument("--seed", type=int, help="shared base seed for all points")
    sw.add_argument("--out", help="sweep root directory")
    sw.add_argument("--parallel", type=int, default=1,
                    help="run up to N points as parallel processes")
    sw.set_defaults(func=cmd_sweep)

    ex = sub.add_parser("export", help="export run metrics as CSV tables")
    ex.add_argument("--run", required=True, help="run directory")
    ex.add_argument("--what", choices=("metrics-csv", "curves"), default="metrics-csv")
    ex.add_argument("--window", type=int, default=20, help="smoothing window for curves")
    ex.add_argument("--out", help="output directory (default: RUN/export)")
    ex.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PerceptRlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: run, replay, sweep, validate, demo.

Artifacts per run: ``trajectory.csv`` (one row per step, 17-significant-digit
floats), ``summary.json`` (metrics + gain diagnostics), a resolved config
snapshot, and the serialized observer networks after each training swap.

Exit codes: 0 success, 2 validation/usage error, 3 runtime fault,
4 replay mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .errors import ConfigError, SafeAocError

log = logging.getLogger("safeaoc")

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("SAFEAOC_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def write_trajectory_csv(log_: harness.TrajectoryLog, path: Path):
    header = ",".join(log_.columns)
    np.savetxt(path, log_.data, fmt="%.17g", delimiter=",", header=header, comments="")


def _write_run_artifacts(log_: harness.TrajectoryLog, cfg: harness.ExperimentConfig, outdir: Path):
    outdir.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(log_, outdir / "trajectory.csv")
    (outdir / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    summary = harness.metrics(log_)
    try:
        estimates = harness.estimate_bound_constants(log_, cfg)
        summary["gain_diagnostics"] = harness.gain_diagnostics(cfg, estimates)
        summary["gain_estimates"] = estimates
    except SafeAocError as exc:
        summary["gain_diagnostics"] = {"error": str(exc)}
    summary["warnings"] = log_.meta.get("warnings", [])
    (outdir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=float))
    weights_dir = outdir / "dnn_weights"
    weights_dir.mkdir(exist_ok=True)
    for t, doc in log_.dnn_snapshots:
        (weights_dir / f"t{t:012.6f}.json").write_text(doc)
    return summary


def _load_config(path: str) -> harness.ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return harness.ExperimentConfig.from_dict(doc)


def _apply_cli_overrides(cfg: harness.ExperimentConfig, args) -> harness.ExperimentConfig:
    if getattr(args, "mode", None):
        cfg = cfg.with_override("mode", args.mode)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_override("seed", str(args.seed))
    if getattr(args, "duration", None) is not None:
        cfg = cfg.with_override("duration", str(args.duration))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg = cfg.with_override(key.strip(), value.strip())
    return cfg


def cmd_run(args) -> int:
    try:
        cfg = _load_config(args.config)
        cfg = _apply_cli_overrides(cfg, args)
        errors, warnings = harness.validate_config(cfg)
        if errors:
            print("config invalid:", "; ".join(errors), file=sys.stderr)
            return 2
        for w in warnings:
            log.warning("config warning: %s", w)
    except ConfigError as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return 2
    log_ = harness.run_experiment(cfg)
    summary = _write_run_artifacts(log_, cfg, Path(args.out))
    print(json.dumps({k: summary[k] for k in ("min_h_x", "final_state_norm", "final_est_err", "fault")}, default=float))
    if log_.fault:
        print(f"runtime fault: {log_.fault}", file=sys.stderr)
        return 3
    return 0


def cmd_replay(args) -> int:
    outdir = Path(args.logdir)
    cfg_path = outdir / "config.resolved.json"
    csv_path = outdir / "trajectory.csv"
    if not cfg_path.exists() or not csv_path.exists():
        print("missing config.resolved.json or trajectory.csv", file=sys.stderr)
        return 2
    cfg = harness.ExperimentConfig.from_dict(json.loads(cfg_path.read_text()))
    log_ = harness.run_experiment(cfg)
    tmp = outdir / "trajectory.replay.csv"
    write_trajectory_csv(log_, tmp)
    original = csv_path.read_bytes()
    fresh = tmp.read_bytes()
    tmp.unlink()
    if original == fresh:
        print("replay identical")
        return 0
    old_lines = original.splitlines()
    new_lines = fresh.splitlines()
    row = next(
        (i for i, (a, b) in enumerate(zip(old_lines, new_lines)) if a != b),
        min(len(old_lines), len(new_lines)),
    )
    print(f"replay mismatch at row {row}", file=sys.stderr)
    return 4


def cmd_sweep(args) -> int:
    values = [v for v in (args.values or "").split(",") if v != ""]
    if not values:
        print("sweep needs a nonempty comma-separated value list", file=sys.stderr)
        return 2
    try:
        base = _load_config(args.config)
        base = _apply_cli_overrides(base, args)
    except ConfigError as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return 2
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    any_failed = False
    for value in values:
        tag = value.replace("/", "_")
        subdir = outdir / f"{args.key.replace('.', '_')}_{tag}"
        try:
            cfg = base.with_override(args.key, value)
            errors, _ = harness.validate_config(cfg)
            if errors:
                raise ConfigError("; ".join(errors))
        except ConfigError as exc:
            print(f"value {value!r} invalid: {exc}", file=sys.stderr)
            return 2
        log_ = harness.run_experiment(cfg)
        summary = _write_run_artifacts(log_, cfg, subdir)
        rows.append(
            (
                value,
                summary["min_h_x"],
                summary["min_h_xhat"],
                summary["final_state_norm"],
                summary["final_est_err"],
                summary["fault"] or "",
            )
        )
        if log_.fault:
            any_failed = True
    lines = ["value,min_h_x,min_h_xhat,final_state_norm,final_est_err,fault"]
    for row in rows:
        lines.append(",".join("%.17g" % v if isinstance(v, float) else str(v) for v in row))
    (outdir / "comparison.csv").write_text("\n".join(lines) + "\n")
    print((outdir / "comparison.csv").read_text())
    return 3 if any_failed else 0


def cmd_validate(args) -> int:
    try:
        cfg = _load_config(args.config)
        cfg = _apply_cli_overrides(cfg, args)
    except ConfigError as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return 2
    errors, warnings = harness.validate_config(cfg)
    print(json.dumps({"errors": errors, "warnings": warnings, "resolved": cfg.to_dict()}, indent=1, sort_keys=True))
    return 2 if errors else 0


def cmd_demo(args) -> int:
    cfg = harness.benchmark_config("convex_set")
    cfg.duration = 2.0
    cfg.safety_drift = "true"
    log_ = harness.run_experiment(cfg)
    summary = _write_run_artifacts(log_, cfg, Path(args.out))
    print(
        "demo run complete: min h(x) = %.6f, final estimation error = %.6f"
        % (summary["min_h_x"], summary["final_est_err"])
    )
    return 3 if log_.fault else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safeaoc",
        description="Safe output-feedback adaptive optimal control simulator",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_common(p, with_config=True):
        if with_config:
            p.add_argument("--config", required=True, help="JSON experiment configuration")
        p.add_argument("--out", default="safeaoc-out", help="output directory")
        p.add_argument("--mode", choices=harness.MODES, help="safety-filter mode override")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--duration", type=float, help="duration override [s]")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="dotted-path config override (repeatable)",
        )

    run_p = sub.add_parser("run", help="run one experiment")
    add_common(run_p)
    run_p.set_defaults(func=cmd_run)

    replay_p = sub.add_parser("replay", help="re-run a logged experiment and verify bit-identical output")
    replay_p.add_argument("logdir", help="directory holding trajectory.csv and config.resolved.json")
    replay_p.set_defaults(func=cmd_replay)

    sweep_p = sub.add_parser("sweep", help="run one experiment per value of a config key")
    add_common(sweep_p)
    sweep_p.add_argument("--key", required=True, help="dotted config key to sweep")
    sweep_p.add_argument("--values", required=True, help="comma-separated values")
    sweep_p.set_defaults(func=cmd_sweep)

    val_p = sub.add_parser("validate-config", help="parse and validate a configuration")
    add_common(val_p)
    val_p.set_defaults(func=cmd_validate)

    demo_p = sub.add_parser("demo", help="short built-in demonstration run")
    demo_p.add_argument("--out", default="safeaoc-demo", help="output directory")
    demo_p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SafeAocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())

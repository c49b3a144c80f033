"""Command-line front end.

Four subcommands drive the library: `run-static` optimizes one design,
`run-sequential` runs a greedy experiment campaign, `diagnose` tabulates
gradient-estimator quality, and `eval-spce` scores an externally
produced design sequence.  Every command takes a JSON config plus
overrides for seed, thread count, and output directory, and writes
version-tagged CSVs.  Exit codes: 0 success, 2 invalid configuration or
arguments, 3 numeric failure (the message names the failing iteration).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from threadpoolctl import threadpool_limits

from .config import RunConfig, config_schema, load_config
from .driver import (
    NumericFailureError,
    SequentialRun,
    run_nested_loop,
    run_sequential,
    run_single_loop,
)
from .evaluation import (
    MetricRecord,
    gradient_diagnostics,
    information_bounds,
    prior_snis_w2,
    read_design_sequence,
    write_csv,
    write_design_sequence,
    write_diagnostic_cells,
    write_metric_records,
)
from .models import ContractViolationError, History
from .rng import EVAL_CONTRAST, EVAL_ROLLOUT, NoiseStreams, SEQ_OUTCOME

TRACE_SCHEMA = "codiff.trace.v1"
STATE_SCHEMA = "codiff.final_state.v1"


def _write_trace(path, trace, design_dim: int) -> None:
    header = (
        ["iter"]
        + [f"xi_{j + 1}" for j in range(design_dim)]
        + ["grad_norm", "ess_min", "cloud_stamp", "wall_ms", "flags"]
    )
    rows = [
        [r.iteration]
        + [float(v) for v in r.xi]
        + [r.grad_norm, r.ess_min, r.cloud_stamp, r.wall_ms, ";".join(r.flags)]
        for r in trace
    ]
    write_csv(path, TRACE_SCHEMA, header, rows)


def _write_state(path, payload: dict) -> None:
    payload = {"schema": STATE_SCHEMA, **payload}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _theta_star(cfg: RunConfig, model, streams) -> np.ndarray:
    if cfg.sequential.theta_star is not None:
        th = np.asarray(cfg.sequential.theta_star, dtype=float)
        if th.shape != (model.theta_dim,):
            raise ContractViolationError(
                f"theta_star must have {model.theta_dim} components"
            )
        return th
    return model.sample_prior(1, streams.generator(SEQ_OUTCOME, 0))[0]


def cmd_run_static(cfg: RunConfig, seed: int, threads, out: Path) -> int:
    model = cfg.build_model()
    streams = NoiseStreams(seed)
    runner = run_single_loop if cfg.loop.driver == "single" else run_nested_loop
    opt = cfg.optimizer.build(model.default_design_bounds)
    loop = cfg.loop.build(cfg.sampler.build())
    design, _, _, trace = runner(model, History(), loop, opt, streams)
    _write_trace(out / "trace.csv", trace, model.design_dim)
    _write_state(
        out / "final_state.json",
        {
            "command": "run-static",
            "seed": seed,
            "threads": threads,
            "design": [float(v) for v in design.xi],
            "iterations": len(trace),
            "design_updates": opt.t,
            "flagged_iterations": [r.iteration for r in trace if r.flags],
            "skipped_iterations": [r.iteration for r in trace if not np.isfinite(r.grad_norm)],
        },
    )
    return 0


def cmd_run_sequential(cfg: RunConfig, seed: int, threads, out: Path) -> int:
    model = cfg.build_model()
    streams = NoiseStreams(seed)
    theta_star = _theta_star(cfg, model, streams)
    history = History()
    if cfg.sequential.resume_from:
        designs, outcomes = read_design_sequence(cfg.sequential.resume_from)
        history = History(zip(designs, outcomes))
    run = SequentialRun(cfg.sequential.n_experiments, theta_star, history=history)
    loop = cfg.loop.build(cfg.sampler.build())
    spce_cfg = cfg.evaluation.build()
    kwargs = dict(spce_cfg=spce_cfg, w2_samples=cfg.evaluation.w2_samples)
    done = run_sequential(
        model, run, loop, cfg.optimizer.build(model.default_design_bounds), streams, **kwargs
    )
    write_metric_records(out / "metrics.csv", done.records)
    write_design_sequence(
        out / "designs.csv", [xi for xi, _ in done.history], [y for _, y in done.history]
    )
    if cfg.sequential.baseline:
        base = run_sequential(
            model,
            SequentialRun(cfg.sequential.n_experiments, theta_star, history=history),
            loop,
            cfg.optimizer.build(model.default_design_bounds),
            NoiseStreams(seed),
            design_policy="random",
            **kwargs,
        )
        write_metric_records(out / "metrics_baseline.csv", base.records)
        write_design_sequence(
            out / "designs_baseline.csv",
            [xi for xi, _ in base.history],
            [y for _, y in base.history],
        )
    _write_state(
        out / "final_state.json",
        {
            "command": "run-sequential",
            "seed": seed,
            "threads": threads,
            "theta_star": [float(v) for v in theta_star],
            "experiments": len(done.history),
            "resumed_from": cfg.sequential.resume_from,
            "baseline": cfg.sequential.baseline,
        },
    )
    return 0


def cmd_diagnose(cfg: RunConfig, seed: int, threads, out: Path) -> int:
    model = cfg.build_model()
    sec = cfg.diagnostics
    cells = []
    for estimator in sec.estimators:
        cells.extend(
            gradient_diagnostics(
                estimator, model, sec.xi_grid, sec.budgets, sec.reps, seed=seed
            )
        )
    write_diagnostic_cells(out / "diagnostics.csv", cells)
    _write_state(
        out / "final_state.json",
        {
            "command": "diagnose",
            "seed": seed,
            "threads": threads,
            "cells": len(cells),
        },
    )
    return 0


def cmd_eval_spce(cfg: RunConfig, seed: int, threads, out: Path, sequence: str) -> int:
    if cfg.sequential.theta_star is None:
        raise ContractViolationError(
            "eval-spce scores a sequence against a known truth; set sequential.theta_star"
        )
    model = cfg.build_model()
    streams = NoiseStreams(seed)
    theta_star = _theta_star(cfg, model, streams)
    designs, outcomes = read_design_sequence(sequence)
    spce_cfg = cfg.evaluation.build()
    records = []
    for k in range(1, len(designs) + 1):
        start = time.perf_counter()
        lo, hi = information_bounds(
            model,
            designs[:k],
            outcomes[:k],
            theta_star,
            spce_cfg,
            streams.generator(EVAL_CONTRAST, k),
        )
        w2 = prior_snis_w2(
            model,
            designs[:k],
            outcomes[:k],
            theta_star,
            cfg.evaluation.w2_samples,
            streams.generator(EVAL_ROLLOUT, k),
        )
        records.append(MetricRecord(k, lo, hi, w2, time.perf_counter() - start))
    write_metric_records(out / "metrics.csv", records)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codiff",
        description="Contrastive experiment-design optimization and evaluation.",
    )
    parser.add_argument(
        "--print-config-schema",
        action="store_true",
        help="print the JSON schema for config files and exit",
    )
    sub = parser.add_subparsers(dest="command")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to a JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument(
        "--threads", type=int, default=None, help="cap BLAS threads (default: hardware)"
    )
    common.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    sub.add_parser("run-static", parents=[common], help="optimize one design")
    sub.add_parser("run-sequential", parents=[common], help="run a greedy experiment campaign")
    sub.add_parser("diagnose", parents=[common], help="tabulate gradient-estimator quality")
    ev = sub.add_parser("eval-spce", parents=[common], help="score an external design sequence")
    ev.add_argument("--sequence", required=True, help="designs CSV (k, xi_*, y_*)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config_schema:
        json.dump(config_schema(), sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
    except ValidationError as exc:
        print(f"invalid config {args.config}:\n{exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read config {args.config}: {exc}", file=sys.stderr)
        return 2
    seed = cfg.seed if args.seed is None else args.seed
    env_seed = os.environ.get("CODIFF_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            print(f"CODIFF_SEED must be an integer, got {env_seed!r}", file=sys.stderr)
            return 2
    threads = args.threads if args.threads is not None else cfg.threads
    out = Path(args.out if args.out is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    limiter = threadpool_limits(limits=threads) if threads else nullcontext()
    try:
        with limiter:
            if args.command == "run-static":
                return cmd_run_static(cfg, seed, threads, out)
            if args.command == "run-sequential":
                return cmd_run_sequential(cfg, seed, threads, out)
            if args.command == "diagnose":
                return cmd_diagnose(cfg, seed, threads, out)
            return cmd_eval_spce(cfg, seed, threads, out, args.sequence)
    except NumericFailureError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except ContractViolationError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

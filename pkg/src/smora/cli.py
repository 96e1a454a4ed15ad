"""Command-line interface.

Exit codes: 0 success, 2 configuration or argument error, 3 numeric failure
(divergence, failed equivalence check), 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, checkpoint
from .config import ConfigError, load_config, suite_from_config, train_config_from
from .equivalence import run_equivalence_suite
from .kernels import BenchConfig, bench_kernels
from .routing import max_vio
from .training import (
    RunMetrics,
    TrainingDiverged,
    granularity_sweep,
    rank_ablation,
    train_adapter,
    write_ablation_csv,
    write_sweep_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2))
        fh.write("\n")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    suite = suite_from_config(cfg)
    tc = train_config_from(cfg)
    model, metrics = train_adapter(suite, tc)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.smck")
    checkpoint.save_model(ckpt_path, model, tc, seed=cfg["seed"])
    _write_json(os.path.join(out_dir, "metrics.json"), metrics.to_json())
    mv = "n/a" if metrics.final_max_vio is None else f"{metrics.final_max_vio:.4f}"
    print(f"avg_mse={metrics.avg_mse!r} final_max_vio={mv} checkpoint={ckpt_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        config = BenchConfig(
            t=args.t,
            d=args.d,
            r=args.r,
            k=args.k,
            dtype=args.dtype,
            threads=args.threads,
            repeats=args.repeats,
            seed=args.seed,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    reports = bench_kernels(config)
    print(json.dumps([r.to_json() for r in reports], indent=2))
    return EXIT_OK


def cmd_check_equivalence(args) -> int:
    if args.trials < 1 or args.max_experts < 1 or args.max_rank < 1 or args.max_dim < 2:
        print("error: trials/max-experts/max-rank must be >= 1, max-dim >= 2", file=sys.stderr)
        return EXIT_CONFIG
    report = run_equivalence_suite(
        trials=args.trials,
        max_experts=args.max_experts,
        max_rank=args.max_rank,
        max_dim=args.max_dim,
        seed=args.seed,
    )
    verdict = "PASS" if report.passed else "FAIL"
    print(
        f"trials={report.trials} max_diff={report.max_diff:.3e} "
        f"tolerance={report.tolerance:.1e} {verdict}"
    )
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    suite = suite_from_config(cfg)
    base = train_config_from(cfg)
    sweep = cfg["sweep"]
    rows = granularity_sweep(
        sweep["r_total"], sweep["r_active"], suite, base, seeds=tuple(sweep["seeds"])
    )
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "sweep.csv")
    write_sweep_csv(path, rows)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_rank_ablation(args) -> int:
    cfg = load_config(args.config)
    suite = suite_from_config(cfg)
    base = train_config_from(cfg)
    section = cfg["rank_ablation"]
    rows = rank_ablation(
        suite, section["r_total"], section["k_values"], base, seeds=tuple(section["seeds"])
    )
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "rank_ablation.csv")
    write_ablation_csv(path, rows)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def _similarity_factors(unit):
    from .training import LoraUnit, MoeUnit, SmoraUnit

    if isinstance(unit, (LoraUnit,)):
        return unit.lora.a, unit.lora.b
    if isinstance(unit, SmoraUnit):
        return unit.layer.lora.a, unit.layer.lora.b
    if isinstance(unit, MoeUnit):
        n, re_, d_in = unit.a_stack.shape
        a = unit.a_stack.reshape(n * re_, d_in)
        b = np.concatenate([unit.b_stack[i] for i in range(n)], axis=1)
        return a, b
    raise TypeError(f"no similarity factors for {type(unit).__name__}")


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    ckpt_path = cfg["analyze"]["checkpoint"]
    if not ckpt_path or not os.path.exists(ckpt_path):
        print(f"error: checkpoint not found: {ckpt_path!r}", file=sys.stderr)
        return EXIT_IO
    model, _ = checkpoint.load_model(ckpt_path)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    a, b = _similarity_factors(model.units[0])
    sim = analysis.rank_similarity(a, b, cosine=cfg["analyze"]["cosine"])
    analysis.write_similarity_csv(os.path.join(out_dir, "similarity.csv"), sim)
    _write_json(
        os.path.join(out_dir, "diagonal_dominance.json"),
        {"diagonal_dominance": analysis.diagonal_dominance(sim)},
    )

    routed = [u for u in model.routed_units() if getattr(u, "mode", None) != "soft"]
    if routed:
        suite = suite_from_config(cfg)
        xs, _, task_ids = suite.eval_arrays()
        unit = routed[0]
        _, cache = unit.forward_batch(xs)
        idx = cache["idx"] if "idx" in cache else cache["sel"]
        tasks, hist, cos = analysis.routing_distribution(list(idx), list(task_ids), _routing_width(unit))
        analysis.write_routing_histogram_csv(
            os.path.join(out_dir, "routing_histogram.csv"), tasks, hist
        )
        _write_json(
            os.path.join(out_dir, "task_similarity.json"),
            {"tasks": list(map(int, tasks)), "cosine": cos.tolist()},
        )

    metrics_path = cfg["analyze"]["metrics"]
    if metrics_path:
        if not os.path.exists(metrics_path):
            print(f"error: metrics not found: {metrics_path!r}", file=sys.stderr)
            return EXIT_IO
        with open(metrics_path, "r", encoding="utf-8") as fh:
            metrics = RunMetrics(**json.load(fh))
        series, final_loads = analysis.load_trace(metrics)
        analysis.write_load_trace_csv(os.path.join(out_dir, "load_trace.csv"), series)
        _write_json(
            os.path.join(out_dir, "final_loads.json"), {"normalized_loads": final_loads.tolist()}
        )
    print(f"analysis artifacts written to {out_dir}")
    return EXIT_OK


def _routing_width(unit) -> int:
    from .training import MoeUnit, SmoraUnit

    if isinstance(unit, SmoraUnit):
        return unit.layer.rank
    if isinstance(unit, MoeUnit):
        return unit.n
    raise TypeError(type(unit).__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smora", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an adapter from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bench", help="race the indexed kernel against its baselines")
    p.add_argument("--t", type=int, default=4096)
    p.add_argument("--d", type=int, default=1024)
    p.add_argument("--r", type=int, default=64)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--dtype", default="f32", choices=["f32", "f64"])
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("check-equivalence", help="verify the blockwise-mixture identity")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--max-experts", type=int, default=8)
    p.add_argument("--max-rank", type=int, default=8)
    p.add_argument("--max-dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_check_equivalence)

    p = sub.add_parser("sweep", help="granularity sweep at fixed rank budgets")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("rank-ablation", help="sparse layer vs plain LoRA across active ranks")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_rank_ablation)

    p = sub.add_parser("analyze", help="similarity / routing / load exports from a checkpoint")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main())

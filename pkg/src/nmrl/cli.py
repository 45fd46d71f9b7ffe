"""Command line: ``nmrl {train,sweep,bench,eval}``.

Exit codes: 0 ok, 2 configuration or input error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .agent import TrainingAborted
from .checkpoint import CheckpointError, load_networks
from .config import (
    ConfigError,
    RunConfig,
    SweepPlan,
    default_workers,
    load_run_config,
    load_sweep_plan,
)
from .envs import dump_trajectory, make_env
from .sparsity import NmPattern
from .training import evaluate, mean_sad, run_training

log = logging.getLogger("nmrl")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
SWEEP_FIELDS = ["K", "pattern", "seed", "final_return", "mean_actor_SAD", "mean_critic_SAD"]
AGGREGATE_FIELDS = ["K", "pattern", "cells", "mean_return", "std_return", "actor_SAD", "critic_SAD"]


def cmd_train(args) -> int:
    try:
        run = load_run_config(args.config)
    except (ConfigError, OSError) as err:
        print(f"{args.config}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_training(run, args.output_dir)
    except TrainingAborted as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return EXIT_ABORT
    summary = result.summary
    print(json.dumps({
        "output_dir": str(result.output_dir),
        "final_mean_return": summary["final_mean_return"],
        "pass_counters": summary["pass_counters"],
    }, indent=2))
    return EXIT_OK


def run_cell(run: RunConfig, post_transient: float) -> dict:
    """One sweep cell; returns its table row or an error record."""
    row = {"K": run.td3.mask_period, "pattern": str(run.td3.pattern), "seed": run.td3.seed}
    try:
        result = run_training(run)
    except Exception as err:  # a failed cell must not sink the sweep
        return {**row, "error": f"{type(err).__name__}: {err}"}
    after = post_transient * run.budget
    critic = [mean_sad(result.agent, name, after) for name in ("critic1", "critic2")]
    return {
        **row,
        "final_return": result.summary["final_mean_return"],
        "mean_actor_SAD": mean_sad(result.agent, "actor", after),
        "mean_critic_SAD": float(np.mean(critic)),
    }


def run_sweep(plan: SweepPlan, workers: int | None = None) -> list[dict]:
    cells = plan.cells()
    workers = workers or plan.workers or default_workers()
    if workers <= 1:
        rows = [run_cell(cell, plan.post_transient) for cell in cells]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cells, [plan.post_transient] * len(cells)))
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if "error" not in row:
            groups.setdefault((row["K"], row["pattern"]), []).append(row)
    out = []
    for (k, pattern), members in groups.items():
        returns = [r["final_return"] for r in members]
        out.append({
            "K": k,
            "pattern": pattern,
            "cells": len(members),
            "mean_return": float(np.mean(returns)),
            "std_return": float(np.std(returns)),
            "actor_SAD": float(np.nanmean([r["mean_actor_SAD"] for r in members])),
            "critic_SAD": float(np.nanmean([r["mean_critic_SAD"] for r in members])),
        })
    return out


def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def cmd_sweep(args) -> int:
    try:
        plan = load_sweep_plan(args.plan)
    except (ConfigError, OSError) as err:
        print(f"{args.plan}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    rows = run_sweep(plan, args.workers)
    root = Path(plan.base.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    write_csv(root / "sweep.csv", SWEEP_FIELDS, rows)
    write_csv(root / "sweep_by_k.csv", AGGREGATE_FIELDS, aggregate(rows))
    failures = [row for row in rows if "error" in row]
    with open(root / "failures.jsonl", "w") as fh:
        for row in failures:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"{len(rows)} cells, {len(failures)} failed; table in {root / 'sweep.csv'}")
    return EXIT_OK


def parse_shapes(text: str) -> list[tuple[int, int, int]]:
    shapes = []
    for item in text.split(","):
        parts = [int(p) for p in item.lower().split("x")]
        if len(parts) == 2:
            parts.append(1)
        if len(parts) != 3 or min(parts) < 1:
            raise ValueError(f"bad shape {item!r}, expected ROWSxCOLS[xK]")
        shapes.append(tuple(parts))
    return shapes


def cmd_bench(args) -> int:
    try:
        shapes = parse_shapes(args.shapes)
        patterns = [NmPattern.parse(p) for p in args.patterns.split(",")]
    except ValueError as err:
        print(f"bench: {err}", file=sys.stderr)
        return EXIT_CONFIG
    table = kernels.bench(shapes, patterns, repetitions=args.repetitions, warmup=args.warmup)
    text = kernels.bench_csv(table)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        networks, manifest = load_networks(args.checkpoint, names={"actor"})
    except CheckpointError as err:
        print(f"refusing to evaluate: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if "actor" not in networks:
        print(f"refusing to evaluate: no actor network in {args.checkpoint}", file=sys.stderr)
        return EXIT_CONFIG
    actor = networks["actor"]
    env_name = args.env or manifest.get("extra", {}).get("env")
    if not env_name:
        print("no environment recorded in checkpoint; pass --env", file=sys.stderr)
        return EXIT_CONFIG
    if args.kernel:
        for layer in actor.sparse_layers:
            layer.attach_kernel()

    def policy(s):
        return actor(np.asarray(s, dtype=np.float32).reshape(1, -1))[0].astype(np.float64)

    returns = evaluate(policy, env_name, args.episodes, args.seed)
    if args.trajectory:
        env = make_env(env_name)
        s = env.reset(np.random.default_rng(args.seed))
        rows = []
        for t in range(env.spec.max_steps):
            a = policy(s)
            res = env.step(a)
            rows.append((t, s, a, res.reward))
            s = res.state
            if res.done:
                break
        dump_trajectory(args.trajectory, env.spec, rows)
    print(json.dumps({
        "env": env_name,
        "episodes": args.episodes,
        "seed": args.seed,
        "mean_return": float(np.mean(returns)),
        "std_return": float(np.std(returns)),
        "returns": returns,
    }, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nmrl", description="N:M-sparse TD3 training tools")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one agent from an INI config")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None, help="override [run] output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="mask-period x pattern x seed grid")
    p.add_argument("plan")
    p.add_argument("--workers", type=int, default=None, help="parallel cells (default: plan or core count)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="time the packed N:M kernel against a dense multiply")
    p.add_argument("--shapes", default="256x256x1,1024x1024x1", help="ROWSxCOLS[xK], comma separated")
    p.add_argument("--patterns", default="2:4,1:4,1:8")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="noise-free rollouts of a checkpointed actor")
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--env", default=None, help="override the environment recorded in the checkpoint")
    p.add_argument("--kernel", action="store_true", help="run sparse layers through the packed kernel")
    p.add_argument("--trajectory", default=None, help="CSV path for one rollout's trajectory")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

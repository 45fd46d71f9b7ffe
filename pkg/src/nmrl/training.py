"""Run orchestration: warmup, act/step/learn loop, evaluation and artifacts.

Artifacts written to ``output_dir``:

- ``metrics.jsonl``: one ``steps`` record per ``log_interval`` env steps, one
  ``mask_update`` record per network per mask update, ``incident`` records
- ``eval.csv``: ``step,mean_return,std_return``
- ``sad.csv``: ``step,network,layer,sad,reset_flag``
- ``checkpoint/``: final checkpoint (see :mod:`nmrl.checkpoint`)
- ``config.ini`` and ``summary.json``

Nothing time-dependent goes into the first four, so identical configs give
byte-identical files.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .agent import NETWORKS, Td3Agent, TrainingAborted
from .checkpoint import save_checkpoint
from .config import RunConfig, serialize_run_config
from .envs import make_env
from .sparsity import sparsity_report

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_003


@dataclass
class RunResult:
    summary: dict
    agent: Td3Agent
    output_dir: Path


def evaluate(policy: Callable[[np.ndarray], np.ndarray], env_name: str, episodes: int, seed: int) -> list[float]:
    """Noise-free episode returns; episode resets draw from ``default_rng(seed)``."""
    env = make_env(env_name)
    rng = np.random.default_rng(seed)
    returns = []
    for _ in range(episodes):
        s = env.reset(rng)
        total = 0.0
        while True:
            res = env.step(policy(s))
            total += res.reward
            s = res.state
            if res.done:
                break
        returns.append(total)
    return returns


def mean_sad(agent: Td3Agent, network: str, after_step: float) -> float:
    """Mean total SAD of one network over mask updates later than ``after_step``."""
    values = [r.total for r in agent.sad_log if r.network == network and r.env_step > after_step]
    return float(np.mean(values)) if values else math.nan


def agent_sparsity(agent: Td3Agent) -> dict:
    out = {}
    for name in NETWORKS:
        net = agent.online(name)
        layers = [(f"{name}.{i}", layer.effective_weight, layer.sparse) for i, layer in enumerate(net.layers)]
        out[name] = sparsity_report(layers, agent.cfg.pattern).as_dict()
    return out


def _checkpoint(agent: Td3Agent, path: Path, step: int, env_name: str):
    nets = {name: net for name, net in agent.networks()}
    opts = {name: agent.optimizer(name) for name in NETWORKS}
    save_checkpoint(
        path, nets, opts, pattern=agent.cfg.pattern, seed=agent.cfg.seed, step=step,
        extra={"env": env_name, "train_calls": agent.train_calls, "mask_updates": agent.mask_updates},
    )


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=True)


def run_training(run: RunConfig, output_dir=None) -> RunResult:
    cfg = run.td3
    out = Path(output_dir or run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize_run_config(run))

    env = make_env(run.env)
    spec = env.spec
    agent = Td3Agent(cfg, spec.state_dim, spec.action_dim, spec.action_bound)
    env_rng, warm_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([cfg.seed, 7]).spawn(2))
    eval_seed = cfg.seed + EVAL_SEED_OFFSET
    bound = spec.action_bound
    started = time.perf_counter()

    metrics_fh = open(out / "metrics.jsonl", "w")
    sad_fh = open(out / "sad.csv", "w", newline="")
    eval_fh = open(out / "eval.csv", "w", newline="")
    sad_csv = csv.writer(sad_fh, lineterminator="\n")
    eval_csv = csv.writer(eval_fh, lineterminator="\n")
    sad_csv.writerow(["step", "network", "layer", "sad", "reset_flag"])
    eval_csv.writerow(["step", "mean_return", "std_return"])

    s = env.reset(env_rng)
    episode_return = 0.0
    bucket = {"returns": [], "critic_loss": [], "actor_loss": []}
    start_counters = None
    last_eval = None
    incidents = 0
    try:
        for t in range(run.budget):
            step = t + 1
            learning = t >= cfg.learning_starts
            if learning:
                if start_counters is None:
                    start_counters = copy.copy(agent.counters)
                a = agent.select_action(s, cfg.exploration_noise * bound)
            else:
                a = warm_rng.uniform(-bound, bound, size=spec.action_dim)
            res = env.step(a)
            agent.counters.env_steps += 1
            if not (np.all(np.isfinite(res.state)) and math.isfinite(res.reward)):
                incidents += 1
                metrics_fh.write(_dumps({"kind": "incident", "step": step, "what": "non-finite state"}) + "\n")
                log.warning("step %d: non-finite environment state, resetting episode", step)
                s = env.reset(env_rng)
                episode_return = 0.0
            else:
                agent.buffer.push(s, a, res.reward, res.state, res.done and not res.truncated)
                episode_return += res.reward
                s = res.state
                if res.done:
                    bucket["returns"].append(episode_return)
                    episode_return = 0.0
                    s = env.reset(env_rng)

            if learning:
                records = agent.maybe_update_masks(step)
                for rec in records:
                    for layer, value in enumerate(rec.per_layer):
                        sad_csv.writerow([step, rec.network, layer, value, int(rec.reset)])
                    metrics_fh.write(_dumps({
                        "kind": "mask_update", "step": step, "network": rec.network,
                        "sad": rec.total, "per_layer": list(rec.per_layer), "reset": rec.reset,
                    }) + "\n")
                if records:
                    agent.check_nm()
                step_metrics = agent.train_step()
                bucket["critic_loss"].append(step_metrics["critic_loss"])
                if "actor_loss" in step_metrics:
                    bucket["actor_loss"].append(step_metrics["actor_loss"])
                if run.debug_checks:
                    agent.check_nm()

            if step % run.log_interval == 0:
                metrics_fh.write(_dumps({
                    "kind": "steps", "step": step,
                    "episodes": len(bucket["returns"]),
                    "mean_episode_return": float(np.mean(bucket["returns"])) if bucket["returns"] else None,
                    "critic_loss": float(np.mean(bucket["critic_loss"])) if bucket["critic_loss"] else None,
                    "actor_loss": float(np.mean(bucket["actor_loss"])) if bucket["actor_loss"] else None,
                    "forward": agent.counters.forward, "backward": agent.counters.backward,
                }) + "\n")
                bucket = {"returns": [], "critic_loss": [], "actor_loss": []}
            if step % run.eval_interval == 0:
                returns = evaluate(agent.policy, run.env, run.eval_episodes, eval_seed)
                last_eval = (step, float(np.mean(returns)), float(np.std(returns)))
                eval_csv.writerow([step, repr(last_eval[1]), repr(last_eval[2])])
                eval_fh.flush()
            if run.checkpoint_interval and step % run.checkpoint_interval == 0:
                _checkpoint(agent, out / f"checkpoint_{step}", step, run.env)
    except (TrainingAborted, FloatingPointError) as err:
        _checkpoint(agent, out / "checkpoint_abort", agent.counters.env_steps, run.env)
        metrics_fh.write(_dumps({"kind": "abort", "step": agent.counters.env_steps, "error": str(err)}) + "\n")
        raise TrainingAborted(f"{err} (state dumped to {out / 'checkpoint_abort'})") from err
    finally:
        metrics_fh.close()
        sad_fh.close()
        eval_fh.close()

    if last_eval is None or last_eval[0] != run.budget:
        returns = evaluate(agent.policy, run.env, run.eval_episodes, eval_seed)
        last_eval = (run.budget, float(np.mean(returns)), float(np.std(returns)))
    _checkpoint(agent, out / "checkpoint", run.budget, run.env)

    fwd, bwd = agent.counters.per_step_since(start_counters) if start_counters else (0.0, 0.0)
    summary = {
        "env": run.env,
        "pattern": str(cfg.pattern),
        "seed": cfg.seed,
        "budget": run.budget,
        "env_steps": agent.counters.env_steps,
        "final_mean_return": last_eval[1],
        "final_std_return": last_eval[2],
        "sparsity": agent_sparsity(agent),
        "pass_counters": {
            "forward_total": agent.counters.forward,
            "backward_total": agent.counters.backward,
            "post_warmup_steps": agent.counters.env_steps - (start_counters.env_steps if start_counters else agent.counters.env_steps),
            "forward_per_step": fwd,
            "backward_per_step": bwd,
        },
        "mask_updates": agent.mask_updates,
        "soft_resets": sum(r.reset for r in agent.sad_log),
        "incidents": incidents,
        "mean_sad_second_half": {name: mean_sad(agent, name, run.budget / 2) for name in NETWORKS},
        "wall_seconds": round(time.perf_counter() - started, 3),
        "artifacts": {
            "config": "config.ini",
            "metrics": "metrics.jsonl",
            "eval": "eval.csv",
            "sad": "sad.csv",
            "checkpoint": "checkpoint",
            "summary": "summary.json",
        },
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
    return RunResult(summary, agent, out)

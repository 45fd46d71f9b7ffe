"""TD3 with all six networks held to a row-wise N:M pattern.

Masks are re-projected from the dense weight stores every ``mask_period``
environment steps, right before that step's gradient update. The new online
masks are copied straight into the targets. A network whose summed SAD at an
update falls below ``soft_reset_threshold`` gets fresh random masks instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .nn import AdamState, Mlp, adam_step, build_mlp, srste_shrink
from .sparsity import NmPattern, project_nm, random_nm_mask, sad, satisfies_nm

log = logging.getLogger(__name__)

NETWORKS = ("actor", "critic1", "critic2")
SRSTE_MODES = ("off", "per_step", "per_mask_update")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class Td3Config:
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    mask_period: int = 5000
    pattern: NmPattern = NmPattern(2, 4)
    # noise scales are fractions of the action bound
    exploration_noise: float = 0.1
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    batch_size: int = 256
    learning_starts: int = 1000
    buffer_size: int = 100_000
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    hidden: tuple[int, ...] = (256, 256)
    init_mode: str = "adjusted"
    soft_reset_enabled: bool = True
    soft_reset_threshold: int = 10
    soft_reset_actor: bool = True
    soft_reset_critics: bool = True
    soft_reset_optimizer: bool = False
    reset_moments_on_reactivation: bool = False
    srste_mode: str = "off"
    srste_lambda: float = 0.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.gamma < 1.0:
            problems.append("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            problems.append("tau must lie in (0, 1]")
        for name in ("policy_delay", "mask_period", "batch_size", "buffer_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.learning_starts < self.batch_size:
            problems.append("learning_starts must be >= batch_size")
        for name in ("exploration_noise", "target_noise", "target_noise_clip", "actor_lr", "critic_lr"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        if not self.hidden or min(self.hidden) < 1:
            problems.append("hidden needs at least one positive width")
        if self.init_mode not in ("adjusted", "standard"):
            problems.append("init_mode must be 'adjusted' or 'standard'")
        if self.srste_mode not in SRSTE_MODES:
            problems.append(f"srste_mode must be one of {SRSTE_MODES}")
        if not 0.0 <= self.srste_lambda < 1.0:
            problems.append("srste_lambda must lie in [0, 1)")
        if self.soft_reset_threshold < 0:
            problems.append("soft_reset_threshold must be non-negative")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class PassCounters:
    """Full-network forward evaluations and parameter-gradient backward passes."""

    forward: int = 0
    backward: int = 0
    env_steps: int = 0

    def per_step_since(self, start: "PassCounters") -> tuple[float, float]:
        steps = self.env_steps - start.env_steps
        if steps <= 0:
            return 0.0, 0.0
        return (self.forward - start.forward) / steps, (self.backward - start.backward) / steps


@dataclass(frozen=True)
class SadRecord:
    env_step: int
    network: str
    per_layer: tuple[int, ...]
    total: int
    reset: bool


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer sampled uniformly with replacement."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, rng: np.random.Generator):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim), dtype=np.float32)
        self.a = np.zeros((capacity, action_dim), dtype=np.float32)
        self.r = np.zeros((capacity, 1), dtype=np.float32)
        self.s2 = np.zeros((capacity, state_dim), dtype=np.float32)
        self.done = np.zeros((capacity, 1), dtype=np.float32)
        self.inserted = 0
        self.rng = rng

    def __len__(self):
        return min(self.inserted, self.capacity)

    def push(self, s, a, r, s2, done):
        i = self.inserted % self.capacity
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, float(done)
        self.inserted += 1

    def sample(self, batch_size: int) -> Batch:
        if len(self) == 0:
            raise RuntimeError("cannot sample from an empty replay buffer")
        idx = self.rng.integers(0, len(self), size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])


def td_target(r, done, q1, q2, gamma: float):
    """Clipped double-Q bootstrap ``r + gamma * (1 - done) * min(q1, q2)``."""
    return r + gamma * (1.0 - done) * np.minimum(q1, q2)


def polyak_update(online: Mlp, target: Mlp, tau: float) -> Mlp:
    """Move target weight stores and biases toward the online ones; masks are untouched."""
    online_params, target_params = online.params(), target.params()
    if len(online_params) != len(target_params):
        raise ValueError("online and target networks differ in depth")
    for p, tp in zip(online_params, target_params):
        if p.shape != tp.shape:
            raise ValueError(f"parameter shape mismatch {p.shape} vs {tp.shape}")
        tp *= tp.dtype.type(1.0 - tau)
        tp += tp.dtype.type(tau) * p
    return target


def soft_reset_check(total_sad: int, threshold: int, enabled: bool = True) -> str:
    """``"resample"`` when enabled and ``total_sad < threshold``, else ``"keep"``."""
    return "resample" if enabled and total_sad < threshold else "keep"


class Td3Agent:
    def __init__(self, cfg: Td3Config, state_dim: int, action_dim: int, action_bound: float):
        self.cfg = cfg
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.action_bound = float(action_bound)
        seeds = np.random.SeedSequence(cfg.seed).spawn(5)
        init_rng, self.noise_rng, buffer_rng, self.reset_rng, self.target_rng = (
            np.random.default_rng(s) for s in seeds
        )
        hidden = list(cfg.hidden)
        self.actor = build_mlp(
            [state_dim, *hidden, action_dim], cfg.pattern, init_rng,
            output="tanh", scale=self.action_bound, init_mode=cfg.init_mode,
        )
        self.critic1 = build_mlp([state_dim + action_dim, *hidden, 1], cfg.pattern, init_rng, init_mode=cfg.init_mode)
        self.critic2 = build_mlp([state_dim + action_dim, *hidden, 1], cfg.pattern, init_rng, init_mode=cfg.init_mode)
        self.actor_target = self.actor.copy()
        self.critic1_target = self.critic1.copy()
        self.critic2_target = self.critic2.copy()
        self.actor_opt = AdamState.for_params(self.actor.params(), lr=cfg.actor_lr)
        self.critic1_opt = AdamState.for_params(self.critic1.params(), lr=cfg.critic_lr)
        self.critic2_opt = AdamState.for_params(self.critic2.params(), lr=cfg.critic_lr)
        self.buffer = ReplayBuffer(cfg.buffer_size, state_dim, action_dim, buffer_rng)
        self.counters = PassCounters()
        self.sad_log: list[SadRecord] = []
        self.train_calls = 0
        self.mask_updates = 0

    # -- bookkeeping -----------------------------------------------------

    def online(self, name: str) -> Mlp:
        return getattr(self, name)

    def target(self, name: str) -> Mlp:
        return getattr(self, f"{name}_target")

    def optimizer(self, name: str) -> AdamState:
        return getattr(self, f"{name}_opt")

    def networks(self) -> Iterator[tuple[str, Mlp]]:
        for name in NETWORKS:
            yield name, self.online(name)
            yield f"{name}_target", self.target(name)

    def check_nm(self):
        for name, net in self.networks():
            for i, layer in enumerate(net.sparse_layers):
                if not satisfies_nm(layer.effective_weight, self.cfg.pattern):
                    raise AssertionError(f"{name} sparse layer {i} violates {self.cfg.pattern}")

    def _forward(self, net: Mlp, x, keep=False):
        self.counters.forward += 1
        return net.forward(x, keep=keep)

    # -- acting ------------------------------------------------------------

    def policy(self, s) -> np.ndarray:
        """Deterministic action, not counted as a training pass."""
        x = np.asarray(s, dtype=np.float32).reshape(1, -1)
        return self.actor(x)[0].astype(np.float64)

    def select_action(self, s, noise_std: float) -> np.ndarray:
        x = np.asarray(s, dtype=np.float32).reshape(1, -1)
        a = self._forward(self.actor, x)[0].astype(np.float64)
        if noise_std > 0:
            a = a + self.noise_rng.normal(0.0, noise_std, size=a.shape)
        return np.clip(a, -self.action_bound, self.action_bound)

    # -- learning ----------------------------------------------------------

    def critic_target(self, batch: Batch, noise: bool = True) -> np.ndarray:
        cfg, bound = self.cfg, self.action_bound
        a2 = self._forward(self.actor_target, batch.s2)
        if noise and cfg.target_noise > 0:
            eps = self.target_rng.normal(0.0, cfg.target_noise * bound, size=a2.shape)
            clip = cfg.target_noise_clip * bound
            a2 = np.clip(a2 + np.clip(eps, -clip, clip).astype(np.float32), -bound, bound)
        sa2 = np.concatenate([batch.s2, a2], axis=1)
        q1 = self._forward(self.critic1_target, sa2)
        q2 = self._forward(self.critic2_target, sa2)
        return td_target(batch.r, batch.done, q1, q2, cfg.gamma).astype(np.float32)

    def _apply(self, name: str, grads):
        net = self.online(name)
        adam_step(net.params(), grads, self.optimizer(name), net.grad_masks())
        if self.cfg.srste_mode == "per_step":
            for layer in net.sparse_layers:
                srste_shrink(layer, self.cfg.srste_lambda, "per_step", "step")

    def train_step(self) -> dict:
        cfg = self.cfg
        if len(self.buffer) < cfg.batch_size:
            raise RuntimeError("train_step called before the buffer holds one batch")
        batch = self.buffer.sample(cfg.batch_size)
        y = self.critic_target(batch)
        sa = np.concatenate([batch.s, batch.a], axis=1)
        n = cfg.batch_size
        metrics = {}
        critic_loss = 0.0
        for name in ("critic1", "critic2"):
            critic = self.online(name)
            err = self._forward(critic, sa, keep=True) - y
            critic_loss += float(np.mean(err * err))
            if not np.isfinite(critic_loss):
                raise TrainingAborted(f"non-finite critic loss at update {self.train_calls}")
            _, grads = critic.backward((2.0 / n) * err)
            self.counters.backward += 1
            self._apply(name, grads)
        metrics["critic_loss"] = critic_loss
        self.train_calls += 1
        if self.train_calls % cfg.policy_delay == 0:
            a = self._forward(self.actor, batch.s, keep=True)
            q = self._forward(self.critic1, np.concatenate([batch.s, a], axis=1), keep=True)
            actor_loss = -float(np.mean(q))
            if not np.isfinite(actor_loss):
                raise TrainingAborted(f"non-finite actor loss at update {self.train_calls}")
            # gradient w.r.t. the action only; the critic's own parameters stay put
            grad_in, _ = self.critic1.backward(np.full_like(q, -1.0 / n), param_grads=False)
            _, grads = self.actor.backward(grad_in[:, self.state_dim:])
            self.counters.backward += 1
            self._apply("actor", grads)
            for name in NETWORKS:
                polyak_update(self.online(name), self.target(name), cfg.tau)
            metrics["actor_loss"] = actor_loss
        return metrics

    # -- topology ----------------------------------------------------------

    def _soft_reset_allowed(self, name: str) -> bool:
        cfg = self.cfg
        if not cfg.soft_reset_enabled:
            return False
        return cfg.soft_reset_actor if name == "actor" else cfg.soft_reset_critics

    def update_masks(self, env_step: int) -> list[SadRecord]:
        """Re-project every online network now, regardless of the schedule."""
        cfg = self.cfg
        self.mask_updates += 1
        records = []
        for name in NETWORKS:
            net, tgt, opt = self.online(name), self.target(name), self.optimizer(name)
            old = [layer.mask for layer in net.sparse_layers]
            new = [project_nm(layer.weight, cfg.pattern) for layer in net.sparse_layers]
            per_layer = tuple(sad(o, e) for o, e in zip(old, new))
            total = sum(per_layer)
            reset = False
            if self.mask_updates > 1 and soft_reset_check(
                total, cfg.soft_reset_threshold, self._soft_reset_allowed(name)
            ) == "resample":
                new = [random_nm_mask(e.rows, e.cols, cfg.pattern, self.reset_rng) for e in new]
                reset = True
                log.info("step %d: soft reset of %s (SAD %d)", env_step, name, total)
                if cfg.soft_reset_optimizer:
                    for m in opt.m + opt.v:
                        m.fill(0)
            sparse_idx = [i for i, layer in enumerate(net.layers) if layer.sparse]
            for k, (i, mask) in enumerate(zip(sparse_idx, new)):
                if cfg.reset_moments_on_reactivation:
                    revived = (mask.bits == 1) & (old[k].bits == 0)
                    opt.m[2 * i][revived] = 0
                    opt.v[2 * i][revived] = 0
                net.layers[i].set_mask(mask)
                tgt.layers[i].set_mask(mask)
                if cfg.srste_mode == "per_mask_update":
                    srste_shrink(net.layers[i], cfg.srste_lambda, "per_mask_update", "mask_update")
            records.append(SadRecord(env_step, name, per_layer, total, reset))
        self.sad_log.extend(records)
        return records

    def maybe_update_masks(self, env_step: int) -> list[SadRecord]:
        cfg = self.cfg
        if env_step % cfg.mask_period != 0 or env_step <= cfg.learning_starts:
            return []
        return self.update_masks(env_step)

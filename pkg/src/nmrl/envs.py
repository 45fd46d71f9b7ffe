"""Seedable toy continuous-control tasks.

Both environments step with semi-implicit Euler (velocity first, then
position) in float64, in a fixed operation order, so a seed plus an action
sequence reproduces a trajectory bit for bit.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_bound: float
    dt: float
    max_steps: int


@dataclass
class StepResult:
    state: np.ndarray
    reward: float
    done: bool
    truncated: bool = False  # done because of the time limit, not a terminal state


def angle_normalize(x: float) -> float:
    return ((x + math.pi) % (2 * math.pi)) - math.pi


class Env:
    spec: EnvSpec

    def __init__(self):
        self.t = 0
        self.clipped_actions = 0

    def _clip_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        bound = self.spec.action_bound
        if np.any(np.abs(a) > bound):
            self.clipped_actions += 1
            if self.clipped_actions == 1:
                log.warning("%s: action %s outside [-%g, %g], clipping", self.spec.name, a, bound, bound)
            a = np.clip(a, -bound, bound)
        return a


class Pendulum(Env):
    """Swing-up pendulum; theta = 0 is upright.

    Reward is charged on the state the action is applied to:
    ``-(wrap(theta)^2 + 0.1 * theta_dot^2 + 0.001 * u^2)``.
    """

    spec = EnvSpec("pendulum", state_dim=3, action_dim=1, action_bound=2.0, dt=0.05, max_steps=200)
    g = 10.0
    mass = 1.0
    length = 1.0
    max_speed = 8.0

    def __init__(self):
        super().__init__()
        self.theta = 0.0
        self.theta_dot = 0.0

    def set_state(self, theta: float, theta_dot: float):
        self.theta, self.theta_dot = float(theta), float(theta_dot)

    def observe(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def reset(self, seed=None) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.theta = float(rng.uniform(-math.pi, math.pi))
        self.theta_dot = float(rng.uniform(-1.0, 1.0))
        self.t = 0
        return self.observe()

    def step(self, action) -> StepResult:
        u = float(self._clip_action(action)[0])
        th, thdot = self.theta, self.theta_dot
        reward = -(angle_normalize(th) ** 2 + 0.1 * thdot**2 + 0.001 * u**2)
        dt = self.spec.dt
        accel = 3.0 * self.g / (2.0 * self.length) * math.sin(th) + 3.0 / (self.mass * self.length**2) * u
        thdot = min(max(thdot + accel * dt, -self.max_speed), self.max_speed)
        self.theta = th + thdot * dt
        self.theta_dot = thdot
        self.t += 1
        truncated = self.t >= self.spec.max_steps
        return StepResult(self.observe(), reward, truncated, truncated)


class Reacher(Env):
    """Planar point mass driven by a 2-D acceleration toward a seeded goal.

    Observation is ``(pos, vel, goal - pos)``; position is confined to
    ``[-1, 1]^2`` and speed per axis to ``[-2, 2]``. Reward is charged on the
    post-step position.
    """

    spec = EnvSpec("reacher", state_dim=6, action_dim=2, action_bound=1.0, dt=0.1, max_steps=100)
    max_speed = 2.0
    arena = 1.0

    def __init__(self):
        super().__init__()
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.goal = np.zeros(2)

    def observe(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel, self.goal - self.pos])

    def reset(self, seed=None) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.goal = rng.uniform(-0.8, 0.8, size=2)
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.t = 0
        return self.observe()

    def step(self, action) -> StepResult:
        a = self._clip_action(action)
        dt = self.spec.dt
        self.vel = np.clip(self.vel + a * dt, -self.max_speed, self.max_speed)
        self.pos = np.clip(self.pos + self.vel * dt, -self.arena, self.arena)
        reward = -float(np.linalg.norm(self.pos - self.goal)) - 0.01 * float(a @ a)
        self.t += 1
        truncated = self.t >= self.spec.max_steps
        return StepResult(self.observe(), reward, truncated, truncated)


ENVS = {"pendulum": Pendulum, "reacher": Reacher}


def make_env(name: str) -> Env:
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


def dump_trajectory(path, spec: EnvSpec, rows: Iterable[tuple[int, np.ndarray, np.ndarray, float]]):
    """Write ``t,state...,action...,reward`` rows to CSV."""
    header = (
        ["t"]
        + [f"s{i}" for i in range(spec.state_dim)]
        + [f"a{i}" for i in range(spec.action_dim)]
        + ["reward"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for t, state, action, reward in rows:
            writer.writerow([t, *map(repr, map(float, state)), *map(repr, map(float, action)), repr(float(reward))])

import csv
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmrl.envs import Pendulum, Reacher, dump_trajectory, make_env

PENDULUM_MIN_REWARD = -(math.pi**2 + 0.1 * 64 + 0.001 * 4)


def test_pendulum_upright_equilibrium():
    env = Pendulum()
    env.set_state(0.0, 0.0)
    res = env.step([0.0])
    assert (env.theta, env.theta_dot) == (0.0, 0.0)
    assert res.reward == 0.0


def test_pendulum_at_pi_stays_put():
    env = Pendulum()
    env.set_state(math.pi, 0.0)
    env.step([0.0])
    assert env.theta_dot == pytest.approx(0.0, abs=1e-12)


def test_pendulum_hand_step():
    env = Pendulum()
    env.set_state(math.pi / 2, 0.0)
    res = env.step([0.0])
    assert env.theta_dot == pytest.approx(0.75, abs=1e-12)
    assert env.theta == pytest.approx(1.6083, abs=1e-4)
    np.testing.assert_allclose(res.state, [math.cos(env.theta), math.sin(env.theta), 0.75])


def test_pendulum_time_limit():
    env = Pendulum()
    env.reset(0)
    results = [env.step([0.0]) for _ in range(200)]
    assert not any(r.done for r in results[:-1])
    assert results[-1].done and results[-1].truncated


def test_pendulum_clips_and_logs(caplog):
    env = Pendulum()
    env.set_state(0.0, 0.0)
    with caplog.at_level(logging.WARNING):
        env.step([5.0])
    assert env.clipped_actions == 1
    assert "clipping" in caplog.text
    # clipped to u = 2: theta_dot = 3 * 2 * 0.05
    assert env.theta_dot == pytest.approx(0.3)


@settings(max_examples=200, deadline=None)
@given(theta=st.floats(-10, 10), theta_dot=st.floats(-8, 8), u=st.floats(-5, 5))
def test_pendulum_reward_bounds(theta, theta_dot, u):
    env = Pendulum()
    env.set_state(theta, theta_dot)
    res = env.step([u])
    assert PENDULUM_MIN_REWARD <= res.reward <= 0.0
    assert abs(env.theta_dot) <= 8.0


def test_reacher_fixed_point():
    env = Reacher()
    env.reset(3)
    env.pos = env.goal.copy()
    res = env.step([0.0, 0.0])
    assert res.reward == 0.0
    np.testing.assert_array_equal(env.pos, env.goal)


def test_reacher_hand_step():
    env = Reacher()
    env.reset(0)
    env.pos, env.vel = np.zeros(2), np.zeros(2)
    env.step([1.0, 0.0])
    np.testing.assert_allclose(env.vel, [0.1, 0.0])
    np.testing.assert_allclose(env.pos, [0.01, 0.0])


def test_reacher_seeded_goal():
    a, b = Reacher(), Reacher()
    a.reset(42)
    b.reset(42)
    np.testing.assert_array_equal(a.goal, b.goal)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 1000), a=st.tuples(st.floats(-3, 3), st.floats(-3, 3)))
def test_reacher_reward_non_positive(seed, a):
    env = Reacher()
    env.reset(seed)
    for _ in range(5):
        assert env.step(list(a)).reward <= 0.0
    assert np.all(np.abs(env.vel) <= 2.0)


@pytest.mark.parametrize("name", ["pendulum", "reacher"])
def test_bitwise_determinism(name):
    actions = np.random.default_rng(0).uniform(-1, 1, size=(150, make_env(name).spec.action_dim))

    def rollout():
        env = make_env(name)
        out = [env.reset(11).tobytes()]
        for a in actions:
            res = env.step(a)
            out.append(res.state.tobytes() + np.float64(res.reward).tobytes())
        return out

    assert rollout() == rollout()


def test_unknown_env():
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("humanoid")


def test_trajectory_dump(tmp_path):
    env = Reacher()
    s = env.reset(1)
    rows = []
    for t in range(3):
        a = np.array([0.5, -0.5])
        res = env.step(a)
        rows.append((t, s, a, res.reward))
        s = res.state
    path = tmp_path / "traj.csv"
    dump_trajectory(path, env.spec, rows)
    parsed = list(csv.reader(open(path)))
    assert parsed[0] == ["t", "s0", "s1", "s2", "s3", "s4", "s5", "a0", "a1", "reward"]
    assert len(parsed) == 4
    assert float(parsed[3][-1]) == rows[2][3]

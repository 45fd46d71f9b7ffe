import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmrl.agent import Td3Config
from nmrl.config import (
    ConfigError,
    RunConfig,
    parse_run_config,
    parse_sweep_plan,
    serialize_run_config,
    serialize_sweep_plan,
)
from nmrl.sparsity import NmPattern

MINIMAL = """\
[run]
env = pendulum
budget = 300

[td3]
pattern = 2:4
hidden = 16, 16
"""


def test_minimal_parse():
    cfg = parse_run_config(MINIMAL)
    assert cfg.env == "pendulum" and cfg.budget == 300
    assert cfg.td3.pattern == NmPattern(2, 4)
    assert cfg.td3.hidden == (16, 16)
    assert cfg.td3.tau == Td3Config().tau


def test_round_trip_defaults():
    cfg = RunConfig(env="reacher")
    assert parse_run_config(serialize_run_config(cfg)) == cfg


def test_text_round_trip_keeps_values():
    cfg = parse_run_config(MINIMAL)
    again = parse_run_config(serialize_run_config(cfg))
    assert again == cfg
    assert serialize_run_config(again) == serialize_run_config(cfg)


@settings(max_examples=50, deadline=None)
@given(
    budget=st.integers(1, 10**6),
    gamma=st.floats(0.0, 0.999),
    n=st.integers(1, 4),
    extra=st.integers(0, 4),
    hidden=st.lists(st.integers(1, 512), min_size=1, max_size=3),
    soft=st.booleans(),
    lr=st.floats(1e-6, 1e-1),
)
def test_round_trip_property(budget, gamma, n, extra, hidden, soft, lr):
    td3 = Td3Config(gamma=gamma, pattern=NmPattern(n, n + extra), hidden=tuple(hidden),
                    soft_reset_enabled=soft, actor_lr=lr)
    cfg = RunConfig(env="pendulum", td3=td3, budget=budget, output_dir="out dir/x")
    assert parse_run_config(serialize_run_config(cfg)) == cfg


def test_unknown_key_has_line():
    with pytest.raises(ConfigError, match="line 8: unknown key 'tua'") as err:
        parse_run_config(MINIMAL + "tua = 0.1\n")
    assert err.value.field == "tua"


def test_unknown_section():
    with pytest.raises(ConfigError, match=r"unknown section \[optim\]"):
        parse_run_config(MINIMAL + "[optim]\nlr = 1\n")


def test_missing_env_names_field():
    with pytest.raises(ConfigError, match="env") as err:
        parse_run_config("[run]\nbudget = 10\n")
    assert err.value.field == "env"


def test_bad_value_names_field():
    with pytest.raises(ConfigError, match="line 3: bad value for 'budget'"):
        parse_run_config("[run]\nenv = pendulum\nbudget = lots\n")


def test_bad_pattern():
    with pytest.raises(ConfigError, match="pattern"):
        parse_run_config(MINIMAL.replace("2:4", "5:4"))


def test_unknown_env():
    with pytest.raises(ConfigError, match="unknown env"):
        parse_run_config("[run]\nenv = ant\n")


SWEEP = """\
[sweep]
mask_periods = 10, 100, 1000, 5000
patterns = 1:4, 2:4
seeds = 0, 1, 2

[run]
env = pendulum
output_dir = sweeps/k
"""


def test_sweep_cells():
    plan = parse_sweep_plan(SWEEP)
    cells = plan.cells()
    assert len(cells) == 4 * 2 * 3
    assert len({c.output_dir for c in cells}) == len(cells)
    assert {c.td3.mask_period for c in cells} == {10, 100, 1000, 5000}
    assert cells[0].output_dir.endswith("K10_p1x4_s0")


def test_sweep_round_trip():
    plan = parse_sweep_plan(SWEEP)
    assert parse_sweep_plan(serialize_sweep_plan(plan)) == plan


def test_sweep_rejects_bad_period():
    with pytest.raises(ConfigError, match="mask_periods"):
        parse_sweep_plan(SWEEP.replace("10, 100", "0, 100"))

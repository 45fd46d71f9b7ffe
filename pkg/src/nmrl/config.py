"""INI run and sweep configuration.

A run file has a ``[run]`` section (environment, budget, evaluation cadence,
output directory) and a ``[td3]`` section whose keys mirror
:class:`~nmrl.agent.Td3Config`. Values use plain INI syntax: booleans as
``true``/``false``, tuples as comma lists, patterns as ``N:M``. Unknown
sections or keys are errors. A sweep file adds a ``[sweep]`` section::

    [sweep]
    mask_periods = 10, 100, 1000, 5000
    patterns = 1:4
    seeds = 0, 1, 2, 3, 4
    workers = 0            ; 0 means one worker per available core
    post_transient = 0.5   ; SAD averaged over updates after this budget fraction
"""

from __future__ import annotations

import configparser
import dataclasses
import itertools
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .agent import Td3Config
from .envs import ENVS
from .sparsity import NmPattern


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class RunConfig:
    env: str
    td3: Td3Config = field(default_factory=Td3Config)
    budget: int = 50_000
    eval_interval: int = 5_000
    eval_episodes: int = 10
    output_dir: str = "runs/default"
    log_interval: int = 1_000
    checkpoint_interval: int = 0
    debug_checks: bool = False

    def __post_init__(self):
        if self.env not in ENVS:
            raise ConfigError(f"unknown env {self.env!r}; choose from {sorted(ENVS)}", field="env")
        for name in ("budget", "eval_interval", "eval_episodes", "log_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", field=name)
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0", field="checkpoint_interval")


@dataclass(frozen=True)
class SweepPlan:
    base: RunConfig
    mask_periods: tuple[int, ...]
    patterns: tuple[NmPattern, ...]
    seeds: tuple[int, ...]
    workers: int = 0
    post_transient: float = 0.5

    def cells(self) -> list[RunConfig]:
        out = []
        root = Path(self.base.output_dir)
        for k, pattern, seed in itertools.product(self.mask_periods, self.patterns, self.seeds):
            td3 = replace(self.base.td3, mask_period=k, pattern=pattern, seed=seed)
            out_dir = root / f"K{k}_p{pattern.n}x{pattern.m}_s{seed}"
            out.append(replace(self.base, td3=td3, output_dir=str(out_dir)))
        return out


RUN_KEYS = [f.name for f in dataclasses.fields(RunConfig) if f.name != "td3"]
TD3_KEYS = [f.name for f in dataclasses.fields(Td3Config)]
SWEEP_KEYS = ["mask_periods", "patterns", "seeds", "workers", "post_transient"]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, NmPattern):
        return str(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(raw: str, like, key: str):
    text = raw.strip()
    if isinstance(like, bool):
        lowered = text.lower()
        if lowered in ("true", "yes", "on", "1"):
            return True
        if lowered in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(like, NmPattern):
        return NmPattern.parse(text)
    if isinstance(like, int):
        return int(text.replace("_", ""))
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(int(part) for part in text.split(",") if part.strip())
    return text


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        header = re.match(r"\[(.+)\]", stripped)
        if header:
            current = header.group(1).strip()
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section and re.match(rf"{re.escape(key)}\s*[=:]", stripped):
            return lineno
    return None


def _read(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}", line=getattr(err, "lineno", None)) from None
    return parser


def _section(parser, text, name, allowed, defaults) -> dict:
    if not parser.has_section(name):
        return {}
    values = {}
    for key, raw in parser.items(name):
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{name}]", _line_of(text, name, key), key)
        try:
            values[key] = _coerce(raw, defaults[key], key)
        except ValueError as err:
            raise ConfigError(f"bad value for {key!r}: {err}", _line_of(text, name, key), key) from None
    return values


_RUN_DEFAULTS = {"env": "", **{f.name: f.default for f in dataclasses.fields(RunConfig) if f.name not in ("env", "td3")}}
_TD3_DEFAULTS = {f.name: getattr(Td3Config(), f.name) for f in dataclasses.fields(Td3Config)}


def _build_run(parser, text) -> RunConfig:
    run = _section(parser, text, "run", RUN_KEYS, _RUN_DEFAULTS)
    td3 = _section(parser, text, "td3", TD3_KEYS, _TD3_DEFAULTS)
    if not run.get("env"):
        raise ConfigError("missing required field 'env' in [run]", _line_of(text, "run"), "env")
    try:
        td3_cfg = Td3Config(**td3)
    except ValueError as err:
        raise ConfigError(f"invalid [td3] section: {err}", _line_of(text, "td3"), "td3") from None
    try:
        return RunConfig(td3=td3_cfg, **run)
    except ConfigError as err:
        raise ConfigError(str(err), _line_of(text, "run", err.field), err.field) from None


def parse_run_config(text: str) -> RunConfig:
    parser = _read(text)
    for name in parser.sections():
        if name not in ("run", "td3"):
            raise ConfigError(f"unknown section [{name}]", _line_of(text, name), name)
    return _build_run(parser, text)


def serialize_run_config(cfg: RunConfig) -> str:
    lines = ["[run]"]
    lines += [f"{key} = {_format(getattr(cfg, key))}" for key in RUN_KEYS]
    lines += ["", "[td3]"]
    lines += [f"{key} = {_format(getattr(cfg.td3, key))}" for key in TD3_KEYS]
    return "\n".join(lines) + "\n"


def parse_sweep_plan(text: str) -> SweepPlan:
    parser = _read(text)
    for name in parser.sections():
        if name not in ("run", "td3", "sweep"):
            raise ConfigError(f"unknown section [{name}]", _line_of(text, name), name)
    if not parser.has_section("sweep"):
        raise ConfigError("missing [sweep] section", field="sweep")
    base = _build_run(parser, text)
    raw = dict(parser.items("sweep"))
    for key in raw:
        if key not in SWEEP_KEYS:
            raise ConfigError(f"unknown key {key!r} in [sweep]", _line_of(text, "sweep", key), key)
    try:
        periods = tuple(int(v) for v in raw.get("mask_periods", str(base.td3.mask_period)).split(","))
        patterns = tuple(NmPattern.parse(v) for v in raw.get("patterns", str(base.td3.pattern)).split(","))
        seeds = tuple(int(v) for v in raw.get("seeds", str(base.td3.seed)).split(","))
        workers = int(raw.get("workers", "0"))
        post_transient = float(raw.get("post_transient", "0.5"))
    except ValueError as err:
        raise ConfigError(f"bad [sweep] value: {err}", _line_of(text, "sweep"), "sweep") from None
    if any(k < 1 for k in periods):
        raise ConfigError("mask_periods must be >= 1", _line_of(text, "sweep", "mask_periods"), "mask_periods")
    if not 0.0 <= post_transient < 1.0:
        raise ConfigError("post_transient must lie in [0, 1)", _line_of(text, "sweep", "post_transient"), "post_transient")
    return SweepPlan(base, periods, patterns, seeds, workers, post_transient)


def serialize_sweep_plan(plan: SweepPlan) -> str:
    sweep = [
        "[sweep]",
        f"mask_periods = {_format(plan.mask_periods)}",
        f"patterns = {_format(plan.patterns)}",
        f"seeds = {_format(plan.seeds)}",
        f"workers = {plan.workers}",
        f"post_transient = {plan.post_transient!r}",
        "",
    ]
    return "\n".join(sweep) + serialize_run_config(plan.base)


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text())


def load_sweep_plan(path) -> SweepPlan:
    return parse_sweep_plan(Path(path).read_text())


def default_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1

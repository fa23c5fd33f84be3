"""Experiment configuration: YAML loading with line-level validation.

Every key is declared in :data:`SCHEMA`; unknown keys, wrong types and
out-of-range values are all reported together, each prefixed with the line
it came from.  See ``docs/config_schema.md`` for the key reference.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import yaml

EXPERIMENTS = ("visual_region", "reward_families", "model_compare", "sweep", "theory_report")
ENV_NAMES = ("driving", "cartpole_lite")
SWEEP_AXES = ("r_reward", "pair_corr", "r_noise")


class ConfigError(ValueError):
    """Raised with every problem found in a configuration document."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


@dataclass(frozen=True)
class Key:
    """Leaf key: a checker returning an error message (or None) and a default."""

    check: Callable[[Any], Optional[str]]
    default: Any = None
    required: bool = False


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _num(lo=None, hi=None, lo_open=False):
    def check(x):
        if not _is_num(x):
            return "expected a number"
        if lo is not None and (x < lo or (lo_open and x == lo)):
            return f"must be {'>' if lo_open else '>='} {lo}"
        if hi is not None and x > hi:
            return f"must be <= {hi}"
        return None
    return check


def _int(lo=None):
    def check(x):
        if not isinstance(x, int) or isinstance(x, bool):
            return "expected an integer"
        if lo is not None and x < lo:
            return f"must be >= {lo}"
        return None
    return check


def _choice(options):
    def check(x):
        return None if x in options else f"must be one of {list(options)}"
    return check


def _opt(check):
    return lambda x: None if x is None else check(x)


def _list_of(check, length=None, nonempty=False):
    def inner(x):
        if not isinstance(x, list):
            return "expected a list"
        if length is not None and len(x) != length:
            return f"expected {length} entries"
        if nonempty and not x:
            return "must not be empty"
        for k, item in enumerate(x):
            msg = check(item)
            if msg:
                return f"entry {k}: {msg}"
        return None
    return inner


def _str(x):
    return None if isinstance(x, str) and x else "expected a nonempty string"


_pair = _list_of(_int(0), length=2)
_bound = _list_of(_num(), length=2)

SCHEMA: dict = {
    "experiment": Key(_choice(EXPERIMENTS), required=True),
    "seeds": Key(_list_of(_int(0), nonempty=True), [0]),
    "output_dir": Key(_str, "out"),
    "env": {
        "name": Key(_choice(ENV_NAMES), "driving"),
        "driving": {
            "dv": Key(_list_of(_num(0, lo_open=True), length=2), [0.1, 1.0]),
            "dt": Key(_num(0, lo_open=True), 1.0),
            "sigma_v": Key(_num(0), 1.0),
            "sigma_p": Key(_num(0), 0.0),
            "g_ratio": Key(_num(0), 0.1),
            "goal_radius": Key(_num(0, lo_open=True), 0.1),
            "step_penalty": Key(_num(), -1.0),
            "max_steps": Key(_int(1), 200),
            "discount": Key(_num(0, 1), 1.0),
            "sign_mode": Key(_choice(("main_text", "appendix")), "main_text"),
            "reward_mode": Key(_choice(("penalty", "product", "quadratic")), "penalty"),
            "start_bound": Key(_num(0, lo_open=True), 2.0),
        },
        "cartpole": {
            "max_steps": Key(_int(1), 200),
            "discount": Key(_num(0, 1), 0.99),
            "start_bound": Key(_num(0, lo_open=True), 0.05),
        },
        "noise": {
            "r_noise": Key(_num(0), 0.4),
            "pair_corr": Key(_num(-0.999999, 0.999999), 0.9),
            "pairs": Key(_opt(_list_of(_pair)), None),
        },
        "augment": {
            "r_reward": Key(_num(), -5.0),
            "pairs": Key(_opt(_list_of(_pair)), None),
            "norm_bounds": Key(_opt(_list_of(_bound)), None),
        },
        "families": Key(_list_of(_choice(("Original", "A", "B", "C", "D", "E")), nonempty=True),
                        ["Original", "A", "B", "C", "D", "E"]),
        "calibration_seed": Key(_int(0), 12345),
        "calibration_steps": Key(_int(10), 10_000),
    },
    "model": {
        "mean_kind": Key(_choice(("linear_least_squares", "tabular_conditional")), "linear_least_squares"),
        "feature_map": Key(_choice(("identity", "sign_first")), "identity"),
        "scale_kind": Key(_choice(("homoscedastic", "state_proportional")), "homoscedastic"),
        "window": Key(_int(1), 2000),
        "shrink": Key(_num(0, 1), 0.05),
    },
    "loop": {
        "n_epochs": Key(_int(1), 30),
        "env_steps": Key(_int(1), 200),
        "n_rollouts": Key(_int(1), 200),
        "q_updates": Key(_int(1), 20),
        "rollout_k": Key(_int(1), 3),
        "branch": Key(_int(1), 1),
        "batch_size": Key(_int(1), 256),
        "init_steps": Key(_int(0), 500),
        "lr": Key(_num(0, 1, lo_open=True), 0.1),
        "eps_start": Key(_num(0, 1), 0.5),
        "eps_decay": Key(_num(0, 1), 0.99),
        "eps_min": Key(_num(0, 1), 0.05),
        "eval_episodes": Key(_int(1), 50),
        "final_episodes": Key(_int(1), 200),
        "q_gamma": Key(_opt(_num(0, 1)), None),
        "model_capacity": Key(_int(1), 20_000),
        "grid": {
            "lows": Key(_opt(_list_of(_num(), nonempty=True)), None),
            "highs": Key(_opt(_list_of(_num(), nonempty=True)), None),
            "n_cells": Key(_opt(_list_of(_int(2), nonempty=True)), None),
        },
    },
    "planning": {
        "lows": Key(_list_of(_num(), length=2), [-2.0, -2.0]),
        "highs": Key(_list_of(_num(), length=2), [2.0, 2.0]),
        "n_cells": Key(_list_of(_int(2), length=2), [64, 64]),
        "n_mc": Key(_int(1), 200),
        "eval_episodes": Key(_int(1), 100),
    },
    "sweep": {
        "axis": Key(_opt(_choice(SWEEP_AXES)), None),
        "values": Key(_opt(_list_of(_num(), nonempty=True)), None),
    },
    "theory": {
        "n_mc": Key(_int(100), 1_000_000),
        "rho": Key(_num(-0.999999, 0.999999), 0.9),
    },
}


@dataclass
class ExperimentConfig:
    """Validated configuration; every section is filled with defaults."""

    experiment: str
    seeds: list
    output_dir: str
    env: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    loop: dict = field(default_factory=dict)
    planning: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    theory: dict = field(default_factory=dict)
    source: Optional[str] = None

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in
                ("experiment", "seeds", "output_dir", "env", "model", "loop", "planning", "sweep", "theory")}


def _to_python(node):
    """Plain Python value of a YAML node, plus a dict of key path -> line."""
    lines: dict = {}

    def walk(n, path):
        lines[path] = n.start_mark.line + 1
        if isinstance(n, yaml.MappingNode):
            out = {}
            for k, v in n.value:
                key = k.value
                if key in out:
                    raise ConfigError([f"line {k.start_mark.line + 1}: duplicate key {key!r}"])
                lines[path + (key,)] = k.start_mark.line + 1
                out[key] = walk(v, path + (key,))
            return out
        if isinstance(n, yaml.SequenceNode):
            return [walk(v, path + (i,)) for i, v in enumerate(n.value)]
        return yaml.safe_load(yaml.serialize(n))

    return walk(node, ()), lines


def _validate(doc: dict, schema: dict, path: tuple, lines: dict, problems: list) -> dict:
    out = {}
    where = lambda p: f"line {lines.get(p, lines.get(p[:-1], '?'))}"
    for key in doc:
        if key not in schema:
            dotted = ".".join(str(x) for x in path + (key,))
            problems.append(f"{where(path + (key,))}: unknown key {dotted!r}")
    for key, spec in schema.items():
        p = path + (key,)
        dotted = ".".join(str(x) for x in p)
        if isinstance(spec, dict):
            sub = doc.get(key, {})
            if sub is None:
                sub = {}
            if not isinstance(sub, dict):
                problems.append(f"{where(p)}: {dotted} must be a mapping")
                sub = {}
            out[key] = _validate(sub, spec, p, lines, problems)
            continue
        if key not in doc:
            if spec.required:
                problems.append(f"{where(path) if path else 'line 1'}: missing required key {dotted!r}")
            out[key] = copy.deepcopy(spec.default)
            continue
        msg = spec.check(doc[key])
        if msg:
            problems.append(f"{where(p)}: {dotted}: {msg}")
        out[key] = doc[key]
    return out


def _cross_checks(cfg: dict, lines: dict, problems: list) -> None:
    where = lambda *p: f"line {lines.get(p, 1)}"
    env = cfg["env"]
    dv = env["driving"]["dv"]
    if isinstance(dv, list) and len(dv) == 2 and all(_is_num(x) for x in dv) and not dv[1] > dv[0]:
        problems.append(f"{where('env', 'driving', 'dv')}: env.driving.dv must satisfy dv[1] > dv[0]")
    aug = env["augment"]
    if aug["norm_bounds"] is not None and isinstance(aug["norm_bounds"], list):
        for k, b in enumerate(aug["norm_bounds"]):
            if isinstance(b, list) and len(b) == 2 and all(_is_num(x) for x in b) and not b[1] > b[0]:
                problems.append(f"{where('env', 'augment', 'norm_bounds')}: "
                                f"env.augment.norm_bounds entry {k} needs hi > lo")
    grid = cfg["loop"]["grid"]
    given = [grid[k] is not None for k in ("lows", "highs", "n_cells")]
    if any(given) and not all(given):
        problems.append(f"{where('loop', 'grid')}: loop.grid needs lows, highs and n_cells together")
    if all(given) and isinstance(grid["lows"], list):
        if not (len(grid["lows"]) == len(grid["highs"]) == len(grid["n_cells"])):
            problems.append(f"{where('loop', 'grid')}: loop.grid lists must have equal length")
    exp = cfg["experiment"]
    if exp == "visual_region" and env["name"] != "driving":
        problems.append(f"{where('env', 'name')}: visual_region needs env.name = driving")
    if exp == "reward_families" and env["name"] != "cartpole_lite":
        problems.append(f"{where('env', 'name')}: reward_families needs env.name = cartpole_lite")
    if exp == "sweep":
        if cfg["sweep"]["axis"] is None or cfg["sweep"]["values"] is None:
            problems.append(f"{where('sweep')}: sweep needs sweep.axis and sweep.values")
        elif cfg["sweep"]["axis"] == "pair_corr" and any(
                _is_num(v) and abs(v) >= 1 for v in cfg["sweep"]["values"]):
            problems.append(f"{where('sweep', 'values')}: pair_corr values need |value| < 1")


def _line_of(problem: str) -> int:
    head = problem.split(":", 1)[0]
    return int(head[5:]) if head[5:].isdigit() else 0


def parse_config(text: str, source: Optional[str] = None) -> ExperimentConfig:
    """Parse and validate a YAML document; raises :class:`ConfigError`."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError([f"line {line}: YAML syntax error: {getattr(exc, 'problem', exc)}"]) from None
    if node is None:
        raise ConfigError(["line 1: empty configuration"])
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError([f"line {node.start_mark.line + 1}: top level must be a mapping"])
    doc, lines = _to_python(node)
    problems: list[str] = []
    cfg = _validate(doc, SCHEMA, (), lines, problems)
    if not problems:
        _cross_checks(cfg, lines, problems)
    if problems:
        raise ConfigError(sorted(problems, key=_line_of))
    return ExperimentConfig(source=source, **cfg)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


def default_config(experiment: str, **overrides) -> ExperimentConfig:
    """Defaults for ``experiment`` with top-level sections shallow-merged from ``overrides``."""
    doc: dict = {"experiment": experiment}
    doc.update(overrides)
    return parse_config(yaml.safe_dump(doc))

"""Run configuration: one JSON tree per run, dotted overrides from the command line."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .lf import LfHyperparams
from .loss import GridSpec, LossConfig
from .pf import FilterConfig
from .ssm import ConfigError, ScenarioModel, make_scenario
from .train import TrainConfig


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "X1"
    snr_db: float = 0.0
    t: int | None = None
    seed: int = 0

    def build(self, snr_db: float | None = None, t: int | None = None) -> ScenarioModel:
        snr = self.snr_db if snr_db is None else snr_db
        t = self.t if t is None else t
        if self.kind.startswith("Y"):
            return make_scenario(self.kind, snr, t=t, seed=self.seed)
        if t not in (None, 1):
            raise ConfigError("synthetic settings track a single sub-state")
        return make_scenario(self.kind, snr, seed=self.seed)


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 500
    n_val: int = 50
    n_test: int = 100
    kappa: int = 15
    seed: int = 1
    targets: tuple[int, ...] | None = None  # radar curriculum: mix of target counts
    target_probs: tuple[float, ...] | None = None


@dataclass(frozen=True)
class EvalSpec:
    n_values: tuple[int, ...] = (25,)
    snr_values: tuple[float, ...] | None = None  # None -> scenario SNR
    t_values: tuple[int, ...] | None = None  # None -> scenario t
    n_trajectories: int = 100
    kappa: int = 15
    seed: int = 3
    cutoff: float = math.inf
    include_plain: bool = True


@dataclass(frozen=True)
class BenchSpec:
    n_values: tuple[int, ...] = (25,)
    t_values: tuple[int, ...] | None = None
    steps: int = 100
    warmup: int = 10
    seed: int = 4


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    data: DataSpec = field(default_factory=DataSpec)
    filter: FilterConfig = field(default_factory=FilterConfig)
    lf: LfHyperparams = field(default_factory=LfHyperparams)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)

    def to_json(self) -> dict:
        return _jsonable(asdict(self))


_SECTIONS = {"scenario": ScenarioSpec, "data": DataSpec, "filter": FilterConfig, "lf": LfHyperparams,
             "train": TrainConfig, "eval": EvalSpec, "bench": BenchSpec}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _build(cls, tree: dict):
    if not isinstance(tree, dict):
        raise ConfigError(f"expected a table for {cls.__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(tree) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kw = {}
    for name, value in tree.items():
        if cls is TrainConfig and name == "loss":
            value = _build_loss(value)
        elif cls is TrainConfig and name == "window" and value is not None:
            value = tuple(value)
        elif isinstance(value, list):
            value = tuple(value)
        elif isinstance(value, str) and value in ("inf", "-inf"):
            value = float(value)
        kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _build_loss(tree: dict) -> LossConfig:
    tree = dict(tree)
    if "grid" in tree:
        tree["grid"] = _build(GridSpec, tree["grid"])
    for key in ("dims",):
        if tree.get(key) is not None:
            tree[key] = tuple(tree[key])
    return _build(LossConfig, tree)


def from_tree(tree: dict) -> RunConfig:
    unknown = set(tree) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(**{k: _build(_SECTIONS[k], v) for k, v in tree.items()})


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """``section.key=value`` pairs; values are parsed as JSON, falling back to strings."""
    tree = copy.deepcopy(tree)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        keys = path.split(".")
        node = tree
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-table {path!r}")
        node[keys[-1]] = value
    return tree


def load(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    tree = {}
    if path is not None:
        try:
            tree = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_tree(apply_overrides(tree, list(overrides)))

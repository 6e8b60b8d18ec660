"""Experiment documents: strict YAML parsing into nested dataclasses.

Every field has a default; unknown keys and ill-typed values raise
:class:`ConfigError` naming the dotted field path.  ``dump(parse(text))``
parses back to an equal config.
"""

from __future__ import annotations

import copy
import dataclasses
import itertools
import types
import typing
from dataclasses import dataclass, field

import yaml

from .adapter import NoraConfig
from .errors import ConfigError
from .fit import FitSpec
from .lora import LoraConfig
from .models import AdaptationPlan, ModelConfig
from .train import TrainConfig, config_hash

STAGES = ("fit", "pretrain", "adapt", "diagnostics")


@dataclass(frozen=True)
class DataConfig:
    task: str = "gaussian-shift"
    n_train: int = 512
    n_test: int = 2000
    shift: float = 7.0
    path: str | None = None
    seed: int | None = None  # defaults to the experiment seed


@dataclass(frozen=True)
class DiagnosticsConfig:
    lipschitz: bool = False
    deviation: bool = False
    adaptability: bool = True
    probes: int = 256
    grid_points: int = 10_000


@dataclass(frozen=True)
class OutputConfig:
    root: str | None = None  # falls back to $NORA_OUTPUT_ROOT, then ./runs
    name: str = "experiment"
    checkpoints: bool = True
    record_time: bool = False  # wall time in metrics.csv breaks byte-identical reruns


@dataclass(frozen=True)
class AdaptationConfig:
    plan: AdaptationPlan = field(default_factory=AdaptationPlan)
    matrix: dict = field(default_factory=dict)  # dotted path -> list of values
    variants: tuple = ()  # mappings {"name": ..., <dotted path>: value, ...}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    stages: tuple = ("pretrain", "adapt")
    fit: FitSpec = field(default_factory=FitSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, lr=3e-3, weight_decay=0.0))
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50, lr=1e-2))
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages {bad}; expected a subset of {STAGES}", field="stages")
        self.model.validate()
        self.pretrain.validate()
        self.train.validate()
        self.adaptation.plan.validate()
        if self.data.n_train < 1 or self.data.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1", field="data")
        if self.diagnostics.probes < 1:
            raise ConfigError("probes must be >= 1", field="diagnostics.probes")
        for key, values in self.adaptation.matrix.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError("matrix entries must be non-empty lists", field=f"adaptation.matrix.{key}")
            try:
                override(self, key, values[0])
            except ConfigError as exc:
                raise ConfigError(exc.message, field=f"adaptation.matrix.{key}") from None
        names = []
        for i, var in enumerate(self.adaptation.variants):
            where = f"adaptation.variants[{i}]"
            if not isinstance(var, dict) or not isinstance(var.get("name"), str):
                raise ConfigError("each variant must be a mapping with a string 'name'", field=where)
            names.append(var["name"])
            _apply_variant(self, var, where)
        if len(set(names)) != len(names):
            raise ConfigError(f"variant names must be unique, got {names}", field="adaptation.variants")

    def hash(self) -> str:
        return config_hash(to_dict(self))


# -- generic dataclass <-> dict -------------------------------------------------


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", field=path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", field=path)
        return value
    if tp is tuple or origin is tuple:
        if isinstance(value, str) or not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", field=path)
        if args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"expected {len(args)} entries, got {len(value)}", field=path)
            return tuple(_coerce(v, t, f"{path}[{i}]") for i, (v, t) in enumerate(zip(value, args)))
        return tuple(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {value!r}", field=path)
        return {str(k): list(v) if isinstance(v, tuple) else v for k, v in value.items()}
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", field=path or None)
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown key(s) {unknown}; allowed: {sorted(names)}", field=where)
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise exc.under(path) from None


def to_dict(obj) -> dict:
    """Plain mapping of a (nested) dataclass; tuples become lists."""

    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(obj)


def parse(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from exc
    cfg = from_dict(ExperimentConfig, data or {})
    cfg.validate()
    return cfg


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=None)


# -- matrix expansion -------------------------------------------------------------


def override(cfg, dotted: str, value, _full: str | None = None):
    """Copy of ``cfg`` with the field at ``dotted`` (e.g. ``adaptation.plan.nora.mode``) replaced."""
    full = _full or dotted
    head, _, rest = dotted.partition(".")
    names = {f.name for f in dataclasses.fields(cfg)}
    if head not in names:
        raise ConfigError(f"no field {head!r} in {type(cfg).__name__}", field=full)
    if rest:
        child = getattr(cfg, head)
        if not dataclasses.is_dataclass(child):
            raise ConfigError(f"{head!r} has no sub-fields", field=full)
        return dataclasses.replace(cfg, **{head: override(child, rest, value, full)})
    return dataclasses.replace(cfg, **{head: _coerce(value, _hints(type(cfg))[head], full)})


def _apply_variant(cfg, var: dict, where: str = "adaptation.variants"):
    for k, v in var.items():
        if k != "name":
            try:
                cfg = override(cfg, k, v)
            except ConfigError as exc:
                raise ConfigError(exc.message, field=f"{where}.{k}") from None
    return cfg


def expand(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Cells of the experiment as ``(cell_id, config)`` pairs.

    Each variant (a named set of dotted-path overrides) is crossed with the
    cartesian product of ``adaptation.matrix``.  Keys are dotted paths from
    the document root.  With neither, the single cell is the config itself.
    """
    variants = list(cfg.adaptation.variants) or [None]
    matrix = cfg.adaptation.matrix
    keys = sorted(matrix)
    cells = []
    for var in variants:
        base = cfg if var is None else _apply_variant(cfg, var)
        for combo in itertools.product(*(matrix[k] for k in keys)):
            c = copy.deepcopy(base)
            for k, v in zip(keys, combo):
                c = override(c, k, v)
            parts = [var["name"]] if var is not None else ([] if keys else [_plan_label(c)])
            parts += [f"{k.rsplit('.', 1)[-1]}={_short(v)}" for k, v in zip(keys, combo)]
            cells.append(("/".join(parts), c))
    return cells


def _short(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(map(str, v))
    return str(v)


def _plan_label(cfg: ExperimentConfig) -> str:
    plan = cfg.adaptation.plan
    if plan.mode == "nora":
        return f"nora-{plan.nora.mode}"
    return plan.mode


__all__ = [
    "ExperimentConfig",
    "DataConfig",
    "DiagnosticsConfig",
    "OutputConfig",
    "AdaptationConfig",
    "NoraConfig",
    "LoraConfig",
    "parse",
    "load",
    "dump",
    "expand",
    "override",
    "to_dict",
    "from_dict",
]

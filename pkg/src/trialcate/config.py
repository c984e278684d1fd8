"""YAML run configuration for the command-line tool.

Every section is optional. Unknown keys are rejected with the line they
appear on, and file paths are resolved relative to the config file and must
exist when the config is parsed.

Example::

    seed: 7
    out: results
    parallelism: 4
    dgp: {n_source: 20000}
    simulate: {trial_size: 2000}
    grid: {trial_sizes: [200, 500, 2000], dim_x1_values: [2, 5], replicates: 20}
    forest: {num_trees: 300}
    estimators:
      - {model: M2_IPW, aim: A, conditional_sampler: knn}
    apply:
      trial: trial.csv
      source: source.csv
      schema: {X1: [age, bmi], X2: [site], treatment: arm, outcome: y, selection: s}
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import SchemaConfig
from .dgp import OUTCOME, SELECTION, TREATMENT, DGPConfig, x1_names, x2_names
from .forest import ForestConfig
from .selection import WeightConfig
from .transport import EstimatorSpec

OUT_ENV = "TRIALCATE_OUT"


class ConfigError(ValueError):
    pass


class _Map(dict):
    """Mapping that remembers the source line of each key."""

    lines: dict
    line: int


class _Loader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.lines = {}
    out.line = node.start_mark.line + 1
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise ConfigError(f"line {key_node.start_mark.line + 1}: duplicate key {key!r}")
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)


@dataclass(frozen=True)
class SimulateConfig:
    trial_size: int = 2000


@dataclass(frozen=True)
class GridSection:
    trial_sizes: tuple[int, ...] = (200, 500, 2000, 5000)
    dim_x1_values: tuple[int, ...] = (2, 3, 5, 10)
    coef_x2_values: tuple[float, ...] = (0.5, 0.0)
    replicates: int = 50


@dataclass(frozen=True)
class ApplyConfig:
    trial: Path | None = None
    source: Path | None = None
    trial_in_source: bool = True
    crossfit_folds: int = 5
    schema: SchemaConfig | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 2024
    out: Path | None = None
    parallelism: int = 1
    dgp: DGPConfig = field(default_factory=DGPConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    grid: GridSection = field(default_factory=GridSection)
    forest: ForestConfig = field(default_factory=ForestConfig)
    weights: WeightConfig = field(default_factory=WeightConfig)
    estimators: tuple[dict, ...] | None = None
    apply: ApplyConfig = field(default_factory=ApplyConfig)

    def specs(self, default_sampler: str = "independent", default_models=None) -> list[EstimatorSpec]:
        """Estimator specs with the shared forest and weight settings filled in."""
        if self.estimators is None:
            models = default_models or ("M1", "M2", "M1_IPW", "M2_IPW")
            entries = [{"model": m, "aim": a} for a in ("A", "B") for m in models]
        else:
            entries = list(self.estimators)
        out = []
        for entry in entries:
            kw = {"conditional_sampler": default_sampler, **entry}
            out.append(EstimatorSpec(forest=self.forest, weight_cfg=self.weights, **kw))
        return out

    def default_schema(self) -> SchemaConfig:
        """Column roles of the files written by ``simulate``."""
        return SchemaConfig(
            X1=tuple(x1_names(self.dgp.dim_x1all)[: self.dgp.dim_x1]),
            X2=tuple(x2_names(self.dgp.dim_x2)),
            treatment=TREATMENT,
            outcome=OUTCOME,
            selection=SELECTION,
        )


_SPEC_KEYS = {f.name for f in dataclasses.fields(EstimatorSpec)} - {"forest", "weight_cfg"}


def _where(mapping: _Map, key=None) -> str:
    line = mapping.lines.get(key, mapping.line) if key is not None else mapping.line
    return f"line {line}"


def _section(value, name: str, parent: _Map | None = None) -> _Map:
    if not isinstance(value, _Map):
        at = f"{_where(parent, name)}: " if parent is not None else ""
        raise ConfigError(f"{at}section {name!r} must be a mapping")
    return value


def _build(cls, mapping: _Map, section: str, convert=None):
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for key, value in mapping.items():
        if key not in names:
            raise ConfigError(f"{_where(mapping, key)}: unknown key {key!r} in {section}")
        if isinstance(value, list):
            value = tuple(value)
        kw[key] = convert(key, value) if convert else value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_where(mapping)}: invalid {section}: {exc}") from None


def _existing(base: Path, key: str, value, mapping: _Map) -> Path:
    path = Path(str(value))
    if not path.is_absolute():
        path = base / path
    if not path.is_file():
        raise ConfigError(f"{_where(mapping, key)}: file not found: {path}")
    return path


TOP_KEYS = (
    "seed", "out", "parallelism", "dgp", "simulate", "grid",
    "forest", "weights", "estimators", "apply",
)


def parse_config(text: str, base_dir: str | os.PathLike = ".") -> RunConfig:
    """Parse YAML text into a :class:`RunConfig`."""
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError(f"{line}{exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(str(exc)) from None
    if doc is None:
        return RunConfig()
    doc = _section(doc, "top level")
    base = Path(base_dir)
    kw: dict[str, Any] = {}
    for key, value in doc.items():
        where = _where(doc, key)
        if key not in TOP_KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in ("seed", "parallelism"):
            if not isinstance(value, int) or isinstance(value, bool) or value < (0 if key == "seed" else 1):
                raise ConfigError(f"{where}: {key} must be a {'non-negative' if key == 'seed' else 'positive'} integer")
            kw[key] = value
        elif key == "out":
            kw[key] = Path(str(value))
        elif key == "dgp":
            kw[key] = _build(DGPConfig, _section(value, key, doc), key)
        elif key == "simulate":
            kw[key] = _build(SimulateConfig, _section(value, key, doc), key)
        elif key == "grid":
            kw[key] = _build(GridSection, _section(value, key, doc), key)
        elif key == "forest":
            kw[key] = _build(ForestConfig, _section(value, key, doc), key)
        elif key == "weights":
            kw[key] = _build(WeightConfig, _section(value, key, doc), key)
        elif key == "estimators":
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{where}: estimators must be a nonempty list")
            entries = []
            for item in value:
                item = _section(item, "estimators entry", doc)
                for k in item:
                    if k not in _SPEC_KEYS:
                        raise ConfigError(f"{_where(item, k)}: unknown key {k!r} in estimators entry")
                entry = {k: tuple(v) if isinstance(v, list) else v for k, v in item.items()}
                try:
                    EstimatorSpec(**entry)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{_where(item)}: invalid estimator: {exc}") from None
                entries.append(entry)
            kw[key] = tuple(entries)
        elif key == "apply":
            section = _section(value, key, doc)

            def convert(k, v, section=section):
                if k in ("trial", "source"):
                    return _existing(base, k, v, section)
                if k == "schema":
                    return _build(SchemaConfig, _section(v, "apply.schema", section), "apply.schema")
                return v

            kw[key] = _build(ApplyConfig, section, key, convert)
    return RunConfig(**kw)


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Read a config file; ``None`` gives the built-in defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return parse_config(text, base_dir=path.parent)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None

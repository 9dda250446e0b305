"""Experiment configuration: one INI file with a section per component.

Every value is stored as a JSON literal so lists, nulls and nested maps
survive the trip through the flat key-value format unchanged.
"""
from __future__ import annotations

import configparser
import io
import itertools
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import DatasetConfig
from .engine import MASK_METHODS, EngineConfig
from .models import TrainConfig
from .optim import derive_seed


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class SweepGrid:
    methods: tuple[str, ...] = ("xgem_plus", "dive", "random_masks", "fisher_chunks", "fisher_spectral")
    gamma: tuple[float, ...] = (0.0, 0.001, 0.1, 1.0)
    alpha: tuple[float, ...] = (0.0, 0.001, 0.1, 1.0)
    lam: tuple[float, ...] = (0.0001, 0.0005, 0.001)
    n: tuple[int, ...] = (2, 4, 8)
    lr: tuple[float, ...] = (0.05, 0.1)
    xgem_lr: tuple[float, ...] = (0.01, 0.05, 0.1)

    def validate(self) -> None:
        for f in fields(self):
            if not getattr(self, f.name):
                raise ConfigError(f"sweep.{f.name}: must list at least one value")
        for method in self.methods:
            try:
                EngineConfig(method=method).validate()
            except ValueError as exc:
                raise ConfigError(f"sweep.methods: {exc}") from None
        if any(not 1 <= n <= 15 for n in self.n):
            raise ConfigError("sweep.n: every value must lie in [1, 15]")
        for name in ("gamma", "alpha", "lam", "lr", "xgem_lr"):
            if any(v < 0 for v in getattr(self, name)):
                raise ConfigError(f"sweep.{name}: values must be non-negative")

    def points(self) -> list[dict]:
        """Distinct engine overrides, method by method.

        xGEM+ always runs with gamma = alpha = 0 over its wider learning-rate
        list; the masked methods ignore alpha, so it is recorded as 0 and
        not swept.
        """
        out, seen = [], set()
        for method in self.methods:
            if method == "xgem_plus":
                grid = itertools.product([0.0], [0.0], self.lam, self.n, self.xgem_lr)
            elif method in MASK_METHODS:
                grid = itertools.product(self.gamma, [0.0], self.lam, self.n, self.lr)
            else:
                grid = itertools.product(self.gamma, self.alpha, self.lam, self.n, self.lr)
            for gamma, alpha, lam, n, lr in grid:
                p = {"method": method, "gamma": gamma, "alpha": alpha, "lam": lam, "n": n, "lr": lr}
                key = row_key(p)
                if key not in seen:
                    seen.add(key)
                    out.append(p)
        return out


def row_key(point: dict, seed: int | None = None) -> str:
    parts = [point["method"]] + [f"{k}={point[k]!r}" for k in ("gamma", "alpha", "lam", "n", "lr")]
    if seed is not None:
        parts.append(f"seed={seed}")
    return "|".join(parts)


def row_seed(seed: int, key: str) -> int:
    return derive_seed(seed, key)


def _vae_defaults() -> TrainConfig:
    return TrainConfig()


def _classifier_defaults() -> TrainConfig:
    return TrainConfig(epochs=30)


@dataclass
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs"
    biased_rho: float = 1.0
    unbiased_rho: float = 0.0
    benchmark_wrong: int = 2
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    vae: TrainConfig = field(default_factory=_vae_defaults)
    classifier: TrainConfig = field(default_factory=_classifier_defaults)
    oracle: TrainConfig = field(default_factory=_classifier_defaults)
    engine: EngineConfig = field(default_factory=EngineConfig)
    sweep: SweepGrid = field(default_factory=SweepGrid)

    def validate(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ConfigError("experiment.seeds: must list at least one seed")
        for name in ("biased_rho", "unbiased_rho"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"experiment.{name}: {getattr(self, name)} outside [0, 1]")
        if self.benchmark_wrong < 0:
            raise ConfigError("experiment.benchmark_wrong: must be non-negative")
        for section in ("dataset", "engine"):
            try:
                getattr(self, section).validate()
            except ValueError as exc:
                raise ConfigError(f"{section}.{exc}") from None
        for section in ("vae", "classifier", "oracle"):
            try:
                getattr(self, section).validate(prefix=f"{section}.")
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        self.sweep.validate()
        return self

    def dataset_for(self, rho: float) -> DatasetConfig:
        return replace(self.dataset, bias_strength=rho)

    # -- serialisation ---------------------------------------------------
    def to_sections(self) -> dict[str, dict]:
        top = {k: getattr(self, k) for k in ("seeds", "out_dir", "biased_rho", "unbiased_rho", "benchmark_wrong")}
        return {
            "experiment": {**top, "seeds": list(self.seeds)},
            "dataset": self.dataset.to_dict(),
            "vae": self.vae.to_dict(),
            "classifier": self.classifier.to_dict(),
            "oracle": self.oracle.to_dict(),
            "engine": self.engine.to_dict(),
            "sweep": {k: list(v) for k, v in asdict(self.sweep).items()},
        }

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name, values in self.to_sections().items():
            parser[name] = {k: json.dumps(v) for k, v in values.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config syntax: {exc}") from None
        unknown = set(parser.sections()) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
        parts = {}
        for name, (kind, default) in _SECTIONS.items():
            raw = {}
            if parser.has_section(name):
                for key, value in parser[name].items():
                    try:
                        raw[key] = json.loads(value)
                    except json.JSONDecodeError:
                        raise ConfigError(f"{name}.{key}: {value!r} is not a JSON literal") from None
            parts[name] = _build(name, kind, default(), raw)
        top = parts.pop("experiment")
        return cls(**top, **parts)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())


_TOP_DEFAULTS = {k: getattr(ExperimentConfig, k) for k in ("seeds", "out_dir", "biased_rho", "unbiased_rho", "benchmark_wrong")}

_SECTIONS = {
    "experiment": (dict, lambda: dict(_TOP_DEFAULTS)),
    "dataset": (DatasetConfig, DatasetConfig),
    "vae": (TrainConfig, _vae_defaults),
    "classifier": (TrainConfig, _classifier_defaults),
    "oracle": (TrainConfig, _classifier_defaults),
    "engine": (EngineConfig, EngineConfig),
    "sweep": (SweepGrid, SweepGrid),
}


def _coerce(where: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float) or default is None:
        ok = value is None and default is None or isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok and value is not None else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
        if ok and default:
            value = tuple(_coerce(where, default[0], v) for v in value)
        elif ok:
            value = tuple(value)
    else:
        return value
    if not ok:
        raise ConfigError(f"{where}: {value!r} has the wrong type (expected {type(default).__name__})")
    return value


def _build(section: str, kind, default, raw: dict):
    current = default if isinstance(default, dict) else (
        default.to_dict() if hasattr(default, "to_dict") else asdict(default))
    for key in raw:
        if key not in current:
            raise ConfigError(f"{section}.{key}: unknown field")
    if kind is DatasetConfig:
        merged = {**current, **raw}
        base = DatasetConfig()
        for key, value in raw.items():
            if key not in ("style_assignment", "ood_shape_ids"):
                merged[key] = _coerce(f"{section}.{key}", getattr(base, key), value)
        try:
            return DatasetConfig.from_dict(merged)
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    reference = default if isinstance(default, dict) else {f.name: getattr(default, f.name) for f in fields(default)}
    values = {k: _coerce(f"{section}.{k}", reference[k], v) for k, v in raw.items()}
    if kind is dict:
        return {**default, **values}
    return replace(default, **values)

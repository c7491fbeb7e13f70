"""Run configuration files for the experiment CLI.

A run configuration is a TOML file with the sections ``[data]``, ``[split]``,
``[train]``, ``[output]`` and ``[study]``; every section and key is optional
and falls back to the desk-scale defaults. Unknown sections or keys and values
of the wrong type are rejected before anything is computed.
"""
from __future__ import annotations

import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from data_sources import (
    DatasetSource,
    FullDataset,
    SessionDataset,
    SplitConfig,
    SyntheticConfig,
    load_dataset,
    sessions_from_config,
)
from losses import Hyperparams
from metrics import FORMATS, LAYOUTS
from protocol import SHOT_GRID, STRATEGIES, SWEEP_GRID, TrainConfig

DATASET_SOURCES: tuple[str, ...] = ("synthetic", "embeddings")


class ConfigError(ValueError):
    """Raised when a run configuration is missing, malformed or invalid."""


@dataclass(frozen=True)
class DataConfig:
    source: DatasetSource = "synthetic"
    synthetic: SyntheticConfig = SyntheticConfig()
    path: Optional[str] = None
    test_path: Optional[str] = None
    holdout_per_class: int = 20

    def __post_init__(self) -> None:
        if self.source not in DATASET_SOURCES:
            raise ValueError(f"source must be one of {list(DATASET_SOURCES)}, got {self.source!r}")
        if self.source == "embeddings" and not self.path:
            raise ValueError("path is required when source is 'embeddings'")
        if self.holdout_per_class < 1:
            raise ValueError(f"holdout_per_class must be >= 1, got {self.holdout_per_class}")


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "results"
    format: str = "csv"
    layout: str = "results"

    def __post_init__(self) -> None:
        if self.format not in FORMATS:
            raise ValueError(f"format must be one of {list(FORMATS)}, got {self.format!r}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {list(LAYOUTS)}, got {self.layout!r}")
        if not self.dir:
            raise ValueError("dir must not be empty")

    @property
    def extension(self) -> str:
        return {"text": ".txt", "csv": ".csv", "json": ".json"}[self.format]


@dataclass(frozen=True)
class StudyConfig:
    strategies: tuple[str, ...] = STRATEGIES
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    gamma_grid: tuple[float, ...] = SWEEP_GRID
    alpha_grid: tuple[float, ...] = SWEEP_GRID
    shots: tuple[int, ...] = SHOT_GRID
    workers: int = 1
    gradcheck_configs: int = 100
    gradcheck_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("strategies", "seeds", "gamma_grid", "alpha_grid", "shots"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
            if not getattr(self, name):
                raise ValueError(f"{name} must not be empty")
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise ValueError(f"strategies must be drawn from {list(STRATEGIES)}, got {unknown}")
        for gamma in self.gamma_grid:
            for alpha in self.alpha_grid:
                Hyperparams(gamma=gamma, alpha=alpha)
        if any(seed < 0 for seed in self.seeds):
            raise ValueError("seeds must be >= 0")
        if any(k < 1 for k in self.shots):
            raise ValueError("shots must be >= 1")
        for name in ("workers", "gradcheck_configs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.gradcheck_seed < 0:
            raise ValueError("gradcheck_seed must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    split: SplitConfig = SplitConfig()
    train: TrainConfig = TrainConfig()
    output: OutputConfig = OutputConfig()
    study: StudyConfig = StudyConfig()
    source_path: Optional[str] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.data.source == "synthetic" and self.split.total_classes > self.data.synthetic.n_classes:
            raise ValueError(
                f"split needs {self.split.total_classes} classes but data.n_classes is {self.data.synthetic.n_classes}"
            )

    def with_seed(self, seed: int) -> "RunConfig":
        """Reseed data generation, the session split and training together."""

        return replace(
            self,
            data=replace(self.data, synthetic=replace(self.data.synthetic, seed=seed)),
            split=replace(self.split, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def manifest_sections(self) -> Dict[str, Dict[str, Any]]:
        data = {"source": self.data.source, **asdict(self.data.synthetic)}
        data.update(
            {"path": self.data.path, "test_path": self.data.test_path, "holdout_per_class": self.data.holdout_per_class}
        )
        train = asdict(self.train)
        train.pop("hyperparams")
        train.update({"gamma": self.train.hyperparams.gamma, "alpha": self.train.hyperparams.alpha})
        return {
            "data": data,
            "split": asdict(self.split),
            "train": train,
            "output": asdict(self.output),
            "study": asdict(self.study),
        }


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


_SCHEMA: Dict[str, Dict[str, str]] = {
    "data": {
        "source": "str",
        "input_dim": "int",
        "n_classes": "int",
        "train_per_class": "int",
        "test_per_class": "int",
        "separation": "float",
        "std": "float",
        "seed": "int",
        "path": "str",
        "test_path": "str",
        "holdout_per_class": "int",
    },
    "split": {
        "base_classes": "int",
        "n_way": "int",
        "k_shot": "int",
        "n_sessions": "int",
        "seed": "int",
        "class_order_seed": "int",
    },
    "train": {
        "epochs": "int",
        "batch_size": "int",
        "learning_rate": "float",
        "gamma": "float",
        "alpha": "float",
        "strategy": "str",
        "incremental_epochs": "int",
        "incremental_learning_rate": "float",
        "seed": "int",
        "hidden_widths": "int[]",
        "feature_dim": "int",
        "base_method": "str",
        "extractor": "str",
        "spl_head_init": "str",
    },
    "output": {"dir": "str", "format": "str", "layout": "str"},
    "study": {
        "strategies": "str[]",
        "seeds": "int[]",
        "gamma_grid": "float[]",
        "alpha_grid": "float[]",
        "shots": "int[]",
        "workers": "int",
        "gradcheck_configs": "int",
        "gradcheck_seed": "int",
    },
}

_SYNTHETIC_KEYS = ("input_dim", "n_classes", "train_per_class", "test_per_class", "separation", "std", "seed")


def _is_scalar(value: Any, kind: str) -> bool:
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    return isinstance(value, str)


def _check_value(section: str, key: str, value: Any) -> Any:
    kind = _SCHEMA[section][key]
    if kind.endswith("[]"):
        item_kind = kind[:-2]
        if not isinstance(value, list) or not all(_is_scalar(item, item_kind) for item in value):
            raise ConfigError(f"{section}.{key}: expected a list of {item_kind} values, got {value!r}")
        return tuple(float(v) if item_kind == "float" else v for v in value)
    if not _is_scalar(value, kind):
        raise ConfigError(f"{section}.{key}: expected {kind}, got {value!r}")
    return float(value) if kind == "float" else value


def _checked_sections(raw: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    sections: Dict[str, Dict[str, Any]] = {}
    for section, values in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"{section}: unknown section (expected one of {sorted(_SCHEMA)})")
        if not isinstance(values, dict):
            raise ConfigError(f"{section}: expected a table of key = value pairs")
        checked = {}
        for key, value in values.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
            checked[key] = _check_value(section, key, value)
        sections[section] = checked
    return sections


def _resolve(path: Optional[str], base_dir: Optional[Path]) -> Optional[str]:
    if path is None or base_dir is None or os.path.isabs(path):
        return path
    return str(base_dir / path)


def _build(section: str, factory: Any, values: Dict[str, Any]) -> Any:
    try:
        return factory(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def parse_run_config(raw: Mapping[str, Any], base_dir: Optional[Path] = None) -> RunConfig:
    sections = _checked_sections(raw)

    data_values = dict(sections.get("data", {}))
    synthetic = _build("data", SyntheticConfig, {k: data_values.pop(k) for k in _SYNTHETIC_KEYS if k in data_values})
    for key in ("path", "test_path"):
        if key in data_values:
            data_values[key] = _resolve(data_values[key], base_dir)
    data = _build("data", DataConfig, {"synthetic": synthetic, **data_values})

    split = _build("split", SplitConfig, sections.get("split", {}))

    train_values = dict(sections.get("train", {}))
    defaults = TrainConfig().hyperparams
    hp = _build(
        "train",
        Hyperparams,
        {"gamma": train_values.pop("gamma", defaults.gamma), "alpha": train_values.pop("alpha", defaults.alpha)},
    )
    train = _build("train", TrainConfig, {"hyperparams": hp, **train_values})

    output = _build("output", OutputConfig, sections.get("output", {}))
    study = _build("study", StudyConfig, sections.get("study", {}))
    return _build(
        "config",
        RunConfig,
        {"data": data, "split": split, "train": train, "output": output, "study": study},
    )


def load_run_config(path: str | os.PathLike[str] | None) -> RunConfig:
    """Read and validate ``path``; ``None`` gives the built-in defaults."""

    if path is None:
        return RunConfig()
    source = Path(path)
    try:
        with open(source, "rb") as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {source}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config file {source}: {exc}") from exc
    return replace(parse_run_config(raw, source.resolve().parent), source_path=str(source))


def apply_overrides(
    cfg: RunConfig,
    *,
    seed: Optional[int] = None,
    strategy: Optional[str] = None,
    gamma: Optional[float] = None,
    alpha: Optional[float] = None,
    out: Optional[str] = None,
    fmt: Optional[str] = None,
) -> RunConfig:
    """Command-line overrides on top of a loaded config, re-validated."""

    try:
        if seed is not None:
            cfg = cfg.with_seed(seed)
        if strategy is not None:
            cfg = replace(cfg, train=replace(cfg.train, strategy=strategy))
        if gamma is not None or alpha is not None:
            hp = cfg.train.hyperparams
            new_hp = Hyperparams(
                gamma=hp.gamma if gamma is None else gamma,
                alpha=hp.alpha if alpha is None else alpha,
            )
            cfg = replace(cfg, train=replace(cfg.train, hyperparams=new_hp))
        if out is not None:
            cfg = replace(cfg, output=replace(cfg.output, dir=out))
        if fmt is not None:
            cfg = replace(cfg, output=replace(cfg.output, format=fmt))
    except ValueError as exc:
        raise ConfigError(f"override: {exc}") from exc
    return cfg


def build_dataset(cfg: RunConfig) -> FullDataset:
    return load_dataset(
        cfg.data.source,
        synthetic=cfg.data.synthetic,
        path=cfg.data.path,
        test_path=cfg.data.test_path,
        test_per_class=cfg.data.holdout_per_class,
        seed=cfg.data.synthetic.seed,
    )


def build_sessions(cfg: RunConfig, dataset: Optional[FullDataset] = None) -> list[SessionDataset]:
    return sessions_from_config(dataset if dataset is not None else build_dataset(cfg), cfg.split)


__all__ = [
    "ConfigError",
    "DataConfig",
    "OutputConfig",
    "RunConfig",
    "StudyConfig",
    "apply_overrides",
    "build_dataset",
    "build_sessions",
    "load_run_config",
    "parse_run_config",
]

"""Experiment configuration: a single key/value-section text file that fully
determines a run, plus its content hash for artifact provenance."""

from __future__ import annotations

import configparser
import hashlib
import os
import tempfile
from dataclasses import dataclass, fields

from .exceptions import ConfigError
from .objective import TrainSchedule
from .synthdata import SyntheticSpec


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of one experiment; hashable for provenance."""

    seed: int = 0
    out_dir: str = "runs/default"
    data_dir: str = "data/synthetic"
    image_size: int = 48
    num_classes: int = 4
    train_count: int = 2000
    test_count: int = 400
    area_fraction_low: float = 0.07
    area_fraction_high: float = 0.22
    n_segments: int = 36
    compactness: float = 20.0
    embedding_dim: int = 3
    selector_width: int = 16
    classifier_width: int = 20
    lambda1: float = 10.0
    lambda2: float = 0.01
    tau_low: float = 0.05
    tau_high: float = 1.0
    temperature_start: float = 5.0
    temperature_end: float = 0.5
    sparsity_warmup_fraction: float = 0.3
    sparsity_delay_fraction: float = 0.2
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    checkpoint_every: int = 5
    delta: float = 0.99
    tau_step: float = 0.05
    cutoff: float = 0.5

    def data_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            image_size=self.image_size,
            num_classes=self.num_classes,
            train_count=self.train_count,
            test_count=self.test_count,
            area_fraction_low=self.area_fraction_low,
            area_fraction_high=self.area_fraction_high,
            seed=self.seed,
            n_segments=self.n_segments,
            compactness=self.compactness,
        )

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            tau_low=self.tau_low,
            tau_high=self.tau_high,
            temperature_start=self.temperature_start,
            temperature_end=self.temperature_end,
            sparsity_warmup_fraction=self.sparsity_warmup_fraction,
            sparsity_delay_fraction=self.sparsity_delay_fraction,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
        )

    def region_settings(self) -> dict:
        return {"n_segments": self.n_segments, "compactness": self.compactness}


_SECTIONS = {
    "run": ("seed", "out_dir", "data_dir"),
    "data": (
        "image_size",
        "num_classes",
        "train_count",
        "test_count",
        "area_fraction_low",
        "area_fraction_high",
    ),
    "regions": ("n_segments", "compactness"),
    "model": ("embedding_dim", "selector_width", "classifier_width"),
    "train": (
        "lambda1",
        "lambda2",
        "tau_low",
        "tau_high",
        "temperature_start",
        "temperature_end",
        "sparsity_warmup_fraction",
        "sparsity_delay_fraction",
        "epochs",
        "batch_size",
        "learning_rate",
        "checkpoint_every",
    ),
    "policy": ("delta", "tau_step", "cutoff"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def config_to_text(config: ExperimentConfig) -> str:
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {getattr(config, key)}")
        lines.append("")
    return "\n".join(lines)


def config_hash(config: ExperimentConfig) -> str:
    canonical = "\n".join(
        f"{f.name}={getattr(config, f.name)!r}" for f in fields(ExperimentConfig)
    )
    return hashlib.sha256(canonical.encode()).hexdigest()


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        return raw
    except ValueError as err:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from err


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a config file; unknown keys are rejected to catch typos."""
    parser = configparser.ConfigParser()
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as handle:
        parser.read_file(handle)
    values: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _coerce(key, raw)
    if overrides:
        values.update(overrides)
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def default_config(overrides: dict | None = None) -> ExperimentConfig:
    try:
        return ExperimentConfig(**(overrides or {}))
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def write_config(config: ExperimentConfig, path) -> None:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "w") as handle:
        handle.write(config_to_text(config))
    os.replace(tmp_path, path)

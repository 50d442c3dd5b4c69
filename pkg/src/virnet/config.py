"""Experiment configuration: one JSON document, strictly validated."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .degradation import TASKS
from .errors import ContractError
from .networks import NetworkConfig
from .priors import HyperParams, default_hyperparams
from .training import TrainConfig


class ConfigError(ContractError):
    pass


def _build(cls, raw, where: str):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


@dataclass
class ExperimentConfig:
    task: str = "denoise"
    seed: int = 0
    output_dir: str = "runs/default"
    hyperparams: HyperParams | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig | None = None
    test_synth: SynthConfig | None = None
    train_manifest: str | None = None
    test_manifest: str | None = None
    kernel_embedding_dims: int = 8
    val_every: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.hyperparams is None:
            self.hyperparams = default_hyperparams(self.task)
        for name in ("synth", "test_synth"):
            sc = getattr(self, name)
            if sc is not None and sc.task != self.task:
                raise ConfigError(f"{name}.task {sc.task!r} differs from task {self.task!r}")

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def train_manifest_path(self) -> Path:
        return Path(self.train_manifest) if self.train_manifest else self.out / "data" / "train" / "manifest.json"

    def test_manifest_path(self) -> Path:
        return Path(self.test_manifest) if self.test_manifest else self.out / "data" / "test" / "manifest.json"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"hyperparams": HyperParams, "network": NetworkConfig, "train": TrainConfig,
             "synth": SynthConfig, "test_synth": SynthConfig}


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    kw = dict(raw)
    task = kw.get("task", "denoise")
    for key, cls in _SECTIONS.items():
        if key in kw:
            section = kw[key]
            if cls is SynthConfig and isinstance(section, dict):
                section = {"task": task, **section}
            kw[key] = _build(cls, section, key)
    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(raw)

"""Experiment configuration: one JSON document, validated before any work starts."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .data import CorruptionSpec, MultiViewDataset, load_dataset, synth_gaussian_multiview
from .losses import LossConfig
from .model import FUSION_KINDS, ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


@dataclass
class ModelSection:
    """Model settings that do not depend on the data; view input widths come from the dataset."""

    encoder_hidden: list = field(default_factory=lambda: [64, 64])
    common_dim: int = 32
    fusion_kind: str = "residual"
    fusion_layers: int = 2
    dropout_p: float = 0.1
    projection_widths: Optional[list] = None
    clustering_hidden_width: int = 128
    clusters: Optional[int] = None
    swap_block_widths: bool = False
    mapping_activation: bool = False

    def validate(self) -> list[str]:
        errors = []
        if self.fusion_kind not in FUSION_KINDS:
            errors.append(f"model.fusion_kind must be one of {FUSION_KINDS}, got {self.fusion_kind!r}")
        if any(not isinstance(w, int) or w < 1 for w in self.encoder_hidden):
            errors.append(f"model.encoder_hidden must hold positive ints, got {self.encoder_hidden}")
        if self.fusion_layers < 1:
            errors.append(f"model.fusion_layers must be >= 1, got {self.fusion_layers}")
        if self.common_dim < 2:
            errors.append(f"model.common_dim must be >= 2, got {self.common_dim}")
        if not 0.0 <= self.dropout_p < 1.0:
            errors.append(f"model.dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.clusters is not None and self.clusters < 2:
            errors.append(f"model.clusters must be >= 2, got {self.clusters}")
        return errors

    def build(self, dataset: MultiViewDataset) -> ModelConfig:
        k = self.clusters or dataset.n_classes
        return ModelConfig(
            encoder_widths=[[d, *self.encoder_hidden, self.common_dim] for d in dataset.dims],
            common_dim=self.common_dim,
            clusters=k,
            fusion_kind=self.fusion_kind,
            fusion_layers=self.fusion_layers,
            dropout_p=self.dropout_p,
            projection_widths=self.projection_widths,
            clustering_hidden_width=self.clustering_hidden_width,
            swap_block_widths=self.swap_block_widths,
            mapping_activation=self.mapping_activation,
        )


@dataclass
class SynthSection:
    k: int = 3
    n: int = 600
    views: int = 2
    dims: list = field(default_factory=lambda: [10, 10])
    noise: float = 1.0
    separation: float = 3.0
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.k < 2:
            errors.append(f"data.synth.k must be >= 2, got {self.k}")
        if len(self.dims) != self.views:
            errors.append(f"data.synth.dims needs {self.views} entries, got {self.dims}")
        if self.n < self.k:
            errors.append(f"data.synth.n must be >= k, got {self.n}")
        return errors

    def build(self) -> MultiViewDataset:
        return synth_gaussian_multiview(self.k, self.n, self.views, self.dims, self.noise, self.separation, self.seed)


@dataclass
class DataSection:
    manifest: Optional[str] = None
    synth: Optional[SynthSection] = None

    def validate(self) -> list[str]:
        if (self.manifest is None) == (self.synth is None):
            return ["data: give exactly one of 'manifest' or 'synth'"]
        return self.synth.validate() if self.synth else []

    def load(self) -> MultiViewDataset:
        return load_dataset(self.manifest) if self.manifest else self.synth.build()


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=lambda: DataSection(synth=SynthSection()))
    corruption: Optional[CorruptionSpec] = None
    output_dir: str = "runs/default"

    def validate(self) -> list[str]:
        errors = self.model.validate() + self.data.validate()
        errors += [f"loss: {e}" for e in self.loss.validate()]
        errors += [f"train: {e}" for e in self.train.validate()]
        if self.corruption is not None:
            errors += [f"corruption: {e}" for e in self.corruption.validate()]
        return errors

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        errors: list[str] = []
        cfg = _build(cls, doc, "", errors)
        # values that failed type checks were dropped, so validation still
        # reports every remaining semantic problem in the same pass
        errors += cfg.validate()
        if errors:
            raise ConfigError(errors)
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED = {
    ("ExperimentConfig", "model"): ModelSection,
    ("ExperimentConfig", "loss"): LossConfig,
    ("ExperimentConfig", "train"): TrainConfig,
    ("ExperimentConfig", "data"): DataSection,
    ("ExperimentConfig", "corruption"): CorruptionSpec,
    ("DataSection", "synth"): SynthSection,
}

_TYPES = {int: (int,), float: (int, float), bool: (bool,), str: (str,), list: (list,), tuple: (list, tuple)}


def _check_type(value: Any, default: Any, where: str, errors: list[str]) -> bool:
    if value is None or default is None:
        return True
    expected = _TYPES.get(type(default))
    if expected is None:
        return True
    ok = isinstance(value, expected) and not (isinstance(value, bool) and bool not in expected)
    if not ok:
        errors.append(f"{where}: expected {type(default).__name__}, got {type(value).__name__}")
    return ok


def _build(cls, doc: Any, prefix: str, errors: list[str]):
    if not isinstance(doc, dict):
        errors.append(f"{prefix or 'config'}: expected an object")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in fields:
            errors.append(f"{prefix}{key}: unknown key")
    kwargs = {}
    defaults = cls()
    for name in fields:
        if name not in doc:
            continue
        value = doc[name]
        sub = _NESTED.get((cls.__name__, name))
        if sub is not None and value is not None:
            value = _build(sub, value, f"{prefix}{name}.", errors)
        elif not _check_type(value, getattr(defaults, name, None), f"{prefix}{name}", errors):
            continue
        else:
            if name == "betas" and isinstance(value, list):
                value = tuple(value)
        kwargs[name] = value
    if cls is DataSection and kwargs:
        kwargs.setdefault("manifest", None)
        kwargs.setdefault("synth", None)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{prefix or 'config'}: {exc}")
        return cls()

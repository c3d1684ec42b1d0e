"""Flat experiment configuration.

Config files are flat JSON objects. Every key is listed in ``KEYS`` with its
default and help text; unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from ..steering import GRANULARITIES, TrainConfig
from ..subspace import ExtractionConfig
from ..toymodel import ModelConfig
from .tasks import AttributeTaskSpec

ALIGNMENTS = ("reft", "svd_fixed", "full")
PLACEMENTS = ("last", "important")


class ConfigError(ValueError):
    pass


KEYS: dict[str, str] = {
    "vocab_size": "model vocabulary size",
    "d_model": "hidden width d",
    "n_layers": "number of transformer blocks",
    "n_heads": "attention heads (must divide d_model)",
    "max_seq_len": "longest accepted sequence",
    "model_seed": "seed for the frozen model weights",
    "n_attributes": "number of attributes",
    "samples_per_attribute": "samples generated per attribute",
    "seq_len": "token sequence length (model path)",
    "shared_rank": "planted shared rank (linalg path)",
    "private_ranks": "planted private rank per attribute (int or list)",
    "noise_sigma": "Gaussian noise std (linalg path)",
    "shared_scale": "magnitude of planted attribute means",
    "private_scale": "std of planted private coefficients",
    "n_labels": "size of the gold label set (model path)",
    "label_layer": "layer whose last-token state defines gold labels",
    "train_fraction": "per-attribute train share of the seeded split",
    "data_seed": "seed for dataset generation",
    "threshold": "energy fraction for rank selection",
    "energy": "energy measure: sigma | sigma_squared",
    "residual_source": "private residual from: mean | samples",
    "cross_orthogonalize": "orthogonalise private blocks against earlier ones",
    "max_total_rank": "cap on total subspace rank (null = no cap)",
    "layer": "intervention layer (0-based block output)",
    "granularity": "gating: same | attribute | rank",
    "alignment": "reft | svd_fixed | full",
    "lambda1": "weight of the mask regulariser",
    "lambda2": "weight of the alignment loss",
    "lr": "Adam learning rate",
    "steps": "training steps",
    "batch_size": "samples per step",
    "seed": "training seed (init and data order)",
    "train_position": "training intervention position: last | important",
    "placement": "evaluation placement: last | important",
}


@dataclass(frozen=True)
class ExperimentConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 32
    model_seed: int = 42
    n_attributes: int = 2
    samples_per_attribute: int = 256
    seq_len: int = 8
    shared_rank: int = 2
    private_ranks: int | tuple = 2
    noise_sigma: float = 0.01
    shared_scale: float = 3.0
    private_scale: float = 3.0
    n_labels: int = 4
    label_layer: int = 1
    train_fraction: float = 0.8
    data_seed: int = 0
    threshold: float = 0.90
    energy: str = "sigma"
    residual_source: str = "samples"
    cross_orthogonalize: bool = False
    max_total_rank: int | None = 8
    layer: int = 1
    granularity: str = "attribute"
    alignment: str = "full"
    lambda1: float = 0.3
    lambda2: float = 0.5
    lr: float = 5e-3
    steps: int = 200
    batch_size: int = 2
    seed: int = 42
    train_position: str = "last"
    placement: str = "last"

    def __post_init__(self):
        if isinstance(self.private_ranks, list):
            object.__setattr__(self, "private_ranks", tuple(self.private_ranks))
        for key, allowed in (
            ("granularity", GRANULARITIES),
            ("alignment", ALIGNMENTS),
            ("placement", PLACEMENTS),
            ("train_position", PLACEMENTS),
            ("energy", ("sigma", "sigma_squared")),
            ("residual_source", ("mean", "samples")),
        ):
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        try:
            self.model_config()
            self.task_spec()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if not 0 <= self.layer < self.n_layers:
            raise ConfigError(f"layer {self.layer} outside [0, {self.n_layers})")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(read_flat(path))

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["private_ranks"], tuple):
            d["private_ranks"] = list(d["private_ranks"])
        return d

    def replace(self, **kw) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **kw})

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_seq_len, self.model_seed)

    def task_spec(self) -> AttributeTaskSpec:
        return AttributeTaskSpec(
            n_attributes=self.n_attributes,
            samples_per_attribute=self.samples_per_attribute,
            seq_len=self.seq_len,
            shared_rank=self.shared_rank,
            private_ranks=self.private_ranks,
            noise_sigma=self.noise_sigma,
            shared_scale=self.shared_scale,
            private_scale=self.private_scale,
            n_labels=self.n_labels,
            label_layer=self.label_layer,
            train_fraction=self.train_fraction,
            seed=self.data_seed,
        )

    def extraction(self) -> ExtractionConfig:
        return ExtractionConfig(
            self.threshold, self.energy, self.residual_source, self.cross_orthogonalize, self.max_total_rank
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.steps, self.lr, self.batch_size, self.seed, self.train_position)


def read_flat(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: nested values are not allowed (keys {nested})")
    return data


def describe_keys() -> str:
    defaults = ExperimentConfig().to_dict()
    width = max(map(len, KEYS))
    return "\n".join(f"  {k:<{width}}  {KEYS[k]} (default: {json.dumps(defaults[k])})" for k in KEYS)

"""Run configuration: every default is materialised and serialised next to outputs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffengine import config_hash


@dataclass
class ModelConfig:
    latent_dim: int = 8
    cond_hidden: int = 256
    cond_dim: int = 256
    cond_layers: int = 4
    vae_width: int = 256
    vae_blocks: int = 4
    vae_heads: int = 8
    dit_width: int = 256
    dit_blocks: int = 6
    dit_heads: int = 8
    mlp_ratio: int = 4
    bias_mode: str = "per_head"       # per_head | scalar | none
    bias_hidden: int = 32
    attn_scale: str = "num_heads"     # num_heads | head_dim (denoiser attention)
    n_datasets: int = 2               # dataset-embedding rows; id 0 is the polymer set

    def __post_init__(self):
        if self.bias_mode not in ("per_head", "scalar", "none"):
            raise ValueError(f"bias_mode must be per_head, scalar or none; got {self.bias_mode!r}")
        if self.attn_scale not in ("num_heads", "head_dim"):
            raise ValueError(f"attn_scale must be num_heads or head_dim; got {self.attn_scale!r}")


@dataclass
class LossWeights:
    bbox: float = 1.0
    frac_coords: float = 10.0
    pos: float = 1.0
    kl: float = 1e-5
    bond: float = 1.0
    angle: float = 0.1
    dihedral: float = 0.01

    def __post_init__(self):
        for k, v in dataclasses.asdict(self).items():
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"loss weight {k} must be finite and nonnegative, got {v}")


@dataclass
class TrainConfig:
    epochs: int = 300
    max_steps: int | None = None
    batch_size: int = 32
    lr: float = 1e-3
    lr_min: float = 1e-5
    warmup_steps: int = 100
    schedule: str = "cosine"          # cosine | constant
    clip_norm: float | None = 1.0
    upsample: int = 30
    augment: bool = True
    val_every: int | None = None      # steps between validations; default once per epoch
    self_cond_prob: float = 0.5       # denoiser only
    t_clip: float = 0.9               # denoiser only
    max_bad_steps: int = 3


@dataclass
class SampleConfig:
    steps: int = 100
    n_per_input: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    datasets: list = field(default_factory=list)   # manifest paths; the first is the polymer set
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    vae_train: TrainConfig = field(default_factory=TrainConfig)
    dit_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=500))
    sample: SampleConfig = field(default_factory=SampleConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        nested = {
            "model": ModelConfig, "weights": LossWeights, "vae_train": TrainConfig,
            "dit_train": TrainConfig, "sample": SampleConfig,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in nested:
                sub = nested[key]
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = set(value or {}) - sub_known
                if bad:
                    raise ValueError(f"unknown keys in {key}: {sorted(bad)}")
                base = cls().__getattribute__(key)
                merged = {**dataclasses.asdict(base), **(value or {})}
                kwargs[key] = sub(**merged)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

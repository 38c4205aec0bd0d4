"""Model, encoder, tiling and training hyperparameters plus the shipped presets."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import tomlkit

DEFAULT_SEED = 1234
SEED_ENV = "NVLM_MICRO_SEED"
PRESETS = ("toy", "bench", "paper-72b")


class ConfigError(ValueError):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


@dataclass
class EncoderConfig:
    tile_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 16
    depth: int = 1
    n_heads: int = 2
    shuffle_factor: int = 2
    frozen: bool = True

    def __post_init__(self):
        if self.tile_size % self.patch_size:
            raise ConfigError(f"tile_size {self.tile_size} not divisible by patch_size {self.patch_size}")
        if not self.frozen:
            raise ConfigError("the vision encoder is always frozen")
        if self.grid % self.shuffle_factor:
            raise ConfigError(f"token grid {self.grid} not divisible by shuffle factor {self.shuffle_factor}")

    @property
    def grid(self) -> int:
        return self.tile_size // self.patch_size

    @property
    def raw_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def tokens_per_tile(self) -> int:
        return self.raw_tokens // (self.shuffle_factor ** 2)

    @property
    def shuffled_dim(self) -> int:
        return self.embed_dim * self.shuffle_factor ** 2


@dataclass
class ArchConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    mlp_ratio: int = 4
    xattn_every: int = 2
    n_xattn: int = 2
    projector_hidden: int = 64
    max_seq_len: int = 256
    max_tiles: int = 6
    tag_scheme: str = "1d"
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.xattn_every < 1 or self.n_layers % self.xattn_every:
            raise ConfigError(f"n_layers {self.n_layers} not a multiple of xattn_every {self.xattn_every}")
        if self.n_layers // self.xattn_every != self.n_xattn:
            raise ConfigError(
                f"n_layers / xattn_every = {self.n_layers // self.xattn_every}, but n_xattn = {self.n_xattn}"
            )

    def xattn_after(self) -> list[int]:
        """Indices of the self-attention blocks followed by a cross-attention layer."""
        return [i for i in range(self.n_layers) if (i + 1) % self.xattn_every == 0]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    min_lr: float | None = None
    warmup_steps: int = 0
    schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    steps: int = 2000
    batch_size: int = 8
    stage: int = 2
    target_loss: float = 0.05

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "cosine":
            lo = self.min_lr if self.min_lr is not None else 0.0
            span = max(1, self.steps - self.warmup_steps)
            t = min(1.0, (step - self.warmup_steps) / span)
            return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * t))
        raise ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass
class TilingConfig:
    max_tiles: int = 6
    thumbnail: bool = True
    text_len: int = 32


@dataclass
class Config:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    train_sft: TrainConfig | None = None
    seed: int = DEFAULT_SEED
    name: str = "toy"

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.name, "seed": self.seed}
        for key in ("encoder", "arch", "train", "tiling", "train_sft"):
            val = getattr(self, key)
            if val is not None:
                out[key] = {k: v for k, v in dataclasses.asdict(val).items() if v is not None}
        return out

    def dumps(self) -> str:
        return tomlkit.dumps(self.to_dict())


_SECTIONS = {
    "encoder": EncoderConfig,
    "arch": ArchConfig,
    "train": TrainConfig,
    "tiling": TilingConfig,
    "train_sft": TrainConfig,
}


def _build(cls, table: dict[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    return cls(**table)


def from_dict(doc: dict[str, Any]) -> Config:
    kwargs: dict[str, Any] = {}
    for key, val in doc.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], dict(val), key)
        elif key in ("seed", "name"):
            kwargs[key] = val
        else:
            raise ConfigError(f"unknown config section {key!r}")
    return Config(**kwargs)


def loads(text: str) -> Config:
    return from_dict(tomlkit.parse(text).unwrap())


def load(source: str | Path | None = None) -> Config:
    """Load a preset by name or a TOML file by path; ``None`` gives the toy preset."""
    if source is None:
        source = "toy"
    if str(source) in PRESETS:
        text = resources.files("nvlm_micro.configs").joinpath(f"{source}.toml").read_text()
    else:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
    return loads(text)

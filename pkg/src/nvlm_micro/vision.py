"""Frozen toy patch encoder, pixel shuffle, and the modality-alignment projectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import ShapeError, Tensor
from .config import EncoderConfig
from .tiler import Image

Source = Union[int, str]  # tile index, or "thumbnail"
THUMBNAIL = "thumbnail"


@dataclass(frozen=True)
class ImageSlot:
    """A placeholder run of image tokens in a sequence."""

    source: Source
    n_tokens: int


@dataclass(frozen=True)
class TokenBlock:
    grid: tuple[int, int]
    data: Tensor
    source: Source = 0

    def __post_init__(self):
        h, w = self.grid
        if len(self.data.shape) != 2 or self.data.shape[0] != h * w:
            raise ShapeError(f"token block data {self.data.shape} does not fit grid {self.grid}")

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def slot(self) -> ImageSlot:
        return ImageSlot(self.source, self.n_tokens)


def _shuffle_index(h: int, w: int, c: int, factor: int) -> np.ndarray:
    # (i, dy, j, dx, ch) -> (i, j, dy, dx, ch): TL, TR, BL, BR for factor 2
    idx = np.arange(h * w * c).reshape(h // factor, factor, w // factor, factor, c)
    return idx.transpose(0, 2, 1, 3, 4).reshape((h // factor) * (w // factor), factor * factor * c)


def pixel_shuffle(b: TokenBlock, factor: int = 2) -> TokenBlock:
    """Merge each ``factor x factor`` token neighbourhood into one token.

    Channels are concatenated in row-major neighbourhood order (top-left,
    top-right, bottom-left, bottom-right for factor 2).
    """
    h, w = b.grid
    if h % factor or w % factor:
        raise ValueError(f"grid {b.grid} not divisible by shuffle factor {factor}")
    index = _shuffle_index(h, w, b.channels, factor)
    return TokenBlock((h // factor, w // factor), ad.permute(b.data, index), b.source)


def pixel_unshuffle(b: TokenBlock, factor: int = 2) -> TokenBlock:
    h, w = b.grid
    c = b.channels // (factor * factor)
    if c * factor * factor != b.channels:
        raise ValueError(f"{b.channels} channels not divisible by {factor * factor}")
    fwd = _shuffle_index(h * factor, w * factor, c, factor).reshape(-1)
    inverse = np.empty_like(fwd)
    inverse[fwd] = np.arange(fwd.size)
    index = inverse.reshape(h * factor * w * factor, c)
    return TokenBlock((h * factor, w * factor), ad.permute(b.data, index), b.source)


def patchify(tile: Image, patch: int) -> np.ndarray:
    """``(grid*grid, patch*patch*C)`` rows, patches row-major, pixels (y, x, c) within."""
    px = tile.pixels
    g = tile.height // patch
    return (
        px.reshape(g, patch, g, patch, tile.channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, patch * patch * tile.channels)
    )


class VisionEncoder:
    """Seed-pinned mini-ViT standing in for the real frozen encoder."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0])
        d = cfg.embed_dim
        p: layers.Params = {}
        layers.init_linear(p, "vision.patch", rng, cfg.patch_size ** 2 * cfg.channels, d, 0.2, False)
        p["vision.pos"] = Tensor(rng.normal(0.0, 0.2, (cfg.raw_tokens, d)), False, "vision.pos")
        for i in range(cfg.depth):
            layers.init_block(p, f"vision.block{i}", rng, d, 2, 0.2, False)
        layers.init_norm(p, "vision.ln_f", d, False)
        self.params = p

    def encode_tile(self, tile: Image, source: Source = 0) -> TokenBlock:
        cfg = self.cfg
        if (tile.width, tile.height) != (cfg.tile_size, cfg.tile_size) or tile.channels != cfg.channels:
            raise ShapeError(
                f"encoder expects {cfg.tile_size}x{cfg.tile_size}x{cfg.channels} tiles, "
                f"got {tile.width}x{tile.height}x{tile.channels}"
            )
        p = self.params
        x = Tensor(patchify(tile, cfg.patch_size) * 2.0 - 1.0)
        x = ad.add(layers.dense(p, "vision.patch", x), p["vision.pos"])
        for i in range(cfg.depth):
            x = layers.block(p, f"vision.block{i}", x, cfg.n_heads, None)
        x = layers.norm(p, "vision.ln_f", x)
        return TokenBlock((cfg.grid, cfg.grid), x, source)

    def encode(self, tile: Image, source: Source = 0) -> TokenBlock:
        """Encode one tile and pixel-shuffle it down to ``tokens_per_tile`` tokens."""
        return pixel_shuffle(self.encode_tile(tile, source), self.cfg.shuffle_factor)


def init_projector_d(params: layers.Params, rng, n_in: int, hidden: int, n_out: int, std: float) -> None:
    layers.init_linear(params, "proj_d.fc1", rng, n_in, hidden, std)
    layers.init_linear(params, "proj_d.fc2", rng, hidden, n_out, std)


def init_projector_x(params: layers.Params, rng, n_in: int, n_out: int, std: float) -> None:
    layers.init_linear(params, "proj_x", rng, n_in, n_out, std)


def _check_width(b: TokenBlock, w: Tensor, which: str) -> None:
    if b.channels != w.shape[0]:
        raise ShapeError(f"{which}: block has {b.channels} channels, projector expects {w.shape[0]}")


def project_d(b: TokenBlock, params: layers.Params) -> TokenBlock:
    """Two-layer GELU MLP into the language model width."""
    _check_width(b, params["proj_d.fc1.w"], "project_d")
    return TokenBlock(b.grid, layers.mlp(params, "proj_d", b.data), b.source)


def project_x(b: TokenBlock, params: layers.Params) -> TokenBlock:
    """Single affine map into the language model width."""
    _check_width(b, params["proj_x.w"], "project_x")
    return TokenBlock(b.grid, layers.dense(params, "proj_x", b.data), b.source)

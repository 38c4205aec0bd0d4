"""Causal decoder backbone with optional gated cross-attention layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import ShapeError, Tensor
from .config import ArchConfig


def build_x_mask(tag_spans: Sequence[tuple[int, int]], n_positions: int, tiles: int,
                 tokens_per_tile: int | Sequence[int]) -> np.ndarray:
    """Boolean ``[n_positions, kv_len]`` cross-attention mask.

    Rows inside tag span ``k`` see exactly the kv block of tile ``k``; every
    other row sees the whole kv stream.  ``tokens_per_tile`` may be a list of
    per-block sizes.
    """
    sizes = [tokens_per_tile] * tiles if isinstance(tokens_per_tile, int) else list(tokens_per_tile)
    if len(sizes) != tiles:
        raise ValueError(f"{len(sizes)} block sizes for {tiles} tiles")
    if tiles == 0:
        return np.zeros((n_positions, 0), dtype=bool)
    if len(tag_spans) > tiles:
        raise ValueError(f"{len(tag_spans)} tag spans for {tiles} tiles")
    ordered = sorted((s for s in tag_spans if s[1] > s[0]))
    for (a0, a1), (b0, b1) in zip(ordered, ordered[1:]):
        if b0 < a1:
            raise ValueError(f"tag spans {(a0, a1)} and {(b0, b1)} overlap")
    bounds = np.cumsum([0] + sizes)
    mask = np.ones((n_positions, int(bounds[-1])), dtype=bool)
    for k, (start, stop) in enumerate(tag_spans):
        if start < 0 or stop > n_positions:
            raise ValueError(f"tag span {(start, stop)} outside {n_positions} positions")
        mask[start:stop] = False
        mask[start:stop, bounds[k]:bounds[k + 1]] = True
    return mask


@dataclass
class CrossContext:
    """Key/value stream for the cross-attention layers."""

    kv: Tensor | None
    mask: np.ndarray | None = None

    @property
    def empty(self) -> bool:
        return self.kv is None or self.kv.shape[0] == 0


def init_backbone(params: layers.Params, cfg: ArchConfig, vocab: int, rng: np.random.Generator) -> None:
    d, std = cfg.d_model, cfg.init_std
    params["backbone.tok_emb"] = Tensor(rng.normal(0.0, std, (vocab, d)), True, "backbone.tok_emb")
    params["backbone.pos_emb"] = Tensor(rng.normal(0.0, std, (cfg.max_seq_len, d)), True, "backbone.pos_emb")
    for i in range(cfg.n_layers):
        layers.init_block(params, f"backbone.block{i}", rng, d, cfg.mlp_ratio, std)
    layers.init_norm(params, "backbone.ln_f", d)
    layers.init_linear(params, "backbone.head", rng, d, vocab, std)


def init_xattn(params: layers.Params, cfg: ArchConfig, rng: np.random.Generator) -> None:
    d, std = cfg.d_model, cfg.init_std
    for j in range(cfg.n_xattn):
        p = f"xattn{j}"
        layers.init_norm(params, f"{p}.ln1", d)
        layers.init_attention(params, f"{p}.attn", rng, d, std)
        layers.init_norm(params, f"{p}.ln2", d)
        layers.init_mlp(params, f"{p}.mlp", rng, d, d * cfg.mlp_ratio, std)
        params[f"{p}.gate_attn"] = Tensor(np.zeros(1), True, f"{p}.gate_attn")
        params[f"{p}.gate_mlp"] = Tensor(np.zeros(1), True, f"{p}.gate_mlp")


def self_attention_block(params: layers.Params, prefix: str, x: Tensor, n_heads: int) -> Tensor:
    if x.shape[0] < 1:
        raise ShapeError("self-attention needs at least one position")
    return layers.block(params, prefix, x, n_heads, layers.causal_mask(x.shape[0]))


def gated_xattn(params: layers.Params, prefix: str, x: Tensor, ctx: CrossContext, n_heads: int) -> Tensor:
    """``x + tanh(g_attn)*XAttn(x, kv) `` then ``+ tanh(g_mlp)*MLP``.

    With no kv tokens the layer is skipped entirely (gate off).
    """
    if ctx.empty:
        return x
    mask = ctx.mask
    if mask is not None and mask.shape != (x.shape[0], ctx.kv.shape[0]):
        raise ShapeError(f"x-attn mask {mask.shape} vs text {x.shape[0]} and kv {ctx.kv.shape[0]}")
    a = layers.attention(params, f"{prefix}.attn", layers.norm(params, f"{prefix}.ln1", x), ctx.kv,
                         n_heads, mask)
    if mask is not None:
        # rows that may not see any image token get no contribution at all
        dead = ~mask.any(axis=1)
        if dead.any():
            keep = np.repeat((~dead)[:, None].astype(np.float64), a.shape[1], axis=1)
            a = ad.mul(a, Tensor(keep))
    x = ad.add(x, ad.scale_by(a, ad.tanh(params[f"{prefix}.gate_attn"])))
    m = layers.mlp(params, f"{prefix}.mlp", layers.norm(params, f"{prefix}.ln2", x))
    return ad.add(x, ad.scale_by(m, ad.tanh(params[f"{prefix}.gate_mlp"])))


def embed(params: layers.Params, ids: Sequence[int], images: dict[int, Tensor] | None = None) -> Tensor:
    """Token embeddings with image rows spliced in at the given start positions."""
    images = images or {}
    table = params["backbone.tok_emb"]
    parts: list[Tensor] = []
    run_start = 0
    n = len(ids)
    starts = sorted(images)
    for s in starts:
        if s > run_start:
            parts.append(ad.take_rows(table, ids[run_start:s]))
        parts.append(images[s])
        run_start = s + images[s].shape[0]
    if run_start < n:
        parts.append(ad.take_rows(table, ids[run_start:n]))
    x = ad.concat_rows(parts)
    if x.shape[0] != n:
        raise ShapeError(f"embedded {x.shape[0]} rows for {n} positions")
    return x


def decode(params: layers.Params, cfg: ArchConfig, x: Tensor, ctx: CrossContext | None = None) -> Tensor:
    """Run the stack on embedded inputs ``x`` and return logits."""
    n = x.shape[0]
    if n > cfg.max_seq_len:
        raise ShapeError(f"sequence of {n} exceeds max_seq_len {cfg.max_seq_len}")
    x = ad.add(x, ad.slice_rows(params["backbone.pos_emb"], 0, n))
    after = set(cfg.xattn_after()) if ctx is not None and "xattn0.gate_attn" in params else set()
    j = 0
    for i in range(cfg.n_layers):
        x = self_attention_block(params, f"backbone.block{i}", x, cfg.n_heads)
        if i in after:
            x = gated_xattn(params, f"xattn{j}", x, ctx, cfg.n_heads)
            j += 1
    x = layers.norm(params, "backbone.ln_f", x)
    return layers.dense(params, "backbone.head", x)


def forward_text_only(params: layers.Params, cfg: ArchConfig, ids: Sequence[int]) -> Tensor:
    """Backbone alone: no image rows, no cross-attention."""
    return decode(params, cfg, embed(params, ids), None)

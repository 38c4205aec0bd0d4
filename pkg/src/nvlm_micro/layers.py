"""Parameter initialisation and the transformer building blocks shared by the
vision stub and the decoder.

Parameters live in flat ``dict[str, Tensor]`` stores keyed by dotted names;
each function takes the store plus a name prefix.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


def init_linear(params: Params, prefix: str, rng: np.random.Generator, n_in: int, n_out: int,
                std: float, trainable: bool = True) -> None:
    params[f"{prefix}.w"] = Tensor(rng.normal(0.0, std, (n_in, n_out)), trainable, f"{prefix}.w")
    params[f"{prefix}.b"] = Tensor(np.zeros(n_out), trainable, f"{prefix}.b")


def init_norm(params: Params, prefix: str, dim: int, trainable: bool = True) -> None:
    params[f"{prefix}.g"] = Tensor(np.ones(dim), trainable, f"{prefix}.g")
    params[f"{prefix}.b"] = Tensor(np.zeros(dim), trainable, f"{prefix}.b")


def init_attention(params: Params, prefix: str, rng, dim: int, std: float, trainable: bool = True,
                   kv_dim: int | None = None) -> None:
    kv_dim = dim if kv_dim is None else kv_dim
    init_linear(params, f"{prefix}.q", rng, dim, dim, std, trainable)
    init_linear(params, f"{prefix}.k", rng, kv_dim, dim, std, trainable)
    init_linear(params, f"{prefix}.v", rng, kv_dim, dim, std, trainable)
    init_linear(params, f"{prefix}.o", rng, dim, dim, std, trainable)


def init_mlp(params: Params, prefix: str, rng, dim: int, hidden: int, std: float,
             trainable: bool = True) -> None:
    init_linear(params, f"{prefix}.fc1", rng, dim, hidden, std, trainable)
    init_linear(params, f"{prefix}.fc2", rng, hidden, dim, std, trainable)


def init_block(params: Params, prefix: str, rng, dim: int, mlp_ratio: int, std: float,
               trainable: bool = True) -> None:
    init_norm(params, f"{prefix}.ln1", dim, trainable)
    init_attention(params, f"{prefix}.attn", rng, dim, std, trainable)
    init_norm(params, f"{prefix}.ln2", dim, trainable)
    init_mlp(params, f"{prefix}.mlp", rng, dim, dim * mlp_ratio, std, trainable)


def dense(params: Params, prefix: str, x: Tensor) -> Tensor:
    return ad.linear(x, params[f"{prefix}.w"], params[f"{prefix}.b"])


def norm(params: Params, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def mlp(params: Params, prefix: str, x: Tensor) -> Tensor:
    return dense(params, f"{prefix}.fc2", ad.gelu(dense(params, f"{prefix}.fc1", x)))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def attention(params: Params, prefix: str, xq: Tensor, xkv: Tensor, n_heads: int,
              allowed: np.ndarray | None) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``allowed[i, j]`` says whether query ``i`` may read key ``j``; ``None``
    means everything is visible.  Query rows with nothing visible get a zero
    attention vector (before the output projection bias).
    """
    dim = params[f"{prefix}.q.w"].shape[1]
    if dim % n_heads:
        raise ValueError(f"width {dim} not divisible by {n_heads} heads")
    dh = dim // n_heads
    q = dense(params, f"{prefix}.q", xq)
    k = dense(params, f"{prefix}.k", xkv)
    v = dense(params, f"{prefix}.v", xkv)
    if allowed is None:
        allowed = np.ones((xq.shape[0], xkv.shape[0]), dtype=bool)
    inv = 1.0 / np.sqrt(dh)
    heads = []
    for h in range(n_heads):
        sl = (h * dh, (h + 1) * dh)
        qh = ad.slice_cols(q, *sl) if n_heads > 1 else q
        kh = ad.slice_cols(k, *sl) if n_heads > 1 else k
        vh = ad.slice_cols(v, *sl) if n_heads > 1 else v
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv)
        heads.append(ad.matmul(ad.masked_softmax_rows(scores, allowed), vh))
    return dense(params, f"{prefix}.o", ad.concat_cols(heads))


def block(params: Params, prefix: str, x: Tensor, n_heads: int, allowed: np.ndarray | None) -> Tensor:
    """Pre-norm self-attention block with residual attention and MLP."""
    h = norm(params, f"{prefix}.ln1", x)
    x = ad.add(x, attention(params, f"{prefix}.attn", h, h, n_heads, allowed))
    return ad.add(x, mlp(params, f"{prefix}.mlp", norm(params, f"{prefix}.ln2", x)))

"""Pre-LN self-attention stack over a right-padded item sequence."""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    Tensor,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    softmax,
    swap_last,
    where,
)

MASKED = -1e30


def init_stack(params: dict, rng: np.random.Generator, d: int, d_ff: int, n_layers: int, max_len: int, std: float):
    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def const(value, n):
        return Tensor(np.full(n, value), requires_grad=True)

    params["position_embedding"] = normal(max_len, d)
    for l in range(n_layers):
        p = f"layers.{l}."
        params[p + "ln1.gamma"] = const(1.0, d)
        params[p + "ln1.beta"] = const(0.0, d)
        for name in ("q", "k", "v", "o"):
            params[p + f"attn.w{name}"] = normal(d, d)
            params[p + f"attn.b{name}"] = const(0.0, d)
        params[p + "ln2.gamma"] = const(1.0, d)
        params[p + "ln2.beta"] = const(0.0, d)
        params[p + "ffn.w1"] = normal(d, d_ff)
        params[p + "ffn.b1"] = const(0.0, d_ff)
        params[p + "ffn.w2"] = normal(d_ff, d)
        params[p + "ffn.b2"] = const(0.0, d)
    params["final_ln.gamma"] = const(1.0, d)
    params["final_ln.beta"] = const(0.0, d)


def _attention(x: Tensor, params: dict, p: str, key_mask: np.ndarray, n_heads: int, drop: float, training, rng):
    B, L, d = x.shape
    dk = d // n_heads

    def heads(name):
        y = matmul(x, params[p + f"attn.w{name}"]) + params[p + f"attn.b{name}"]
        return y.reshape(B, L, n_heads, dk).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(dk))
    attn = softmax(where(key_mask, scores, MASKED), axis=-1)
    attn = dropout(attn, drop, training, rng)
    ctx = matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, L, d)
    return matmul(ctx, params[p + "attn.wo"]) + params[p + "attn.bo"]


def _feed_forward(x: Tensor, params: dict, p: str) -> Tensor:
    h = gelu(matmul(x, params[p + "ffn.w1"]) + params[p + "ffn.b1"])
    return matmul(h, params[p + "ffn.w2"]) + params[p + "ffn.b2"]


def run_stack(
    item_vectors: Tensor,
    mask: np.ndarray,
    params: dict,
    n_layers: int,
    n_heads: int,
    drop: float,
    causal: bool,
    training: bool,
    rng,
    ln_eps: float = 1e-8,
) -> Tensor:
    """Transformer features ``F`` (B×L×d) for already-looked-up item vectors."""
    B, L, _ = item_vectors.shape
    pos = embedding_lookup(params["position_embedding"], np.arange(L))
    x = dropout(item_vectors + pos, drop, training, rng)

    key_mask = mask[:, None, None, :]
    if causal:
        key_mask = key_mask & np.tril(np.ones((L, L), dtype=bool))[None, None]

    for l in range(n_layers):
        p = f"layers.{l}."
        h = layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"], ln_eps)
        x = x + dropout(_attention(h, params, p, key_mask, n_heads, drop, training, rng), drop, training, rng)
        h = layer_norm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"], ln_eps)
        x = x + dropout(_feed_forward(h, params, p), drop, training, rng)
    return layer_norm(x, params["final_ln.gamma"], params["final_ln.beta"], ln_eps)

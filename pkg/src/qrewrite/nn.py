"""Neural building blocks on top of the autodiff engine.

Transformer encoder/decoder layers (post-norm), a GRU cell, parameter
initialization, and an Adam optimizer with linear warmup. All parameters
are plain ``Tensor`` objects; containers expose ``named()`` so checkpoints
and optimizers can enumerate them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import (GradientMap, Tensor, add, concat, embedding, gelu,
                       layer_norm, matmul, mul, reshape, sigmoid, softmax,
                       tanh, tensor_sum, transpose)


def linear_init(rng: np.random.Generator, n_in: int, n_out: int, dtype, std: float = 0.02):
    w = Tensor(rng.normal(0.0, std, size=(n_in, n_out)).astype(dtype))
    b = Tensor(np.zeros((1, n_out), dtype=dtype))
    return w, b


@dataclass
class TransformerLayer:
    """One post-norm transformer block: multi-head attention then FFN.

    ``rel_bias`` is a (2*radius+1, n_heads) table of additive attention
    biases indexed by clipped key-minus-query offset, one column per head.
    """
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w_f1: Tensor
    b_f1: Tensor
    w_f2: Tensor
    b_f2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    rel_bias: Tensor
    n_heads: int
    rel_radius: int

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for f in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
                  "ln1_g", "ln1_b", "w_f1", "b_f1", "w_f2", "b_f2",
                  "ln2_g", "ln2_b", "rel_bias"):
            out[f"{prefix}.{f}"] = getattr(self, f)
        return out


def transformer_layer_init(rng, hidden: int, ffn: int, n_heads: int, dtype,
                           std: float = 0.02, qk_gain: float = 0.0,
                           rel_radius: int = 8) -> TransformerLayer:
    """``qk_gain`` adds a scaled identity to the query/key projections so
    attention starts out content-matching instead of uniform; small models
    learn token-identity attention far faster from that bias."""
    if hidden % n_heads != 0:
        raise ValueError(f"hidden size {hidden} not divisible by {n_heads} heads")
    w_q, b_q = linear_init(rng, hidden, hidden, dtype, std)
    w_k, b_k = linear_init(rng, hidden, hidden, dtype, std)
    if qk_gain:
        eye = (qk_gain * np.eye(hidden)).astype(dtype)
        w_q.data += eye
        w_k.data += eye
    w_v, b_v = linear_init(rng, hidden, hidden, dtype, std)
    w_o, b_o = linear_init(rng, hidden, hidden, dtype, std)
    w_f1, b_f1 = linear_init(rng, hidden, ffn, dtype, std)
    w_f2, b_f2 = linear_init(rng, ffn, hidden, dtype, std)
    rel = Tensor(rng.normal(0.0, std, size=(2 * rel_radius + 1, n_heads)).astype(dtype))
    ones = lambda: Tensor(np.ones((1, hidden), dtype=dtype))
    zeros = lambda: Tensor(np.zeros((1, hidden), dtype=dtype))
    return TransformerLayer(w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o,
                            ones(), zeros(), w_f1, b_f1, w_f2, b_f2,
                            ones(), zeros(), rel, n_heads, rel_radius)


_OFFSET_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _offset_index(t: int, radius: int) -> np.ndarray:
    """Flattened (t*t,) table of clip(key - query, ±radius) + radius."""
    key = (t, radius)
    cached = _OFFSET_CACHE.get(key)
    if cached is None:
        idx = np.arange(t)
        rel = np.clip(idx[None, :] - idx[:, None], -radius, radius) + radius
        cached = rel.reshape(-1).astype(np.int64)
        _OFFSET_CACHE[key] = cached
    return cached


def multi_head_attention(x: Tensor, layer: TransformerLayer, mask: Tensor | None) -> Tensor:
    n_heads = layer.n_heads
    dh = x.shape[1] // n_heads
    t = x.shape[0]
    scale = 1.0 / float(np.sqrt(dh))
    q = add(matmul(x, layer.w_q), layer.b_q)
    k = add(matmul(x, layer.w_k), layer.b_k)
    v = add(matmul(x, layer.w_v), layer.b_v)
    rel = embedding(layer.rel_bias, _offset_index(t, layer.rel_radius))  # (t*t, heads)
    heads = []
    for h in range(n_heads):
        sl = (slice(None), slice(h * dh, (h + 1) * dh))
        qs, ks, vs = q[sl], k[sl], v[sl]
        scores = mul(matmul(qs, transpose(ks)), scale)
        scores = add(scores, reshape(rel[:, h:h + 1], (t, t)))
        if mask is not None:
            scores = add(scores, mask)
        heads.append(matmul(softmax(scores, axis=-1), vs))
    merged = concat(heads, axis=1)
    return add(matmul(merged, layer.w_o), layer.b_o)


def _ffn(x: Tensor, layer: TransformerLayer) -> Tensor:
    return add(matmul(gelu(add(matmul(x, layer.w_f1), layer.b_f1)), layer.w_f2),
               layer.b_f2)


def transformer_block(x: Tensor, layer: TransformerLayer, mask: Tensor | None = None,
                      style: str = "post") -> Tensor:
    """Residual attention + FFN block, post-norm or pre-norm."""
    if style == "pre":
        x = add(x, multi_head_attention(
            layer_norm(x, layer.ln1_g, layer.ln1_b), layer, mask))
        return add(x, _ffn(layer_norm(x, layer.ln2_g, layer.ln2_b), layer))
    att = multi_head_attention(x, layer, mask)
    x = layer_norm(add(x, att), layer.ln1_g, layer.ln1_b)
    return layer_norm(add(x, _ffn(x, layer)), layer.ln2_g, layer.ln2_b)


def causal_mask(n: int, dtype) -> Tensor:
    m = np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)
    return Tensor(m)


@dataclass
class GruParams:
    """Gates packed r|z|n along the output axis, reset/update/candidate order."""
    w_i: Tensor
    b_i: Tensor
    w_h: Tensor
    b_h: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f}": getattr(self, f) for f in ("w_i", "b_i", "w_h", "b_h")}


def gru_init(rng, n_in: int, hidden: int, dtype, std: float = 0.02) -> GruParams:
    w_i, b_i = linear_init(rng, n_in, 3 * hidden, dtype, std)
    w_h, b_h = linear_init(rng, hidden, 3 * hidden, dtype, std)
    return GruParams(w_i, b_i, w_h, b_h)


def gru_cell(x_proj: Tensor, h: Tensor, params: GruParams, hidden: int) -> Tensor:
    """One GRU step given the precomputed input projection for this step."""
    hh = add(matmul(h, params.w_h), params.b_h)
    r = sigmoid(add(x_proj[:, :hidden], hh[:, :hidden]))
    z = sigmoid(add(x_proj[:, hidden:2 * hidden], hh[:, hidden:2 * hidden]))
    n = tanh(add(x_proj[:, 2 * hidden:], mul(r, hh[:, 2 * hidden:])))
    # (1 - z) * n + z * h, rewritten as n + z * (h - n)
    return add(n, mul(z, add(h, mul(n, -1.0))))


def gru_sequence(x: Tensor, params: GruParams, hidden: int) -> Tensor:
    """Run the GRU left to right over the rows of ``x``; returns all states."""
    t = x.shape[0]
    xi = add(matmul(x, params.w_i), params.b_i)
    h = Tensor(np.zeros((1, hidden), dtype=x.data.dtype))
    states = []
    for i in range(t):
        h = gru_cell(xi[i:i + 1], h, params, hidden)
        states.append(h)
    return concat(states, axis=0)


def gru_sum_pool(x: Tensor, params: GruParams, hidden: int) -> Tensor:
    return tensor_sum(gru_sequence(x, params, hidden), axis=0, keepdims=True)


def set_requires_grad(tensors: Iterable[Tensor], flag: bool) -> None:
    for t in tensors:
        t.requires_grad = flag


class Adam:
    """Adaptive moment estimation with linear learning-rate warmup."""

    def __init__(self, params: list[Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 warmup_steps: int = 0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: GradientMap) -> None:
        self.t += 1
        lr_t = self.lr
        if self.warmup_steps > 0:
            lr_t *= min(1.0, self.t / self.warmup_steps)
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= (lr_t * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def accumulate_grads(total: dict[Tensor, np.ndarray], grads: GradientMap) -> None:
    for t, g in grads.items():
        cur = total.get(t)
        total[t] = g.copy() if cur is None else cur + g


def scale_grads(total: dict[Tensor, np.ndarray], factor: float) -> dict[Tensor, np.ndarray]:
    return {t: g * factor for t, g in total.items()}

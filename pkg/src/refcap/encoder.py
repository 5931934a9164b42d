"""Feature-refining encoder.

Re-embeds the k region features by relating them to each other:
linear Q/K/V projections, scaled-dot attention on channel slices
(multi-head), a sigmoid-gated fusion of the attention result with its
query, then a residual connection and per-row layer normalization.
The output keeps the input's k x D shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import refcap.tensor as T
from refcap.tensor import Tensor


def xavier(rng: np.random.Generator, rows: int, cols: int, dtype) -> Tensor:
    """Fan-average-scaled uniform init."""
    limit = np.sqrt(6.0 / (rows + cols))
    return T.parameter(rng.uniform(-limit, limit, (rows, cols)), dtype=dtype)


@dataclass
class RefinerParameters:
    """One refining layer's trainable tensors. All matrices are D x D."""

    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_I_q: Tensor
    W_I_v: Tensor
    b_I: Tensor
    W_G_q: Tensor
    W_G_v: Tensor
    b_G: Tensor
    heads: int

    FIELDS = ("W_Q", "W_K", "W_V", "W_I_q", "W_I_v", "b_I", "W_G_q", "W_G_v", "b_G")

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, heads: int, dtype) -> "RefinerParameters":
        if dim % heads != 0:
            raise ValueError(f"feature dim {dim} not divisible by {heads} heads")
        mats = {name: xavier(rng, dim, dim, dtype)
                for name in ("W_Q", "W_K", "W_V", "W_I_q", "W_I_v", "W_G_q", "W_G_v")}
        zeros = lambda: T.parameter(np.zeros((1, dim)), dtype=dtype)
        return cls(heads=heads, b_I=zeros(), b_G=zeros(), **mats)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}{name}": getattr(self, name) for name in self.FIELDS}


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d)) v; each weight row is a distribution over keys."""
    d = q.shape[1]
    weights = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d)), axis=1)
    return T.matmul(weights, v), weights


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor,
                         heads: int) -> tuple[Tensor, list[Tensor]]:
    """Attend independently on H channel slices and concatenate the results.

    Returns the k x D attended matrix and the per-head k x k weights.
    """
    dim = q.shape[1]
    if dim % heads != 0:
        raise ValueError(f"channel dim {dim} not divisible by {heads} heads")
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"Q/K/V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    width = dim // heads
    outputs, weights = [], []
    for h in range(heads):
        lo, hi = h * width, (h + 1) * width
        out, w = scaled_dot_attention(T.slice_cols(q, lo, hi),
                                      T.slice_cols(k, lo, hi),
                                      T.slice_cols(v, lo, hi))
        outputs.append(out)
        weights.append(w)
    return T.concat(outputs, axis=1), weights


def attention_on_attention(v_bar: Tensor, q: Tensor,
                           params: RefinerParameters) -> Tensor:
    """Gate the attended features by their relevance to the query.

    An information vector (linear in q and v_bar) is multiplied
    elementwise by a sigmoid gate computed from the same pair, so every
    gate element lies in (0, 1).
    """
    info = T.add(T.add(T.matmul(q, T.transpose(params.W_I_q)),
                       T.matmul(v_bar, T.transpose(params.W_I_v))), params.b_I)
    gate = T.sigmoid(T.add(T.add(T.matmul(q, T.transpose(params.W_G_q)),
                                 T.matmul(v_bar, T.transpose(params.W_G_v))),
                           params.b_G))
    return T.mul(gate, info)


def refine_features(a: Tensor, params: RefinerParameters,
                    eps: float = 1e-5, query_raw: bool = False) -> Tensor:
    """One refining pass over the k x D region features, shape preserved.

    The gated attention output is added back onto the input and the sum
    is layer-normalized per region row. By default the gating query is
    the projected Q; `query_raw` switches it to the unprojected input.
    """
    q = T.matmul(a, params.W_Q)
    k = T.matmul(a, params.W_K)
    v = T.matmul(a, params.W_V)
    v_bar, _ = multi_head_attention(q, k, v, params.heads)
    gated = attention_on_attention(v_bar, a if query_raw else q, params)
    return T.layer_norm(T.add(a, gated), eps=eps)

"""Two-module decoder: attention-based recurrent core plus reflective attention.

Layer 1 consumes [global feature, mean-pooled features, word embedding,
previous layer-2 state]; its output queries an additive attention over
the k region rows. Layer 2 consumes the attended feature with layer 1's
state. A second attention over the history of layer-2 states produces
the vector the word head sees. Ablation flags can bypass any of these
stages, down to a single-LSTM baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import refcap.tensor as T
from refcap.encoder import xavier
from refcap.tensor import Tensor


class LSTMCell:
    """Packed-gate LSTM; gate order (input, forget, cell, output).

    The forget-gate bias starts at 1 so early training does not erase
    cell state.
    """

    def __init__(self, rng: np.random.Generator, input_dim: int,
                 hidden_dim: int, dtype):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.W = xavier(rng, input_dim + hidden_dim, 4 * hidden_dim, dtype)
        bias = np.zeros((1, 4 * hidden_dim))
        bias[0, hidden_dim:2 * hidden_dim] = 1.0
        self.b = T.parameter(bias, dtype=dtype)

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h_prev, c_prev = state
        if x.shape != (1, self.input_dim):
            raise ValueError(f"lstm cell expects input (1, {self.input_dim}), "
                             f"got {x.shape}")
        n = self.hidden_dim
        pre = T.add(T.matmul(T.concat([x, h_prev], axis=1), self.W), self.b)
        i = T.sigmoid(T.slice_cols(pre, 0, n))
        f = T.sigmoid(T.slice_cols(pre, n, 2 * n))
        g = T.tanh(T.slice_cols(pre, 2 * n, 3 * n))
        o = T.sigmoid(T.slice_cols(pre, 3 * n, 4 * n))
        c = T.add(T.mul(f, c_prev), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        return h, c

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}W": self.W, f"{prefix}b": self.b}


@dataclass
class VisualAttentionParameters:
    """Additive attention over region features: score = W_v tanh(W_rv a + W_hv h)."""

    W_v: Tensor    # 1 x D_v
    W_rv: Tensor   # D_v x D
    W_hv: Tensor   # D_v x D_h

    @classmethod
    def init(cls, rng, att_dim, feature_dim, hidden_dim, dtype):
        return cls(W_v=xavier(rng, 1, att_dim, dtype),
                   W_rv=xavier(rng, att_dim, feature_dim, dtype),
                   W_hv=xavier(rng, att_dim, hidden_dim, dtype))

    def named(self, prefix):
        return {f"{prefix}W_v": self.W_v, f"{prefix}W_rv": self.W_rv,
                f"{prefix}W_hv": self.W_hv}


@dataclass
class ReflectiveAttentionParameters:
    """Additive attention over past layer-2 states."""

    W_h: Tensor     # 1 x D_f
    W_h2h: Tensor   # D_f x D_h
    W_h1h: Tensor   # D_f x D_h

    @classmethod
    def init(cls, rng, att_dim, hidden_dim, dtype):
        return cls(W_h=xavier(rng, 1, att_dim, dtype),
                   W_h2h=xavier(rng, att_dim, hidden_dim, dtype),
                   W_h1h=xavier(rng, att_dim, hidden_dim, dtype))

    def named(self, prefix):
        return {f"{prefix}W_h": self.W_h, f"{prefix}W_h2h": self.W_h2h,
                f"{prefix}W_h1h": self.W_h1h}


def visual_attention(a: Tensor, h1: Tensor,
                     params: VisualAttentionParameters) -> tuple[Tensor, Tensor]:
    """Attend over the k region rows conditioned on the layer-1 state.

    Returns the attended 1 x D feature and the k x 1 weight column,
    which softmax makes a distribution over regions.
    """
    scores = T.matmul(T.tanh(T.add(T.matmul(a, T.transpose(params.W_rv)),
                                   T.matmul(h1, T.transpose(params.W_hv)))),
                      T.transpose(params.W_v))
    alpha = T.softmax(scores, axis=0)
    return T.matmul(T.transpose(alpha), a), alpha


def reflective_attention(history: Tensor, query: Tensor,
                         params: ReflectiveAttentionParameters) -> tuple[Tensor, Tensor]:
    """Attend over the t x D_h stack of past layer-2 states.

    At t = 1 the softmax is over a single score, so the result is the
    lone history row exactly.
    """
    if history.shape[0] < 1:
        raise ValueError("reflective attention needs a nonempty history")
    scores = T.matmul(T.tanh(T.add(T.matmul(history, T.transpose(params.W_h2h)),
                                   T.matmul(query, T.transpose(params.W_h1h)))),
                      T.transpose(params.W_h))
    alpha = T.softmax(scores, axis=0)
    return T.matmul(T.transpose(alpha), history), alpha


def predict_word(hidden: Tensor, W_s: Tensor, b_s: Tensor) -> Tensor:
    """Distribution over the vocabulary: softmax(W_s h + b_s)."""
    return T.softmax(T.add(T.matmul(hidden, T.transpose(W_s)), b_s), axis=1)


@dataclass
class DecoderState:
    """Recurrent state for one sequence; never shared across hypotheses.

    `history` holds every layer-2 state produced so far, one 1 x D_h row
    per completed step.
    """

    h1: Tensor
    c1: Tensor
    h2: Tensor | None = None
    c2: Tensor | None = None
    history: list[Tensor] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.history)


@dataclass
class AttentionTrace:
    """Per-step attention weights captured during decoding.

    `alpha_vis[t]` has one weight per region; `alpha_ref[t]` has t+1
    weights (one per history entry at that step), so the list of lists
    is triangular.
    """

    alpha_vis: list[np.ndarray] = field(default_factory=list)
    alpha_ref: list[np.ndarray] = field(default_factory=list)

    def append(self, vis: np.ndarray | None, ref: np.ndarray | None) -> None:
        if vis is not None:
            self.alpha_vis.append(np.asarray(vis, dtype=np.float64).reshape(-1))
        if ref is not None:
            self.alpha_ref.append(np.asarray(ref, dtype=np.float64).reshape(-1))

    def validate(self, atol: float = 1e-6) -> None:
        for vec in self.alpha_vis:
            if np.any(vec < 0) or abs(vec.sum() - 1.0) > atol:
                raise ValueError("visual attention weights are not a distribution")
        for t, vec in enumerate(self.alpha_ref, start=1):
            if len(vec) != t:
                raise ValueError(f"reflective weights at step {t} have "
                                 f"{len(vec)} entries")
            if np.any(vec < 0) or abs(vec.sum() - 1.0) > atol:
                raise ValueError("reflective attention weights are not a distribution")

    def to_json(self, image_id: str, tokens: list[str]) -> dict:
        return {
            "image_id": image_id,
            "tokens": tokens,
            "alpha_vis": [vec.tolist() for vec in self.alpha_vis],
            "alpha_ref": [vec.tolist() for vec in self.alpha_ref],
        }

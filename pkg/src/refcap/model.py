"""Model configuration, parameter bundle, and the full captioning forward pass."""

from __future__ import annotations

from dataclasses import dataclass, asdict, field, replace

import numpy as np

import refcap.tensor as T
from refcap.data import END, PAD, START, EncodedCaption, FeatureRecord
from refcap.decoder import (
    AttentionTrace, DecoderState, LSTMCell, ReflectiveAttentionParameters,
    VisualAttentionParameters, predict_word, reflective_attention,
    visual_attention,
)
from refcap.encoder import RefinerParameters, refine_features, xavier
from refcap.tensor import Tensor

VARIANTS = ("baseline", "visatt", "visattrefatt", "refining")


@dataclass
class ModelConfig:
    """Dimensions and ablation switches for one captioning model.

    Defaults mirror the full-size training setup: 2048-dim region
    features, 8 attention heads, 1000-dim hidden and embedding sizes,
    512-dim attention layers, dropout 0.5.
    """

    vocab_size: int
    feature_dim: int = 2048
    global_dim: int = 2048
    embed_dim: int = 1000
    hidden_dim: int = 1000
    attention_dim: int = 512
    reflect_dim: int = 512
    heads: int = 8
    refiner_layers: int = 1
    dropout: float = 0.5
    max_len: int = 50
    variant: str = "refining"
    use_refiner: bool = True
    use_visual_attention: bool = True
    use_reflective_attention: bool = True
    use_global_features: bool = True
    two_layer_decoder: bool = True
    reflective_query: str = "h1"   # "h1" follows the scoring formula; "h2" the prose
    aoa_query_raw: bool = False
    attend_raw_features: bool = False
    layer_norm_eps: float = 1e-5
    dtype: str = "float32"

    @classmethod
    def for_variant(cls, variant: str, vocab_size: int, **overrides) -> "ModelConfig":
        """Ablation presets: each variant adds one mechanism to the last.

        baseline      single LSTM over [mean feature, word]
        visatt        two layers + visual attention
        visattrefatt  + reflective attention
        refining      + feature refinement and global features
        """
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        flags = {
            "baseline": dict(use_refiner=False, use_visual_attention=False,
                             use_reflective_attention=False,
                             use_global_features=False, two_layer_decoder=False),
            "visatt": dict(use_refiner=False, use_visual_attention=True,
                           use_reflective_attention=False,
                           use_global_features=False, two_layer_decoder=True),
            "visattrefatt": dict(use_refiner=False, use_visual_attention=True,
                                 use_reflective_attention=True,
                                 use_global_features=False, two_layer_decoder=True),
            "refining": dict(use_refiner=True, use_visual_attention=True,
                             use_reflective_attention=True,
                             use_global_features=True, two_layer_decoder=True),
        }[variant]
        return cls(vocab_size=vocab_size, variant=variant, **flags, **overrides)

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)

    def with_dtype(self, dtype: str) -> "ModelConfig":
        return replace(self, dtype=dtype)


@dataclass
class FeatureContext:
    """Per-image tensors the decoder consumes, built once per forward pass."""

    attend: Tensor        # k x D matrix visual attention sees
    pooled: Tensor        # 1 x D mean over regions
    global_feat: Tensor | None


class CaptionModel:
    """Refining encoder + reflective decoder with every trainable tensor named."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dtype = config.np_dtype
        c = config

        self.refiner: list[RefinerParameters] = []
        if c.use_refiner:
            self.refiner = [RefinerParameters.init(rng, c.feature_dim, c.heads, dtype)
                            for _ in range(c.refiner_layers)]

        self.W_e = xavier(rng, c.embed_dim, c.vocab_size, dtype)

        if c.two_layer_decoder:
            x1_dim = c.feature_dim + c.embed_dim + c.hidden_dim
            if c.use_global_features:
                x1_dim += c.global_dim
            self.lstm1 = LSTMCell(rng, x1_dim, c.hidden_dim, dtype)
            self.lstm2 = LSTMCell(rng, c.feature_dim + c.hidden_dim, c.hidden_dim, dtype)
        else:
            self.lstm1 = LSTMCell(rng, c.feature_dim + c.embed_dim, c.hidden_dim, dtype)
            self.lstm2 = None

        self.att_vis = (VisualAttentionParameters.init(
            rng, c.attention_dim, c.feature_dim, c.hidden_dim, dtype)
            if c.use_visual_attention else None)
        self.att_ref = (ReflectiveAttentionParameters.init(
            rng, c.reflect_dim, c.hidden_dim, dtype)
            if c.use_reflective_attention else None)

        self.W_s = xavier(rng, c.vocab_size, c.hidden_dim, dtype)
        self.b_s = T.parameter(np.zeros((1, c.vocab_size)), dtype=dtype)

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for i, layer in enumerate(self.refiner):
            named.update(layer.named(f"refiner.{i}."))
        named["decoder.W_e"] = self.W_e
        named.update(self.lstm1.named("decoder.lstm1."))
        if self.lstm2 is not None:
            named.update(self.lstm2.named("decoder.lstm2."))
        if self.att_vis is not None:
            named.update(self.att_vis.named("decoder.att_vis."))
        if self.att_ref is not None:
            named.update(self.att_ref.named("decoder.att_ref."))
        named["decoder.head.W_s"] = self.W_s
        named["decoder.head.b_s"] = self.b_s
        return named

    def zero_grads(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise ValueError(f"parameter names differ: missing={sorted(missing)}, "
                             f"unexpected={sorted(extra)}")
        for name, tensor in params.items():
            arr = np.asarray(values[name], dtype=tensor.values.dtype)
            if arr.shape != tensor.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {tensor.shape}")
            tensor.values[...] = arr

    # -- forward passes -------------------------------------------------------

    def prepare_features(self, record: FeatureRecord) -> FeatureContext:
        """Refine (when enabled) and pool one image's features.

        Runs inside the caller's Graph during training so refiner
        gradients flow; with no active graph it is a plain forward pass.
        """
        c = self.config
        dtype = c.np_dtype
        if record.feature_dim != c.feature_dim:
            raise ValueError(f"record {record.image_id!r} has D={record.feature_dim}, "
                             f"model expects {c.feature_dim}")
        raw = Tensor(record.spatial, dtype=dtype)
        refined = raw
        for layer in self.refiner:
            refined = refine_features(refined, layer, eps=c.layer_norm_eps,
                                      query_raw=c.aoa_query_raw)
        attend = raw if c.attend_raw_features else refined
        pooled = T.mean(refined, axis=0)
        global_feat = None
        if c.use_global_features:
            if record.global_dim != c.global_dim:
                raise ValueError(f"record {record.image_id!r} has D_g="
                                 f"{record.global_dim}, model expects {c.global_dim}")
            global_feat = Tensor(record.global_feat, dtype=dtype)
        return FeatureContext(attend=attend, pooled=pooled, global_feat=global_feat)

    def initial_state(self) -> DecoderState:
        dtype = self.config.np_dtype
        zeros = lambda: Tensor(np.zeros((1, self.config.hidden_dim)), dtype=dtype)
        if self.config.two_layer_decoder:
            return DecoderState(h1=zeros(), c1=zeros(), h2=zeros(), c2=zeros())
        return DecoderState(h1=zeros(), c1=zeros())

    def step(self, state: DecoderState, token_id: int, ctx: FeatureContext,
             train: bool = False, rng: np.random.Generator | None = None):
        """Advance one time step; returns (probs, new_state, alpha_vis, alpha_ref).

        The input state is never mutated, so branching decoders (beam
        search) can reuse it. Dropout applies only when train=True.
        """
        c = self.config
        rate = c.dropout if train else 0.0
        word = T.embedding(self.W_e, token_id)
        if rate:
            word = T.dropout(word, rate, rng)

        alpha_vis = alpha_ref = None
        if not c.two_layer_decoder:
            x = T.concat([ctx.pooled, word], axis=1)
            h1, c1 = self.lstm1(x, (state.h1, state.c1))
            new_state = DecoderState(h1=h1, c1=c1)
            out = h1
        else:
            parts = [ctx.pooled, word, state.h2]
            if c.use_global_features:
                parts.insert(0, ctx.global_feat)
            h1, c1 = self.lstm1(T.concat(parts, axis=1), (state.h1, state.c1))

            if c.use_visual_attention:
                attended, alpha_vis = visual_attention(ctx.attend, h1, self.att_vis)
            else:
                attended = ctx.pooled
            h2, c2 = self.lstm2(T.concat([attended, h1], axis=1), (state.h2, state.c2))
            new_state = DecoderState(h1=h1, c1=c1, h2=h2, c2=c2,
                                     history=state.history + [h2])

            if c.use_reflective_attention:
                stack = T.concat(new_state.history, axis=0)
                query = h1 if c.reflective_query == "h1" else h2
                out, alpha_ref = reflective_attention(stack, query, self.att_ref)
            else:
                out = h2

        if rate:
            out = T.dropout(out, rate, rng)
        probs = predict_word(out, self.W_s, self.b_s)
        return probs, new_state, alpha_vis, alpha_ref

    def forward_caption(self, record: FeatureRecord, caption: EncodedCaption,
                        train: bool = False,
                        rng: np.random.Generator | None = None,
                        ctx: FeatureContext | None = None):
        """Teacher-forced pass over one caption.

        Token t is the input and position t+1 the target, so the output
        stacks true_length-1 distribution rows. Returns (dists Tensor,
        trace).
        """
        if caption.true_length < 2:
            raise ValueError("caption needs at least <start> and <end>")
        if ctx is None:
            ctx = self.prepare_features(record)
        state = self.initial_state()
        trace = AttentionTrace()
        rows = []
        for t in range(caption.true_length - 1):
            probs, state, alpha_vis, alpha_ref = self.step(
                state, caption.ids[t], ctx, train=train, rng=rng)
            rows.append(probs)
            trace.append(None if alpha_vis is None else alpha_vis.values,
                         None if alpha_ref is None else alpha_ref.values)
        return T.concat(rows, axis=0), trace

"""Transformer encoder with per-layer attention-zone masking and a span head.

Zone geometry (row = attending position, column = attended position)::

    question block = [CLS] + question + first [SEP]
    passage block  = passage + final [SEP]

    Q2  : question -> question      Q2P : question -> passage
    P2Q : passage  -> question      P2  : passage  -> passage

The four zones partition the non-pad square; ALL is their union. Padding
columns are always dropped by the separate padding mask.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .text import Feature, SequenceLayout


class Zone(str, enum.Enum):
    Q2 = "q2"
    Q2P = "q2p"
    P2Q = "p2q"
    P2 = "p2"
    ALL = "all"
    NONE = "none"

    @classmethod
    def parse(cls, value) -> "Zone":
        if isinstance(value, Zone):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown zone {value!r}; expected one of {[z.value for z in cls]}"
            ) from None


# column order of the results table
SWEEP_ZONES = (Zone.ALL, Zone.Q2, Zone.Q2P, Zone.P2Q, Zone.P2)


@dataclass(frozen=True)
class ZoneSpec:
    """Which layer(s) to mask and which zone. ``layer=None`` means every layer."""

    layer: int | None
    zone: Zone

    def __post_init__(self):
        object.__setattr__(self, "zone", Zone.parse(self.zone))
        if self.layer is not None and self.layer < 0:
            raise ValueError(f"layer index must be >= 0, got {self.layer}")

    def check(self, n_layers: int) -> None:
        if self.layer is not None and not 0 <= self.layer < n_layers:
            raise ValueError(f"layer {self.layer} outside [0, {n_layers})")

    def applies_to(self, layer: int) -> bool:
        return self.zone is not Zone.NONE and (self.layer is None or self.layer == layer)


IDENTITY_SPEC = ZoneSpec(None, Zone.NONE)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_positions: int = 128
    type_vocab_size: int = 2
    layer_norm_eps: float = 1e-12
    initializer_range: float = 0.02

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- masks

def zone_mask(layout: SequenceLayout, zone: Zone | str) -> np.ndarray:
    """Additive [n, n] mask: NEG_INF on the cells of ``zone``, 0 elsewhere."""
    zone = Zone.parse(zone)
    n = layout.length
    mask = np.zeros((n, n))
    q = slice(layout.question_block.start, layout.question_block.stop)
    p = slice(layout.passage_block.start, layout.passage_block.stop)
    if zone in (Zone.Q2, Zone.ALL):
        mask[q, q] = T.NEG_INF
    if zone in (Zone.Q2P, Zone.ALL):
        mask[q, p] = T.NEG_INF
    if zone in (Zone.P2Q, Zone.ALL):
        mask[p, q] = T.NEG_INF
    if zone in (Zone.P2, Zone.ALL):
        mask[p, p] = T.NEG_INF
    return mask


def padding_mask(layout: SequenceLayout) -> np.ndarray:
    """Additive [n] key mask dropping padding columns."""
    mask = np.zeros(layout.length)
    mask[layout.pad_range[0]:layout.pad_range[1]] = T.NEG_INF
    return mask


def passage_logit_mask(layout: SequenceLayout) -> np.ndarray:
    mask = np.full(layout.length, T.NEG_INF)
    mask[layout.passage_range[0]:layout.passage_range[1]] = 0.0
    return mask


# ---------------------------------------------------------------- parameters

def truncated_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff
    std = config.initializer_range
    p: dict[str, np.ndarray] = {
        "embeddings.word": truncated_normal(rng, (config.vocab_size, d), std),
        "embeddings.position": truncated_normal(rng, (config.max_positions, d), std),
        "embeddings.segment": truncated_normal(rng, (config.type_vocab_size, d), std),
        "embeddings.ln.gamma": np.ones(d),
        "embeddings.ln.beta": np.zeros(d),
    }
    for i in range(config.n_layers):
        pre = f"layer.{i}."
        for proj in ("query", "key", "value", "output"):
            p[pre + f"attn.{proj}.weight"] = truncated_normal(rng, (d, d), std)
            p[pre + f"attn.{proj}.bias"] = np.zeros(d)
        p[pre + "attn.ln.gamma"] = np.ones(d)
        p[pre + "attn.ln.beta"] = np.zeros(d)
        p[pre + "ffn.in.weight"] = truncated_normal(rng, (d, f), std)
        p[pre + "ffn.in.bias"] = np.zeros(f)
        p[pre + "ffn.out.weight"] = truncated_normal(rng, (f, d), std)
        p[pre + "ffn.out.bias"] = np.zeros(d)
        p[pre + "ffn.ln.gamma"] = np.ones(d)
        p[pre + "ffn.ln.beta"] = np.zeros(d)
    p["span.weight"] = truncated_normal(rng, (d, 2), std)
    p["span.bias"] = np.zeros(2)
    return p


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes = {
        "embeddings.word": (config.vocab_size, d),
        "embeddings.position": (config.max_positions, d),
        "embeddings.segment": (config.type_vocab_size, d),
        "embeddings.ln.gamma": (d,),
        "embeddings.ln.beta": (d,),
    }
    for i in range(config.n_layers):
        pre = f"layer.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[pre + f"attn.{proj}.weight"] = (d, d)
            shapes[pre + f"attn.{proj}.bias"] = (d,)
        shapes.update({
            pre + "attn.ln.gamma": (d,), pre + "attn.ln.beta": (d,),
            pre + "ffn.in.weight": (d, f), pre + "ffn.in.bias": (f,),
            pre + "ffn.out.weight": (f, d), pre + "ffn.out.bias": (d,),
            pre + "ffn.ln.gamma": (d,), pre + "ffn.ln.beta": (d,),
        })
    shapes["span.weight"] = (d, 2)
    shapes["span.bias"] = (2,)
    return shapes


def as_leaves(params: dict[str, np.ndarray]) -> dict[str, T.Tensor]:
    return {name: T.parameter(value, name) for name, value in params.items()}


def layer_params(leaves: dict[str, T.Tensor], i: int) -> dict[str, T.Tensor]:
    pre = f"layer.{i}."
    return {k[len(pre):]: v for k, v in leaves.items() if k.startswith(pre)}


# ---------------------------------------------------------------- forward

def attention_probs(x: T.Tensor, params: dict[str, T.Tensor], mask: np.ndarray,
                    n_heads: int) -> tuple[T.Tensor, T.Tensor]:
    """Per-head attention distributions [B, H, n, n] and the value tensor [B, H, n, dh]."""
    b, n, d = x.shape
    dh = d // n_heads

    def heads(name):
        y = T.linear(x, params[f"attn.{name}.weight"], params[f"attn.{name}.bias"])
        return T.transpose(T.reshape(y, (b, n, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("query"), heads("key"), heads("value")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    return T.masked_softmax(scores, mask[:, None, :, :]), v


def _combine_masks(x: T.Tensor, zone_mask_, padding_mask_) -> np.ndarray:
    b, n, _ = x.shape
    zm = np.zeros((b, n, n)) if zone_mask_ is None else np.broadcast_to(zone_mask_, (b, n, n))
    pm = np.zeros((b, n)) if padding_mask_ is None else np.broadcast_to(padding_mask_, (b, n))
    return zm + pm[:, None, :]


def attention_layer(x: T.Tensor, params: dict[str, T.Tensor], zone_mask_, padding_mask_,
                    n_heads: int, eps: float = 1e-12) -> T.Tensor:
    """One post-LN encoder block. Accepts x of shape [n, d] or [B, n, d].

    Masks are additive: ``zone_mask_`` [n, n] or [B, n, n] and
    ``padding_mask_`` [n] or [B, n] (key side); either may be None.
    """
    single = len(x.shape) == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if len(x.shape) != 3 or x.shape[2] % n_heads:
        raise ValueError(f"attention_layer: bad input shape {x.shape} for {n_heads} heads")
    b, n, d = x.shape
    mask = _combine_masks(x, zone_mask_, padding_mask_)
    probs, v = attention_probs(x, params, mask, n_heads)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, n, d))
    attn = T.linear(ctx, params["attn.output.weight"], params["attn.output.bias"])
    h = T.layer_norm(T.add(x, attn), params["attn.ln.gamma"], params["attn.ln.beta"], eps)
    ff = T.gelu(T.linear(h, params["ffn.in.weight"], params["ffn.in.bias"]))
    ff = T.linear(ff, params["ffn.out.weight"], params["ffn.out.bias"])
    out = T.layer_norm(T.add(h, ff), params["ffn.ln.gamma"], params["ffn.ln.beta"], eps)
    return T.reshape(out, (n, d)) if single else out


def batch_arrays(features: Sequence[Feature]):
    ids = np.array([f.input_ids for f in features], dtype=np.int64)
    segs = np.array([f.segment_ids for f in features], dtype=np.int64)
    pad = np.stack([padding_mask(f.layout) for f in features])
    return ids, segs, pad


def encode_batch(leaves: dict[str, T.Tensor], config: ModelConfig,
                 features: Sequence[Feature], spec: ZoneSpec = IDENTITY_SPEC) -> T.Tensor:
    """Hidden states [B, n, d] with ``spec``'s zone mask injected into its layers."""
    spec.check(config.n_layers)
    ids, segs, pad = batch_arrays(features)
    b, n = ids.shape
    if n > config.max_positions:
        raise ValueError(f"sequence length {n} exceeds max_positions {config.max_positions}")
    positions = np.broadcast_to(np.arange(n), (b, n))
    x = T.add(T.add(T.embedding(leaves["embeddings.word"], ids),
                    T.embedding(leaves["embeddings.position"], positions)),
              T.embedding(leaves["embeddings.segment"], segs))
    x = T.layer_norm(x, leaves["embeddings.ln.gamma"], leaves["embeddings.ln.beta"],
                     config.layer_norm_eps)
    zmask = None
    if spec.zone is not Zone.NONE:
        zmask = np.stack([zone_mask(f.layout, spec.zone) for f in features])
    for i in range(config.n_layers):
        x = attention_layer(x, layer_params(leaves, i), zmask if spec.applies_to(i) else None,
                            pad, config.n_heads, config.layer_norm_eps)
    return x


def encode(feature: Feature, checkpoint, spec: ZoneSpec = IDENTITY_SPEC) -> T.Tensor:
    """Hidden states [n, d] of one feature under ``spec``."""
    leaves = as_leaves(checkpoint.params)
    h = encode_batch(leaves, checkpoint.config, [feature], spec)
    return T.reshape(h, h.shape[1:])


def span_logits(hidden: T.Tensor, weight: T.Tensor, bias: T.Tensor, logit_mask=None
                ) -> tuple[T.Tensor, T.Tensor]:
    """Start/end logits from hidden states [..., n, d]; ``logit_mask`` is additive [..., n]."""
    logits = T.linear(hidden, weight, bias)
    nd = len(logits.shape)
    logits = T.transpose(logits, (nd - 1,) + tuple(range(nd - 1)))
    start, end = T.index(logits, 0), T.index(logits, 1)
    if logit_mask is not None:
        logit_mask = np.broadcast_to(logit_mask, start.shape)
        start, end = T.add_constant(start, logit_mask), T.add_constant(end, logit_mask)
    return start, end


def batch_logits(leaves, config, features, spec=IDENTITY_SPEC):
    hidden = encode_batch(leaves, config, features, spec)
    mask = np.stack([passage_logit_mask(f.layout) for f in features])
    return span_logits(hidden, leaves["span.weight"], leaves["span.bias"], mask)


# ---------------------------------------------------------------- decoding

@dataclass(frozen=True)
class SpanPrediction:
    text: str
    start: int
    end: int
    score: float
    window: int


def predict_span(start_logits, end_logits, feature: Feature, context: str,
                 max_answer_length: int = 30, n_best: int = 20) -> list[SpanPrediction]:
    """Rank every valid (start, end) pair of the passage by start+end logit.

    Ties go to the smaller start, then the smaller end.
    """
    if max_answer_length < 1 or n_best < 1:
        raise ValueError("max_answer_length and n_best must be >= 1")
    p0, p1 = feature.layout.passage_range
    if p1 <= p0:
        raise ValueError("no valid span: empty passage")
    s_log = np.asarray(start_logits, dtype=np.float64)[p0:p1]
    e_log = np.asarray(end_logits, dtype=np.float64)[p0:p1]
    m = p1 - p0
    s_idx, e_idx = np.triu_indices(m)
    keep = e_idx - s_idx < max_answer_length
    s_idx, e_idx = s_idx[keep], e_idx[keep]
    scores = s_log[s_idx] + e_log[e_idx]
    order = np.lexsort((e_idx, s_idx, -scores))[:n_best]
    out = []
    for k in order:
        s, e = int(s_idx[k]) + p0, int(e_idx[k]) + p0
        text = context[feature.token_to_orig[s][0]:feature.token_to_orig[e][1]]
        out.append(SpanPrediction(text, s, e, float(scores[k]), feature.window_index))
    return out


def best_across_windows(candidates: Sequence[SpanPrediction]) -> SpanPrediction:
    """Highest score wins; ties go to the earlier window, then the smaller span indices."""
    if not candidates:
        raise ValueError("no candidates")
    return min(candidates, key=lambda c: (-c.score, c.window, c.start, c.end))

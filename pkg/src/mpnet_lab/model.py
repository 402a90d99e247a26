"""Post-LN transformer encoder with two-stream self-attention.

Both streams share every weight. Keys and values always come from the
content stream; the query stream only supplies queries, starting from a
learned vector plus the absolute embedding of the position it predicts.
A single relative-position bias table (buckets x heads) is shared by all
layers and both streams, and is indexed by original sentence positions,
not slot indices. The output projection is tied to the token embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .masks import MaskPair
from .permute import MpnetLayout
from .tensor import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn: int = 512
    vocab: int = 1024
    max_pos: int = 128
    rel_buckets: int = 32
    rel_max_dist: int = 128
    dropout: float = 0.1
    use_rel_bias: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if min(self.layers, self.hidden, self.heads, self.ffn, self.vocab, self.max_pos, self.rel_buckets) < 1:
            raise ValueError("model sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, val in values.items():
            if key not in known:
                continue
            if known[key] in ("bool", bool):
                out[key] = val if isinstance(val, bool) else str(val).lower() in ("1", "true", "yes")
            elif known[key] in ("float", float):
                out[key] = float(val)
            else:
                out[key] = int(val)
        return cls(**out)


LAYER_TENSORS = ("q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b", "ln1.g", "ln1.b",
                 "ffn1.w", "ffn1.b", "ffn2.w", "ffn2.b", "ln2.g", "ln2.b")
QUERY_STREAM_PARAMS = ("query_vec",)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in checkpoint order."""
    H, F = cfg.hidden, cfg.ffn
    shapes = {
        "tok_emb": (cfg.vocab, H),
        "pos_emb": (cfg.max_pos, H),
        "rel_bias": (cfg.rel_buckets, cfg.heads),
        "query_vec": (H,),
        "emb_ln.g": (H,),
        "emb_ln.b": (H,),
    }
    per_layer = {"q.w": (H, H), "q.b": (H,), "k.w": (H, H), "k.b": (H,), "v.w": (H, H), "v.b": (H,),
                 "o.w": (H, H), "o.b": (H,), "ln1.g": (H,), "ln1.b": (H,), "ffn1.w": (H, F),
                 "ffn1.b": (F,), "ffn2.w": (F, H), "ffn2.b": (H,), "ln2.g": (H,), "ln2.b": (H,)}
    for i in range(cfg.layers):
        for name in LAYER_TENSORS:
            shapes[f"layer{i}.{name}"] = per_layer[name]
    return shapes


def is_no_decay(name: str) -> bool:
    """Biases and layer-norm parameters are exempt from weight decay."""
    return name.endswith(".b") or name.endswith(".g")


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> Params:
    """Normal(0, std) weights, zero biases and shifts, unit layer-norm scales."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def zero_params(cfg: ModelConfig) -> Params:
    return {name: Tensor(np.zeros(shape), requires_grad=True, name=name)
            for name, shape in param_shapes(cfg).items()}


def relative_bucket(delta, rel_buckets: int = 32, rel_max_dist: int = 128) -> np.ndarray:
    """Map signed offsets to bias buckets.

    Non-negative offsets use buckets ``[0, half)`` and negative ones
    ``[half, 2*half)``. Within a half, the first ``half // 2`` distances get
    one bucket each and the rest are spaced logarithmically up to
    ``rel_max_dist``; larger distances share the last bucket.
    """
    delta = np.asarray(delta, dtype=np.int64)
    if rel_buckets < 2:
        return np.zeros(delta.shape, dtype=np.int64)
    half = rel_buckets // 2
    offset = np.where(delta < 0, half, 0)
    dist = np.abs(delta)
    exact = half // 2
    if exact < 1:
        return offset
    safe = np.maximum(dist, 1).astype(np.float64)
    span = max(math.log(rel_max_dist / exact), 1e-12)
    far = exact + (np.log(safe / exact) / span * (half - exact)).astype(np.int64)
    far = np.minimum(far, half - 1)
    return offset + np.where(dist < exact, dist, far)


# ---------------------------------------------------------------------------
# forward


def _linear(x: Tensor, params: Params, name: str) -> Tensor:
    return T.add(T.matmul(x, params[name + ".w"]), params[name + ".b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, H = x.shape
    return T.transpose(T.reshape(x, (B, L, heads, H // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, h * d))


def _rel_bias(params: Params, cfg: ModelConfig, pos_q: np.ndarray, pos_k: np.ndarray) -> Optional[Tensor]:
    if not cfg.use_rel_bias:
        return None
    buckets = relative_bucket(pos_q[:, :, None] - pos_k[:, None, :], cfg.rel_buckets, cfg.rel_max_dist)
    return T.transpose(T.take_rows(params["rel_bias"], buckets), (0, 3, 1, 2))


def _attend(params: Params, cfg: ModelConfig, prefix: str, x: Tensor, k: Tensor, v: Tensor,
            allow: np.ndarray, bias: Optional[Tensor]) -> Tensor:
    q = _split_heads(_linear(x, params, prefix + "q"), cfg.heads)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.head_dim))
    if bias is not None:
        scores = T.add(scores, bias)
    probs = T.masked_softmax(scores, allow[:, None, :, :])
    return _linear(_merge_heads(T.matmul(probs, v)), params, prefix + "o")


def _block(params: Params, cfg: ModelConfig, prefix: str, x: Tensor, attn: Tensor,
           rng: Optional[np.random.Generator]) -> Tensor:
    x = T.layer_norm(T.add(x, T.dropout(attn, cfg.dropout, rng)),
                     params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    f = _linear(T.gelu(_linear(x, params, prefix + "ffn1")), params, prefix + "ffn2")
    return T.layer_norm(T.add(x, T.dropout(f, cfg.dropout, rng)),
                        params[prefix + "ln2.g"], params[prefix + "ln2.b"])


def _embed(params: Params, cfg: ModelConfig, base: Tensor, positions: np.ndarray,
           rng: Optional[np.random.Generator]) -> Tensor:
    x = T.add(T.take_rows(params["pos_emb"], positions), base)
    x = T.layer_norm(x, params["emb_ln.g"], params["emb_ln.b"])
    return T.dropout(x, cfg.dropout, rng)


def _check_positions(cfg: ModelConfig, *arrays: np.ndarray) -> None:
    for a in arrays:
        if a.size and (a.min() < 0 or a.max() >= cfg.max_pos):
            raise ValueError(f"position outside 0..{cfg.max_pos - 1}")


def encode_streams(params: Params, cfg: ModelConfig, ids: np.ndarray, positions: np.ndarray,
                   content_allow: np.ndarray, query_positions: Optional[np.ndarray] = None,
                   query_allow: Optional[np.ndarray] = None,
                   rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Optional[Tensor]]:
    """Batched two-stream encoder.

    Shapes: ``ids``/``positions`` (B, L); ``content_allow`` (B, L, L);
    ``query_positions`` (B, Q); ``query_allow`` (B, Q, L). Returns the
    final content hiddens (B, L, H) and query hiddens (B, Q, H), the
    latter None when there is no query stream.
    """
    ids = np.asarray(ids, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    B, L = ids.shape
    if positions.shape != (B, L) or content_allow.shape != (B, L, L):
        raise ValueError("ids, positions and content_allow disagree in shape")
    two_stream = query_positions is not None and query_positions.shape[1] > 0
    _check_positions(cfg, positions)
    if two_stream:
        query_positions = np.asarray(query_positions, dtype=np.int64)
        if query_allow is None or query_allow.shape != (B, query_positions.shape[1], L):
            raise ValueError("query_allow does not match query_positions and layout length")
        _check_positions(cfg, query_positions)

    h = _embed(params, cfg, T.take_rows(params["tok_emb"], ids), positions, rng)
    bias_c = _rel_bias(params, cfg, positions, positions)
    g = bias_q = None
    if two_stream:
        g = _embed(params, cfg, params["query_vec"], query_positions, rng)
        bias_q = _rel_bias(params, cfg, query_positions, positions)

    for i in range(cfg.layers):
        pre = f"layer{i}."
        k = _split_heads(_linear(h, params, pre + "k"), cfg.heads)
        v = _split_heads(_linear(h, params, pre + "v"), cfg.heads)
        h_attn = _attend(params, cfg, pre, h, k, v, content_allow, bias_c)
        if two_stream:
            g_attn = _attend(params, cfg, pre, g, k, v, query_allow, bias_q)
            g = _block(params, cfg, pre, g, g_attn, rng)
        h = _block(params, cfg, pre, h, h_attn, rng)
    return h, g


def lm_logits(params: Params, hidden: Tensor) -> Tensor:
    """Project hiddens onto the vocabulary with the tied token embedding."""
    return T.matmul(hidden, T.transpose(params["tok_emb"], (1, 0)))


def forward_two_stream(params: Params, cfg: ModelConfig, layout: MpnetLayout, masks: MaskPair,
                       rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
    """Single-sequence convenience wrapper: (content hiddens (L, H), query logits (n-c, V))."""
    plan = layout.plan
    if masks.content_allow.shape != (layout.length, layout.length):
        raise ValueError("content mask does not match the layout length")
    if plan.mode == "mlm" or masks.query_allow.shape[0] == 0:
        raise ValueError("forward_two_stream needs a two-stream layout; use the mlm read-out")
    h, g = encode_streams(params, cfg, layout.input_ids[None], layout.input_positions[None],
                          masks.content_allow[None], plan.predicted[None], masks.query_allow[None], rng)
    logits = lm_logits(params, g)
    return T.reshape(h, h.shape[1:]), T.reshape(logits, logits.shape[1:])


def forward_single(params: Params, cfg: ModelConfig, ids: Sequence[int],
                   valid: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Plain bidirectional encoder over positions 0..n-1 (no query stream).

    ``ids`` may be one sequence (n,) giving (n, H), or a batch (B, n) with an
    optional validity mask giving (B, n, H); padding is never attended to.
    """
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    B, n = ids.shape
    if n > cfg.max_pos:
        raise ValueError(f"sequence of {n} tokens exceeds max_pos={cfg.max_pos}")
    valid = np.ones((B, n), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    allow = np.broadcast_to(valid[:, None, :], (B, n, n))
    positions = np.broadcast_to(np.arange(n), (B, n))
    h, _ = encode_streams(params, cfg, ids, positions, allow, rng=rng)
    return T.reshape(h, (n, cfg.hidden)) if single else h

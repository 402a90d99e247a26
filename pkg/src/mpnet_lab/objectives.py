"""The four pre-training objectives and their analytic bookkeeping.

``mpnet``   permuted order, two-stream prediction, position compensation
``plm``     permuted order, two-stream prediction, no compensation
``mlm_od``  original order, two-stream prediction (MLM plus output dependency)
``mlm``     original order, every predicted token read from its mask slot
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .masks import MaskPair, masks_for
from .model import ModelConfig, Params, encode_streams, lm_logits
from .permute import (
    CorruptionPolicy,
    MpnetLayout,
    PermutationPlan,
    build_layout,
    check_mode,
    prediction_budget,
    sample_plan,
)
from .tensor import Tensor
from .tokenizer import NUM_SPECIAL, Batch


@dataclass(frozen=True)
class ObjectiveSpec:
    mode: str = "mpnet"
    predict_ratio: float = 0.15
    corruption: Optional[CorruptionPolicy] = CorruptionPolicy()

    def __post_init__(self):
        check_mode(self.mode)
        if not 0.0 < self.predict_ratio < 1.0:
            raise ValueError("predict_ratio must be in (0, 1)")


@dataclass
class PreparedBatch:
    """Padded model inputs for a list of layouts plus the read-out recipe."""

    ids: np.ndarray
    positions: np.ndarray
    content_allow: np.ndarray
    query_positions: Optional[np.ndarray]
    query_allow: Optional[np.ndarray]
    readout: str               # "query" or "content"
    read_index: np.ndarray     # rows of the flattened (B*Q or B*L, H) hiddens
    targets: np.ndarray
    layouts: list[MpnetLayout]

    @property
    def num_tokens(self) -> int:
        return int(self.ids.size)


def default_readout(mode: str) -> str:
    return "content" if mode == "mlm" else "query"


def collate_layouts(layouts: Sequence[MpnetLayout], masks: Sequence[MaskPair],
                    readout: Optional[str] = None) -> PreparedBatch:
    """Pad layouts into one batch.

    Padding slots attend only to themselves and nothing attends to them;
    padding query rows are never read.
    """
    if not layouts:
        raise ValueError("empty batch")
    readout = readout or default_readout(layouts[0].plan.mode)
    B = len(layouts)
    L = max(lay.length for lay in layouts)
    Q = max(lay.plan.num_predicted for lay in layouts) if readout == "query" else 0
    ids = np.zeros((B, L), dtype=np.int64)
    pos = np.zeros((B, L), dtype=np.int64)
    callow = np.zeros((B, L, L), dtype=bool)
    callow[:, np.arange(L), np.arange(L)] = True
    qpos = np.zeros((B, Q), dtype=np.int64)
    qallow = np.zeros((B, Q, L), dtype=bool)
    qallow[:, :, 0] = True
    read, targets = [], []
    for b, (lay, m) in enumerate(zip(layouts, masks)):
        n, c, k, Lb = lay.plan.n, lay.plan.c, lay.plan.num_predicted, lay.length
        ids[b, :Lb] = lay.input_ids
        pos[b, :Lb] = lay.input_positions
        callow[b, :Lb, :Lb] = m.content_allow
        if readout == "query":
            if m.query_allow.shape != (k, Lb):
                raise ValueError("query read-out needs a two-stream mask pair")
            qpos[b, :k] = lay.plan.predicted
            qallow[b, :k, :] = False
            qallow[b, :k, :Lb] = m.query_allow
            read.extend(b * Q + np.arange(k))
        else:
            read.extend(b * L + c + np.arange(k))
        targets.extend(lay.targets)
    two = readout == "query"
    return PreparedBatch(ids, pos, callow, qpos if two else None, qallow if two else None, readout,
                         np.asarray(read, dtype=np.int64), np.asarray(targets, dtype=np.int64), list(layouts))


def _rows(batch) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    if isinstance(batch, Batch):
        return batch.rows()
    return [(np.asarray(ids), np.asarray(ws, dtype=bool)) for ids, ws in batch]


def prepare_batch(spec: ObjectiveSpec, batch: Union[Batch, Sequence], seed=0,
                  vocab_size: Optional[int] = None) -> PreparedBatch:
    """Sample one plan per sequence, lay it out and build its masks.

    Reserved ids (PAD, MASK, UNK, CLS, SEP) are never predicted.
    """
    seed = tuple(np.atleast_1d(seed).tolist())
    layouts, masks = [], []
    for r, (ids, ws) in enumerate(_rows(batch)):
        special = ids < NUM_SPECIAL
        plan = sample_plan(len(ids), ws, spec.predict_ratio, spec.mode, seed + (r, 0), special=special)
        layouts.append(build_layout(plan, ids, spec.corruption, seed + (r, 1), vocab_size))
        masks.append(masks_for(plan))
    return collate_layouts(layouts, masks)


def prediction_logits(params: Params, cfg: ModelConfig, prepared: PreparedBatch,
                      rng: Optional[np.random.Generator] = None) -> Tensor:
    """Logits (num predicted tokens, V) in layout order."""
    p = prepared
    h, g = encode_streams(params, cfg, p.ids, p.positions, p.content_allow,
                          p.query_positions, p.query_allow, rng)
    hid = g if p.readout == "query" else h
    B, S, H = hid.shape
    picked = T.take_rows(T.reshape(hid, (B * S, H)), p.read_index)
    return lm_logits(params, picked)


def batch_loss(params: Params, cfg: ModelConfig, prepared: PreparedBatch,
               rng: Optional[np.random.Generator] = None) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood over predicted tokens, and the per-token values."""
    logits = prediction_logits(params, cfg, prepared, rng)
    loss = T.cross_entropy(logits, prepared.targets)
    logp = T.log_softmax_rows(logits.data)
    nll = -logp[np.arange(len(prepared.targets)), prepared.targets]
    return loss, nll


def loss(spec: ObjectiveSpec, params: Params, cfg: ModelConfig, batch, seed=0,
         rng: Optional[np.random.Generator] = None) -> tuple[Tensor, np.ndarray]:
    """Sample plans for ``batch`` under ``spec`` and return (mean loss, per-token nll)."""
    return batch_loss(params, cfg, prepare_batch(spec, batch, seed, cfg.vocab), rng)


def sequence_loss(params: Params, cfg: ModelConfig, layout: MpnetLayout, masks: MaskPair,
                  readout: Optional[str] = None) -> tuple[Tensor, np.ndarray]:
    """Loss of one laid-out sequence under explicit masks and read-out."""
    return batch_loss(params, cfg, collate_layouts([layout], [masks], readout))


# ---------------------------------------------------------------------------
# information accounting


def info_fraction(mode: str, n: Optional[int] = None, ratio: float = 0.15) -> tuple[Fraction, Fraction]:
    """Average share of tokens and positions a predicted token conditions on.

    With ``k`` predicted tokens, autoregressive prediction sees on average
    ``(k - 1) / 2`` earlier predicted tokens on top of the ``n - k`` kept
    ones. ``n=None`` gives the large-``n`` limit with ``k = ratio * n``.
    """
    check_mode(mode)
    r = Fraction(ratio).limit_denominator(10**6)
    if n is None:
        mlm_tokens = 1 - r
        ar_tokens = 1 - r / 2
    else:
        if n < 2:
            raise ValueError("n must be at least 2")
        k = prediction_budget(n, ratio)
        mlm_tokens = Fraction(n - k, n)
        ar_tokens = (n - k + Fraction(k - 1, 2)) / n
    if mode == "mlm":
        return mlm_tokens, Fraction(1)
    if mode == "plm":
        return ar_tokens, ar_tokens
    return ar_tokens, Fraction(1)


def format_info(mode: str, ratio: float = 0.15, n: Optional[int] = None) -> str:
    tokens, positions = info_fraction(mode, n, ratio)
    return f"tokens {float(tokens) * 100:.1f}% positions {float(positions) * 100:.1f}%"


# ---------------------------------------------------------------------------
# output dependency


@dataclass(frozen=True)
class DependencyDemo:
    mode: str
    p_revealed: float   # P(second | first already predicted)
    p_masked: float     # P(second | first still masked)

    @property
    def ratio(self) -> float:
        return self.p_revealed / self.p_masked


def _pair_plan(n: int, first: int, second: int, order: tuple[int, int], mode: str) -> PermutationPlan:
    rest = [p for p in range(n) if p not in (first, second)]
    return PermutationPlan(np.array(rest + list(order)), n - 2, mode, None)


def _prob_of(params: Params, cfg: ModelConfig, plan: PermutationPlan, ids: np.ndarray,
             step: int, token: int) -> float:
    lay = build_layout(plan, ids)
    with T.no_grad():
        logits = prediction_logits(params, cfg, collate_layouts([lay], [masks_for(plan)])).data
    return float(np.exp(T.log_softmax_rows(logits)[step, token]))


def dependency_demo(params: Params, cfg: ModelConfig, ids: Sequence[int], first: int, second: int,
                    mode: str = "mpnet") -> DependencyDemo:
    """Probability of the token at ``second`` with ``first`` revealed vs masked.

    Both positions are predicted and every other token is context. For the
    two-stream modes, "revealed" predicts ``first`` then ``second`` and
    "masked" uses the opposite order. The ``mlm`` mode predicts both
    independently, so its two numbers coincide.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    target = int(ids[second])
    if mode in ("mlm", "mlm_od"):
        pair = (min(first, second), max(first, second))
        plan = _pair_plan(n, first, second, pair, mode)
        step = pair.index(second)
        p = _prob_of(params, cfg, plan, ids, step, target)
        if mode == "mlm":
            return DependencyDemo(mode, p, p)
        masked_plan = dataclasses.replace(plan, mode="mlm")
        p_masked = _prob_of(params, cfg, masked_plan, ids, step, target)
        return DependencyDemo(mode, p, p_masked)
    revealed = _prob_of(params, cfg, _pair_plan(n, first, second, (first, second), mode), ids, 1, target)
    masked = _prob_of(params, cfg, _pair_plan(n, first, second, (second, first), mode), ids, 0, target)
    return DependencyDemo(mode, revealed, masked)


def conditioning_table(words: Sequence[str], predicted: Sequence[int]) -> list[str]:
    """Render what each objective conditions on, one line per mode.

    ``predicted`` lists positions in prediction order; the rest is context.
    A visible mask slot is shown as ``[M]``; the carrier slot a PLM step
    uses for its own position is not a token and is left out.
    """
    n = len(words)
    rest = [p for p in range(n) if p not in predicted]
    lines = []
    for mode, label in (("mlm", "MLM"), ("plm", "PLM"), ("mpnet", "MPNet")):
        plan = PermutationPlan(np.array(rest + list(predicted)), len(rest), mode, None)
        lay = build_layout(plan, np.arange(n) + NUM_SPECIAL)
        m = masks_for(plan)
        terms = []
        for j, target in enumerate(predicted):
            row = m.content_allow[plan.c + j] if mode == "mlm" else m.query_allow[j]
            seen: dict[int, str] = {}
            for s in np.flatnonzero(row):
                pos = int(lay.input_positions[s])
                is_mask = plan.c <= s < n
                if is_mask and mode == "plm":
                    continue
                if pos not in seen or not is_mask:
                    seen[pos] = "[M]" if is_mask else words[pos]
            context = " ".join(seen[p] for p in sorted(seen))
            terms.append(f"log P({words[target]} | {context})")
        lines.append(f"{label}: " + " + ".join(terms))
    return lines

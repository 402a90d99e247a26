"""Factorization-order sampling and the two-stream input layout.

Positions are 0-based throughout the code; :func:`symbolic_tokens` renders
them 1-based (``x1``, ``p1``) to match the usual notation.

Layout of a sequence of length ``n`` with ``c`` non-predicted tokens and
``k = n - c`` predicted ones (``L = n + k`` slots)::

    slots 0 .. c-1      kept tokens          x[z[:c]]   at positions z[:c]
    slots c .. n-1      mask tokens          [MASK]     at positions z[c:]
    slots n .. L-1      predicted tokens     x[z[c:]]   at positions z[c:]

The ``mlm`` mode stops after the mask slots (``L = n``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .tokenizer import MASK, NUM_SPECIAL

MODES = ("mpnet", "plm", "mlm", "mlm_od")
TWO_STREAM_MODES = ("mpnet", "plm", "mlm_od")


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode


@dataclass(frozen=True)
class PermutationPlan:
    z: np.ndarray       # factorization order, 0-based positions
    c: int              # number of non-predicted tokens
    mode: str
    words: np.ndarray   # word index of every original position

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.int64)
        object.__setattr__(self, "z", z)
        n = len(z)
        if n < 1 or not np.array_equal(np.sort(z), np.arange(n)):
            raise ValueError("z must be a permutation of 0..n-1")
        if not 0 <= self.c <= n:
            raise ValueError(f"split point c={self.c} outside 0..{n}")
        check_mode(self.mode)
        words = np.arange(n) if self.words is None else np.asarray(self.words, dtype=np.int64)
        if words.shape != (n,):
            raise ValueError("words must have one entry per position")
        object.__setattr__(self, "words", words)

    @property
    def n(self) -> int:
        return len(self.z)

    @property
    def num_predicted(self) -> int:
        return self.n - self.c

    @property
    def kept(self) -> np.ndarray:
        return self.z[: self.c]

    @property
    def predicted(self) -> np.ndarray:
        return self.z[self.c:]

    @classmethod
    def from_order(cls, order: Sequence[int], c: int, mode: str = "mpnet",
                   words: Optional[Sequence[int]] = None, one_based: bool = True) -> "PermutationPlan":
        """Build a plan from an explicit order, e.g. ``(1, 3, 5, 4, 6, 2)``."""
        z = np.asarray(order, dtype=np.int64) - (1 if one_based else 0)
        return cls(z, c, mode, None if words is None else np.asarray(words))


def _units(word_start: np.ndarray, special: np.ndarray) -> list[list[int]]:
    """Group positions into whole words; every special token stands alone."""
    units: list[list[int]] = []
    for i, (start, spec) in enumerate(zip(word_start, special)):
        if spec or start or not units or special[i - 1]:
            units.append([i])
        else:
            units[-1].append(i)
    return units


def prediction_budget(maskable: int, ratio: float) -> int:
    """``ceil(ratio * maskable)``, at least 1, computed exactly."""
    r = Fraction(ratio).limit_denominator(10**6)
    return max(1, min(maskable, math.ceil(r * maskable)))


def sample_plan(n: int, word_start: Sequence[bool], ratio: float = 0.15, mode: str = "mpnet",
                seed=0, special: Optional[Sequence[bool]] = None) -> PermutationPlan:
    """Sample a factorization order with whole words as the permutation unit.

    Words are shuffled uniformly; predicted words are taken from the right
    of the shuffled order (skipping special tokens) until at least
    ``ceil(ratio * m)`` of the ``m`` maskable tokens are covered. In the
    ``mlm`` and ``mlm_od`` modes both parts are then put back in ascending
    position order, so only the choice of predicted words is random.
    """
    check_mode(mode)
    ws = np.asarray(word_start, dtype=bool)
    sp = np.zeros(n, dtype=bool) if special is None else np.asarray(special, dtype=bool)
    if n < 2 or ws.shape != (n,) or sp.shape != (n,):
        raise ValueError("need n >= 2 and word_start/special of length n")
    units = _units(ws, sp)
    maskable = int((~sp).sum())
    if maskable == 0:
        raise ValueError("no maskable token in the sequence")
    budget = prediction_budget(maskable, ratio)

    rng = np.random.default_rng(seed)
    shuffled = [units[i] for i in rng.permutation(len(units))]
    chosen: set[int] = set()
    covered = 0
    for u in range(len(shuffled) - 1, -1, -1):
        if covered >= budget:
            break
        if not sp[shuffled[u][0]]:
            chosen.add(u)
            covered += len(shuffled[u])
    head = [p for u, unit in enumerate(shuffled) if u not in chosen for p in unit]
    tail = [p for u, unit in enumerate(shuffled) if u in chosen for p in unit]
    if mode in ("mlm", "mlm_od"):
        head, tail = sorted(head), sorted(tail)

    words = np.empty(n, dtype=np.int64)
    for w, unit in enumerate(units):
        words[unit] = w
    return PermutationPlan(np.array(head + tail), len(head), mode, words)


@dataclass(frozen=True)
class CorruptionPolicy:
    """How a mask slot is filled: [MASK], a random token, or the original."""

    p_mask: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1

    def __post_init__(self):
        probs = (self.p_mask, self.p_random, self.p_keep)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError("corruption probabilities must be nonnegative and sum to 1")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Tags 0=mask, 1=random, 2=keep."""
        u = rng.random(size)
        return (u >= self.p_mask).astype(np.int64) + (u >= self.p_mask + self.p_random)


CORRUPTION_TAGS = ("mask", "random", "keep")


@dataclass(frozen=True)
class MpnetLayout:
    input_ids: np.ndarray        # (L,)
    input_positions: np.ndarray  # (L,) original 0-based positions
    targets: np.ndarray          # (n - c,) true ids of the predicted tokens
    corrupt_record: tuple[str, ...]  # one tag per mask slot
    plan: PermutationPlan

    @property
    def length(self) -> int:
        return len(self.input_ids)

    def roles(self) -> list[str]:
        n, c = self.plan.n, self.plan.c
        return ["kept" if s < c else "mask" if s < n else "predicted" for s in range(self.length)]


def build_layout(plan: PermutationPlan, ids: Sequence[int], corrupt: Optional[CorruptionPolicy] = None,
                 seed=0, vocab_size: Optional[int] = None) -> MpnetLayout:
    """Lay out kept tokens, mask tokens, and (two-stream modes) the predicted tokens.

    With a corruption policy, each predicted word gets one draw that all
    of its subwords share. The predicted-token slots always hold the true
    ids.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != (plan.n,):
        raise ValueError(f"plan covers {plan.n} tokens but {len(ids)} ids were given")
    z, c = plan.z, plan.c
    pred = z[c:]
    mask_fill = np.full(len(pred), MASK, dtype=np.int64)
    tags = np.zeros(len(pred), dtype=np.int64)
    if corrupt is not None and len(pred):
        rng = np.random.default_rng(seed)
        word_of = plan.words[pred]
        uniq, inverse = np.unique(word_of, return_inverse=True)
        tags = corrupt.draw(rng, len(uniq))[inverse]
        if (tags == 1).any():
            if vocab_size is None or vocab_size <= NUM_SPECIAL:
                raise ValueError("random replacement needs vocab_size above the reserved ids")
            rand = rng.integers(NUM_SPECIAL, vocab_size, size=len(pred))
            mask_fill = np.where(tags == 1, rand, mask_fill)
        mask_fill = np.where(tags == 2, ids[pred], mask_fill)

    if plan.mode == "mlm":
        input_ids = np.concatenate([ids[z[:c]], mask_fill])
        positions = z.copy()
    else:
        input_ids = np.concatenate([ids[z[:c]], mask_fill, ids[pred]])
        positions = np.concatenate([z, pred])
    record = tuple(CORRUPTION_TAGS[t] for t in tags)
    return MpnetLayout(input_ids, positions, ids[pred].copy(), record, plan)


def symbolic_tokens(layout: MpnetLayout) -> list[str]:
    """Render slots as ``x<i>``/``[M]`` using the original 1-based positions."""
    return ["[M]" if role == "mask" and tid == MASK else f"x{pos + 1}"
            for role, tid, pos in zip(layout.roles(), layout.input_ids, layout.input_positions)]

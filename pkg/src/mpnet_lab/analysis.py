"""Brute-force verifiers: dependency probes, mask closures, gradient and corruption checks.

The probe answers "which inputs can move step t's logits?" by perturbing
inputs and watching the outputs. The closure answers the same question by
walking the attention masks. The two are computed independently so one can
check the other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .masks import MaskPair
from .model import ModelConfig, Params
from .objectives import collate_layouts, default_readout, prediction_logits
from .permute import CorruptionPolicy, MpnetLayout, PermutationPlan, build_layout
from .tensor import Tensor

PROBE_THRESHOLD = 1e-12


@dataclass(frozen=True)
class DependencyReport:
    """Per prediction step: which original positions (0-based) matter.

    ``tokens[t]`` holds positions whose token identity moves step t's
    logits, ``positions[t]`` those whose position does.
    """

    mode: str
    steps: tuple[int, ...]                    # position predicted at each step
    tokens: tuple[frozenset, ...]
    positions: tuple[frozenset, ...]
    token_change: Optional[np.ndarray] = field(default=None, compare=False, repr=False)     # (k, n)
    position_change: Optional[np.ndarray] = field(default=None, compare=False, repr=False)  # (k, n)

    def rows(self) -> list[tuple[int, int, str, str]]:
        fmt = lambda s: ",".join(str(p + 1) for p in sorted(s)) or "-"
        return [(t + 1, p + 1, fmt(tok), fmt(pos))
                for t, (p, tok, pos) in enumerate(zip(self.steps, self.tokens, self.positions))]

    def to_tsv(self) -> str:
        lines = ["step\tpredicts\ttokens\tpositions"]
        lines += ["\t".join(map(str, r)) for r in self.rows()]
        return "\n".join(lines) + "\n"

    def render(self) -> str:
        """Aligned text table; positions are 1-based."""
        head = ("step", "predicts", "tokens seen", "positions seen")
        body = [tuple(map(str, r)) for r in self.rows()]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        out = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        out += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
        return "\n".join(line.rstrip() for line in out)


def mask_closure(layout: MpnetLayout, masks: MaskPair, layers: int,
                 readout: Optional[str] = None) -> DependencyReport:
    """Dependency sets implied by the masks alone.

    A slot starts out carrying its own position and, unless it is a mask
    slot, its token. Each layer a slot collects what its allowed slots
    carried one layer earlier (plus its own, through the residual). A
    query row starts with its target position only and reads the content
    stream of the same layer.
    """
    plan = layout.plan
    readout = readout or default_readout(plan.mode)
    n, c, k = plan.n, plan.c, plan.num_predicted
    L = layout.length
    pos = [int(p) for p in layout.input_positions]
    tok = [set() if c <= s < n else {pos[s]} for s in range(L)]
    where = [{pos[s]} for s in range(L)]
    qtok = [set() for _ in range(k)]
    qpos = [{int(p)} for p in plan.predicted] if readout == "query" else []
    allow_c = masks.content_allow
    for _ in range(layers):
        if readout == "query":
            for j in range(k):
                for s in np.flatnonzero(masks.query_allow[j]):
                    qtok[j] |= tok[s]
                    qpos[j] |= where[s]
        new_tok, new_pos = [], []
        for s in range(L):
            t, p = set(tok[s]), set(where[s])
            for col in np.flatnonzero(allow_c[s]):
                t |= tok[col]
                p |= where[col]
            new_tok.append(t)
            new_pos.append(p)
        tok, where = new_tok, new_pos
    if readout == "content":
        qtok = [tok[c + j] for j in range(k)]
        qpos = [where[c + j] for j in range(k)]
    return DependencyReport(plan.mode, tuple(int(p) for p in plan.predicted),
                            tuple(frozenset(s) for s in qtok), tuple(frozenset(s) for s in qpos))


def probe_dependencies(params: Params, cfg: ModelConfig, layout: MpnetLayout, masks: MaskPair,
                       vocab_size: Optional[int] = None, readout: Optional[str] = None,
                       threshold: float = PROBE_THRESHOLD) -> DependencyReport:
    """Dependency sets found by perturbing inputs (corruption must be off).

    Tokens: every original token is swept through all ``vocab_size`` ids.
    Positions: every occurrence of position ``j`` is moved to an unused
    position index, which changes its absolute embedding and, consistently,
    every relative offset it takes part in.
    """
    plan = layout.plan
    readout = readout or default_readout(plan.mode)
    vocab_size = vocab_size or cfg.vocab
    n, k = plan.n, plan.num_predicted
    if cfg.max_pos <= n:
        raise ValueError("position probe needs max_pos > n")
    original = np.empty(n, dtype=np.int64)
    original[plan.z[: plan.c]] = layout.input_ids[: plan.c]
    original[plan.predicted] = layout.targets
    if any(tag != "mask" for tag in layout.corrupt_record):
        raise ValueError("probe needs an uncorrupted layout")

    variants, owners = [layout], [(-1, -1)]
    for j in range(n):
        for alt in range(vocab_size):
            if alt != original[j]:
                ids = original.copy()
                ids[j] = alt
                variants.append(build_layout(plan, ids))
                owners.append((0, j))
    for j in range(n):
        variants.append(layout)
        owners.append((1, j))
    prep = collate_layouts(variants, [masks] * len(variants), readout)
    fresh = n
    for b, (kind, j) in enumerate(owners):
        if kind == 1:
            prep.positions[b][prep.positions[b] == j] = fresh
            if prep.query_positions is not None:
                prep.query_positions[b][prep.query_positions[b] == j] = fresh
    with T.no_grad():
        logits = prediction_logits(params, cfg, prep).data.reshape(len(variants), k, -1)
    delta = np.abs(logits - logits[0]).max(axis=-1)  # (variants, k)
    tok_change = np.zeros((k, n))
    pos_change = np.zeros((k, n))
    for b, (kind, j) in enumerate(owners):
        if kind == 0:
            tok_change[:, j] = np.maximum(tok_change[:, j], delta[b])
        elif kind == 1:
            pos_change[:, j] = delta[b]
    tokens = tuple(frozenset(np.flatnonzero(tok_change[t] > threshold).tolist()) for t in range(k))
    positions = tuple(frozenset(np.flatnonzero(pos_change[t] > threshold).tolist()) for t in range(k))
    return DependencyReport(plan.mode, tuple(int(p) for p in plan.predicted), tokens, positions,
                            tok_change, pos_change)


# ---------------------------------------------------------------------------
# gradients


@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    per_tensor: dict[str, float]
    coords_checked: int


def fd_gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-4,
                 coords: int = 64, seed: int = 0, floor: float = 1e-6) -> GradCheck:
    """Central differences against backward for every tensor in ``params``.

    Tensors with more than ``coords`` entries are checked on a random
    sample of that many coordinates. The relative error of a coordinate is
    ``|a - f| / max(|a|, |f|, floor)``; the floor keeps gradients that are
    zero in exact arithmetic from turning rounding noise into large ratios.
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    per: dict[str, float] = {}
    total = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = np.zeros(flat.size) if p.grad is None else p.grad.reshape(-1)
        picks = np.arange(flat.size) if flat.size <= coords else rng.choice(flat.size, coords, replace=False)
        worst = 0.0
        for i in picks:
            old = flat[i]
            with T.no_grad():
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
            flat[i] = old
            num = (up - down) / (2.0 * eps)
            worst = max(worst, abs(num - grad[i]) / max(abs(num), abs(grad[i]), floor))
        per[name] = worst
        total += len(picks)
    return GradCheck(max(per.values(), default=0.0), per, total)


# ---------------------------------------------------------------------------
# corruption


TAG_ORDER = ("mask", "random", "keep")


def corruption_stats(policy: Optional[CorruptionPolicy], trials: int, seed: int = 0,
                     chunk: int = 2000) -> tuple[float, float, float]:
    """Empirical (mask, random, keep) frequencies over ``trials`` single-token words."""
    if trials < 1:
        raise ValueError("trials must be positive")
    counts = dict.fromkeys(TAG_ORDER, 0)
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        plan = PermutationPlan(np.arange(m + 1), 1, "mpnet", None)
        lay = build_layout(plan, np.full(m + 1, 7), policy, seed=(seed, done), vocab_size=64)
        for tag in lay.corrupt_record:
            counts[tag] += 1
        done += m
    return tuple(counts[t] / trials for t in TAG_ORDER)


def word_consistency_failures(policy: Optional[CorruptionPolicy], words: int = 1000, seed: int = 0) -> int:
    """Number of multi-subword words whose pieces got different corruption tags."""
    rng = np.random.default_rng(seed)
    pieces = rng.integers(2, 5, size=words)
    ids = np.repeat(np.arange(words), pieces)
    plan = PermutationPlan(np.arange(len(ids)), 0, "mpnet", ids)
    rec = np.array(build_layout(plan, np.full(len(ids), 9), policy, seed=seed, vocab_size=64).corrupt_record)
    bad = 0
    for w in range(words):
        if len(set(rec[ids == w])) != 1:
            bad += 1
    return bad

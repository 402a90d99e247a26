"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor requiring gradients records its
parents and a backward rule on the output. :func:`backward` walks the
recorded graph in reverse topological order and accumulates gradients
into ``.grad``.

Only the operations a small transformer needs are provided, and
broadcasting is limited to adding/multiplying a trailing-shape operand
(e.g. a bias vector over rows).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import ndtr

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def _check_trailing(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise ValueError(f"{op}: shape {b.shape} does not match trailing dims of {a.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, *shape).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b``; ``b`` may match only the trailing dimensions of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a.data, b.data, "add")
    shape_b = b.shape

    def rule(g):
        return g, _unbroadcast(g, shape_b)

    return _result(a.data + b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; same trailing-shape rule as :func:`add`."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def rule(g):
        return g * bd, _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), rule)


def scale(a: Tensor, s: float) -> Tensor:
    return _result(a.data * s, (a,), lambda g: (g * s,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    xd = x.data
    cdf = ndtr(xd)

    def rule(g):
        pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), rule)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout. Identity when ``rng`` is None or ``p == 0``."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain 2-D matrix (shared across the leading axes of
    ``a``) or has exactly the same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ, {ad.shape} vs {bd.shape}")

    if bd.ndim == 2:
        # one large GEMM instead of a loop over the leading axes
        a2 = ad.reshape(-1, ad.shape[-1])

        def rule(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _result((a2 @ bd).reshape(ad.shape[:-1] + bd.shape[-1:]), (a, b), rule)

    def rule(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), rule)


def take_rows(table: Tensor, index) -> Tensor:
    """Gather ``table[index]`` along axis 0; backward scatter-adds.

    Repeated indices accumulate, which is what tied embeddings need.
    """
    idx = np.asarray(index, dtype=np.int64)
    td = table.data
    if idx.size and (idx.min() < 0 or idx.max() >= td.shape[0]):
        raise IndexError(f"take_rows: index out of range for {td.shape[0]} rows")

    flat = idx.ravel()
    order = np.argsort(flat, kind="stable")
    ordered = flat[order]
    starts = np.flatnonzero(np.r_[True, ordered[1:] != ordered[:-1]]) if flat.size else flat

    def rule(g):
        # sort + segment sums: same result as np.add.at, much faster
        gt = np.zeros_like(td)
        if flat.size:
            rows = g.reshape((flat.size,) + td.shape[1:])[order]
            gt[ordered[starts]] = np.add.reduceat(rows, starts, axis=0)
        return (gt,)

    return _result(td[idx], (table,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned scale and shift."""
    xd, gd = x.data, gamma.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def rule(g):
        gx_hat = g * gd
        h = xd.shape[-1]
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, h).sum(axis=0)
        gbeta = g.reshape(-1, h).sum(axis=0)
        return gx, ggamma, gbeta

    return _result(xhat * gd + beta.data, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# attention and losses


def masked_softmax(scores: Tensor, allow) -> Tensor:
    """Softmax over the last axis restricted to ``allow``.

    ``allow`` is boolean and broadcastable to ``scores``. Disallowed
    entries come out exactly 0. Every row must allow at least one entry.
    """
    allow = np.asarray(allow, dtype=bool)
    sd = scores.data
    if not np.broadcast_to(allow, sd.shape).any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no allowed entries")
    s = np.where(allow, sd, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (scores,), rule)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` under row-wise softmax.

    ``reduction`` is ``"mean"`` (scalar) or ``"none"`` (one value per row).
    """
    ld = logits.data
    t = np.asarray(targets, dtype=np.int64)
    if ld.ndim != 2 or t.shape != (ld.shape[0],):
        raise ValueError(f"cross_entropy: logits {ld.shape} vs targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= ld.shape[1]):
        raise ValueError("cross_entropy: target id out of range")
    logp = log_softmax_rows(ld)
    rows = np.arange(len(t))
    nll = -logp[rows, t]
    probs = np.exp(logp)
    probs[rows, t] -= 1.0

    if reduction == "none":
        return _result(nll, (logits,), lambda g: (probs * g[:, None],))
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    count = max(len(t), 1)
    return _result(np.asarray(nll.sum() / count), (logits,), lambda g: (probs * (g / count),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf.

    Intermediate results do not keep gradients. Tensors not reachable
    from ``loss`` keep whatever ``grad`` they had.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg

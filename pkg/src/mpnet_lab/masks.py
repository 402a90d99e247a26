"""Attention-permission matrices for the content and query streams.

Rows are attending slots, columns attended slots, in the slot order of
:mod:`mpnet_lab.permute`. With ``k = n - c`` predicted tokens, query row
``j`` belongs to prediction step ``t = c + 1 + j`` (1-based), whose mask
slot is ``c + j`` and whose true-token slot is ``n + j``.

MPNet grants each row exactly ``n`` permissions:

* non-predicted rows (slots ``0..n-1``) see all of ``0..n-1``;
* query row ``j`` sees the kept slots, mask slots ``c+j..n-1`` (own
  position and every later one) and true-token slots ``n..n+j-1``;
* content row ``n+j`` sees the kept slots, mask slots ``c+j+1..n-1`` and
  true-token slots ``n..n+j``.

The mask-slot permissions that are not a step's own position are the
position compensation; removing them gives the PLM masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .permute import PermutationPlan


@dataclass(frozen=True)
class MaskPair:
    content_allow: np.ndarray  # (L, L) bool
    query_allow: np.ndarray    # (n - c, L) bool; zero rows when there is no query stream

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskPair):
            return NotImplemented
        return (np.array_equal(self.content_allow, other.content_allow)
                and np.array_equal(self.query_allow, other.query_allow))

    __hash__ = None


def _require(plan: PermutationPlan, modes: tuple[str, ...], fn: str) -> None:
    if plan.mode not in modes:
        raise ValueError(f"{fn} does not apply to mode {plan.mode!r}")


def mpnet_masks(plan: PermutationPlan) -> MaskPair:
    """Two-stream masks with position compensation (also used by ``mlm_od``)."""
    _require(plan, ("mpnet", "mlm_od"), "mpnet_masks")
    n, c = plan.n, plan.c
    k = n - c
    L = n + k
    content = np.zeros((L, L), dtype=bool)
    query = np.zeros((k, L), dtype=bool)
    content[:n, :n] = True
    for j in range(k):
        row = content[n + j]
        row[:c] = True
        row[c + j + 1:n] = True
        row[n:n + j + 1] = True
        q = query[j]
        q[:c] = True
        q[c + j:n] = True
        q[n:n + j] = True
    return MaskPair(content, query)


def plm_masks(plan: PermutationPlan) -> MaskPair:
    """Two-stream masks without compensation.

    Each mask slot only carries its own position (plus the kept context
    every step already sees) and is visible only to its own query row.
    """
    _require(plan, ("plm",), "plm_masks")
    n, c = plan.n, plan.c
    k = n - c
    L = n + k
    content = np.zeros((L, L), dtype=bool)
    query = np.zeros((k, L), dtype=bool)
    content[:c, :c] = True
    for j in range(k):
        content[c + j, :c] = True
        content[c + j, c + j] = True
        row = content[n + j]
        row[:c] = True
        row[n:n + j + 1] = True
        q = query[j]
        q[:c] = True
        q[c + j] = True
        q[n:n + j] = True
    return MaskPair(content, query)


def mlm_masks(plan: PermutationPlan) -> MaskPair:
    """Full bidirectional attention over ``(kept tokens, masks)``; no query stream."""
    _require(plan, ("mlm",), "mlm_masks")
    n = plan.n
    return MaskPair(np.ones((n, n), dtype=bool), np.zeros((0, n), dtype=bool))


def masks_for(plan: PermutationPlan) -> MaskPair:
    if plan.mode == "mlm":
        return mlm_masks(plan)
    if plan.mode == "plm":
        return plm_masks(plan)
    return mpnet_masks(plan)


def strip_compensation(masks: MaskPair, plan: PermutationPlan) -> MaskPair:
    """Remove every permission into a mask slot except a step's own carrier.

    Applied to :func:`mpnet_masks` this yields exactly :func:`plm_masks`.
    """
    n, c = plan.n, plan.c
    k = n - c
    content = masks.content_allow.copy()
    query = masks.query_allow.copy()
    content[:, c:n] = False
    query[:, c:n] = False
    own = np.arange(k)
    content[c + own, c + own] = True
    query[own, c + own] = True
    return MaskPair(content, query)


def render(masks: MaskPair) -> str:
    """Text dump: ``stream rows cols`` header, then one 0/1 string per row."""
    lines = []
    for name, m in (("content", masks.content_allow), ("query", masks.query_allow)):
        lines.append(f"{name} {m.shape[0]} {m.shape[1]}")
        lines.extend("".join("1" if v else "0" for v in row) for row in m)
    return "\n".join(lines)

"""Optimal one-to-one assignment of proposals to ground-truth instances."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import pairwise_giou, to_xyxy


@dataclass(frozen=True)
class MatchWeights:
    l1: float = 1.0
    giou: float = 1.0
    cls: float = 1.0


@dataclass
class CostMatrix:
    values: np.ndarray
    weights: MatchWeights = field(default_factory=MatchWeights)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class Assignment:
    pairs: list  # (proposal, target), sorted by proposal
    total_cost: float

    @property
    def proposals(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def targets(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.int64)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def build_cost_matrix(pred_boxes, logits, target_boxes, positive_queries, weights: MatchWeights | None = None):
    """Matching cost between ``P`` proposals and ``T`` targets.

    ``pred_boxes``/``target_boxes`` are cxcywh arrays, ``logits`` is ``P x Q``
    and ``positive_queries[j]`` lists the query columns that are positive for
    target ``j``.  All inputs are plain arrays (no gradient).
    """
    w = weights or MatchWeights()
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    tgt = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)
    logits = np.asarray(logits, dtype=np.float64).reshape(len(pred), -1)
    P, T = len(pred), len(tgt)
    if len(positive_queries) != T:
        raise ValueError(f"expected {T} positive-query lists, got {len(positive_queries)}")
    if T == 0 or P == 0:
        return CostMatrix(np.zeros((P, T)), w)
    for j, qs in enumerate(positive_queries):
        if len(qs) == 0:
            raise ValueError(f"target {j} has no positive query in the query set")
    l1 = np.abs(pred[:, None, :] - tgt[None, :, :]).sum(axis=-1)
    giou = pairwise_giou(to_xyxy(pred), to_xyxy(tgt))
    prob = _sigmoid(logits)
    cls = np.stack([(1.0 - prob[:, list(qs)]).mean(axis=1) for qs in positive_queries], axis=1)
    return CostMatrix(w.l1 * l1 + w.giou * (1.0 - giou) + w.cls * cls, w)


def _lap_rows(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path solver for ``n <= m``; returns the column of each row."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def _solve_pairs(c: np.ndarray) -> list:
    P, T = c.shape
    if P == 0 or T == 0:
        return []
    if P <= T:
        cols = _lap_rows(c)
        return sorted((int(i), int(j)) for i, j in enumerate(cols))
    rows = _lap_rows(c.T)
    return sorted((int(i), int(j)) for j, i in enumerate(rows))


def _total(c: np.ndarray, pairs) -> float:
    return float(sum(c[i, j] for i, j in pairs))


def _optimum(c: np.ndarray) -> float:
    return _total(c, _solve_pairs(c))


def _has_alternative(c: np.ndarray, pairs, best: float, tol: float) -> bool:
    big = (np.abs(c).max() + 1.0) * (min(c.shape) + 1) + 1.0
    for i, j in pairs:
        alt = c.copy()
        alt[i, j] = big
        alt_pairs = _solve_pairs(alt)
        if (i, j) in alt_pairs:
            continue
        if _total(c, alt_pairs) <= best + tol:
            return True
    return False


def _lexicographic(c: np.ndarray, best: float, tol: float) -> list:
    """Smallest optimal pair list in (proposal, target) order, by greedy fixing."""
    P, T = c.shape
    need = min(P, T)
    fixed: list = []
    fixed_cost = 0.0
    used_t: set = set()
    for i in range(P):
        if len(fixed) == need:
            break
        rest_rows = np.arange(i + 1, P)
        for j in range(T):
            if j in used_t:
                continue
            rest_cols = np.array([t for t in range(T) if t not in used_t and t != j], dtype=np.int64)
            remaining = need - len(fixed) - 1
            if min(len(rest_rows), len(rest_cols)) < remaining:
                continue
            sub = c[np.ix_(rest_rows, rest_cols)]
            sub_cost = _optimum(sub) if remaining else 0.0
            if fixed_cost + c[i, j] + sub_cost <= best + tol:
                fixed.append((i, j))
                fixed_cost += c[i, j]
                used_t.add(j)
                break
    return fixed


def hungarian_assign(cost) -> Assignment:
    """Minimum-cost assignment of ``min(P, T)`` pairs.

    Among several optimal assignments the one whose proposal-sorted pair list
    is lexicographically smallest is returned.
    """
    c = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    if c.size == 0:
        return Assignment([], 0.0)
    if not np.isfinite(c).all():
        raise ValueError("cost matrix contains non-finite values")
    pairs = _solve_pairs(c)
    best = _total(c, pairs)
    tol = 1e-12 * max(1.0, abs(best))
    if _has_alternative(c, pairs, best, tol):
        pairs = _lexicographic(c, best, tol)
        best = _total(c, pairs)
    return Assignment(pairs, best)

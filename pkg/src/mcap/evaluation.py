"""Partition agreement and graph-recovery metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "PairCounts",
    "contingency",
    "pair_counts",
    "rand_index",
    "adjusted_rand_index",
    "TopKResult",
    "normalize_edges",
    "rank_edges",
    "topk_edge_hits",
    "auprc_edges",
    "mean_auprc",
    "match_groups",
]


@dataclass(frozen=True)
class PairCounts:
    """Pair agreement counts between two partitions.

    ``a`` pairs share a block in both, ``b`` are split in both, ``c`` share a
    block only in the first and ``d`` only in the second.
    """

    a: int
    b: int
    c: int
    d: int

    @property
    def total(self) -> int:
        return self.a + self.b + self.c + self.d


def _as_labels(P1, P2) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(P1).ravel()
    y = np.asarray(P2).ravel()
    if x.shape != y.shape:
        raise ValueError(f"partitions differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two items to compare partitions")
    return x, y


def contingency(P1, P2) -> np.ndarray:
    """Dense contingency table (rows: blocks of ``P1``; cols: blocks of ``P2``)."""
    x, y = _as_labels(P1, P2)
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    table = np.zeros((xi.max() + 1, yi.max() + 1), dtype=np.int64)
    np.add.at(table, (xi, yi), 1)
    return table


def _comb2(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    return v * (v - 1) // 2


def pair_counts(P1, P2) -> PairCounts:
    table = contingency(P1, P2)
    n = int(table.sum())
    same_both = int(_comb2(table).sum())
    same_1 = int(_comb2(table.sum(axis=1)).sum())
    same_2 = int(_comb2(table.sum(axis=0)).sum())
    total = n * (n - 1) // 2
    a = same_both
    c = same_1 - same_both
    d = same_2 - same_both
    return PairCounts(a=a, b=total - a - c - d, c=c, d=d)


def rand_index(P1, P2) -> float:
    pc = pair_counts(P1, P2)
    return (pc.a + pc.b) / pc.total


def adjusted_rand_index(P1, P2) -> float:
    """Hubert-Arabie adjusted Rand index.

    When the chance-corrected denominator vanishes (both partitions a single
    block, or both all singletons) the partitions are identical and 1.0 is
    returned.
    """
    table = contingency(P1, P2)
    n = int(table.sum())
    sum_ij = float(_comb2(table).sum())
    sum_a = float(_comb2(table.sum(axis=1)).sum())
    sum_b = float(_comb2(table.sum(axis=0)).sum())
    expected = sum_a * sum_b / (n * (n - 1) / 2)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return (sum_ij - expected) / (max_index - expected)


# -- graph recovery -----------------------------------------------------------

def normalize_edges(edges: Iterable[tuple[int, int]]) -> set[tuple[int, int]]:
    """Undirected edge set with ``i < j``; self-loops are rejected."""
    out = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if i == j:
            raise ValueError(f"self-loop ({i}, {i}) is not an edge")
        out.add((i, j) if i < j else (j, i))
    return out


def _score_items(scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(i, j, |score|) arrays from a ``p x p`` matrix or an edge -> score map."""
    if isinstance(scores, Mapping):
        if not scores:
            return (np.empty(0, dtype=np.int64),) * 2 + (np.empty(0),)
        keys = list(scores)
        ij = np.array([(min(a, b), max(a, b)) for a, b in keys], dtype=np.int64)
        vals = np.abs(np.array([scores[k] for k in keys], dtype=np.float64))
        return ij[:, 0], ij[:, 1], vals
    M = np.asarray(scores, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("score matrix must be square")
    iu, ju = np.triu_indices(M.shape[0], k=1)
    vals = np.maximum(np.abs(M[iu, ju]), np.abs(M[ju, iu]))
    return iu, ju, vals


def rank_edges(scores, include_zero: bool = False) -> list[tuple[int, int]]:
    """Edges ordered by decreasing ``|score|`` (stable in ``(i, j)`` order)."""
    iu, ju, vals = _score_items(scores)
    order = np.lexsort((ju, iu, -vals))
    if not include_zero:
        order = order[vals[order] > 0]
    return [(int(iu[t]), int(ju[t])) for t in order]


@dataclass(frozen=True)
class TopKResult:
    """Outcome of a top-k true-edge count.

    ``k_used`` is smaller than the requested ``k`` when fewer edges were
    estimated (``truncated``); the denominator is ``min(k, n_true)``.
    """

    fraction: float
    hits: int
    k: int
    k_used: int
    n_true: int

    @property
    def truncated(self) -> bool:
        return self.k_used < self.k

    def __float__(self) -> float:
        return self.fraction


def topk_edge_hits(est_edges, true_edges, k: int) -> TopKResult:
    """Fraction of true edges among the ``k`` highest-ranked estimated edges.

    ``est_edges`` is either an already ranked sequence of ``(i, j)`` pairs or
    a score matrix/mapping, which is ranked by ``|score|``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    truth = normalize_edges(true_edges)
    if not truth:
        raise ValueError("true edge set is empty")
    if isinstance(est_edges, (Mapping, np.ndarray)):
        ranked = rank_edges(est_edges)
    else:
        ranked = [tuple(sorted((int(a), int(b)))) for a, b in est_edges]
    top = ranked[:k]
    hits = sum(1 for e in top if e in truth)
    denom = min(k, len(truth))
    return TopKResult(fraction=hits / denom, hits=hits, k=k, k_used=len(top), n_true=len(truth))


def auprc_edges(scores, true_edges, p: int) -> float:
    """Area under the precision-recall curve over all ``p(p-1)/2`` pairs.

    Step interpolation (average precision): precision at each distinct score
    threshold weighted by the recall gained there. Pairs without a score
    count as 0 and tie at the bottom.
    """
    truth = normalize_edges(true_edges)
    if not truth:
        raise ValueError("true edge set is empty")
    full = np.zeros((p, p))
    iu, ju, vals = _score_items(scores)
    if iu.size and (iu.max(initial=0) >= p or ju.max(initial=0) >= p):
        raise ValueError("edge index out of range for dimension p")
    full[iu, ju] = vals
    ti, tj = np.triu_indices(p, k=1)
    s = full[ti, tj]
    y = np.zeros(s.size, dtype=bool)
    pos = np.array(sorted(truth), dtype=np.int64)
    if pos.max() >= p:
        raise ValueError("true edge index out of range for dimension p")
    a, b = pos[:, 0], pos[:, 1]
    y[a * p - a * (a + 1) // 2 + (b - a - 1)] = True
    return _average_precision(s, y)


def _average_precision(scores: np.ndarray, y: np.ndarray) -> float:
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    yy = y[order]
    tp = np.cumsum(yy)
    fp = np.cumsum(~yy)
    # keep the last index of each run of tied scores
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / yy.sum()
    gains = np.diff(np.r_[0.0, recall])
    return float(np.sum(gains * precision))


def mean_auprc(scores_per_group: Sequence, true_per_group: Sequence, p: int) -> float:
    vals = [auprc_edges(s, t, p) for s, t in zip(scores_per_group, true_per_group, strict=True)]
    return float(np.mean(vals))


def match_groups(pred, truth) -> dict[int, int]:
    """Map predicted labels to true labels maximising total overlap.

    Returns ``{predicted_label: true_label}`` for matched pairs.
    """
    x, y = _as_labels(pred, truth)
    px, xi = np.unique(x, return_inverse=True)
    ty, yi = np.unique(y, return_inverse=True)
    table = np.zeros((px.size, ty.size), dtype=np.int64)
    np.add.at(table, (xi, yi), 1)
    r, c = linear_sum_assignment(-table)
    return {int(px[a]): int(ty[b]) for a, b in zip(r, c)}

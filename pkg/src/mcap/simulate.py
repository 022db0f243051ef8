"""Synthetic data generators with known group structure.

All generators are deterministic for a fixed ``seed``; rows are ordered by
group and the returned :class:`Partition` records the truth.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .dataset import DataMatrix, MeanShiftSpec, Partition, apply_mean_shift

__all__ = [
    "UndefinedMeanWarning",
    "BlockWishartSpec",
    "GgmSpec",
    "GgmSample",
    "gen_isotropic",
    "sample_inverse_wishart",
    "gen_block_wishart",
    "gen_block_wishart_resampled",
    "random_graph",
    "ggm_precision",
    "gen_ggm_mixture",
    "gen_permuted_large_p",
    "subsample_groups",
]

_EXTRA_COL_BLOCK = 8192


class UndefinedMeanWarning(UserWarning):
    """Inverse-Wishart degrees of freedom too small for the mean to exist."""


def _group_sizes(n_k, K: int) -> list[int]:
    sizes = [int(n_k)] * K if np.isscalar(n_k) else [int(v) for v in n_k]
    if len(sizes) != K or min(sizes) < 1:
        raise ValueError(f"need {K} positive group sizes, got {sizes}")
    return sizes


def _truth(sizes: Sequence[int]) -> Partition:
    return Partition(np.repeat(np.arange(1, len(sizes) + 1), sizes), len(sizes))


def _seeds(seed, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)


def _shift(X: np.ndarray, truth: Partition, d: float, seed) -> DataMatrix:
    data = DataMatrix(X)
    if d == 0:
        return data
    return apply_mean_shift(data, truth, MeanShiftSpec(d=d, center_group=1, seed=seed))


def gen_isotropic(K: int, n_k, p: int, d: float, seed=None) -> tuple[DataMatrix, Partition]:
    """Groups drawn from ``N(mu_k, I_p)`` with ``mu_1 = 0`` and ``mu_k = d * s_k``."""
    if d < 0:
        raise ValueError("d must be nonnegative")
    sizes = _group_sizes(n_k, K)
    data_seed, shift_seed = _seeds(seed, 2)
    rng = np.random.default_rng(data_seed)
    X = rng.standard_normal((sum(sizes), p))
    truth = _truth(sizes)
    return _shift(X, truth, d, shift_seed), truth


# -- inverse Wishart ----------------------------------------------------------

def _bartlett_lower(dim: int, dof: float, rng: np.random.Generator) -> np.ndarray:
    """Lower-triangular ``A`` with ``A A^T ~ Wishart(dof, I_dim)``."""
    A = np.tril(rng.standard_normal((dim, dim)), k=-1)
    A[np.diag_indices(dim)] = np.sqrt(rng.chisquare(dof - np.arange(dim)))
    return A


def _check_dof(dim: int, dof: float) -> None:
    if not dof > dim - 1:
        raise ValueError(f"inverse-Wishart needs dof > dim - 1 (dim={dim}, dof={dof})")
    if dof <= dim + 1:
        warnings.warn(f"dof={dof} <= dim+1={dim + 1}: the inverse-Wishart mean is undefined", UndefinedMeanWarning,
                      stacklevel=3)


def _inverse_wishart_factor(dim: int, dof: float, rng) -> np.ndarray:
    """Upper-triangular ``R`` with ``R R^T`` an inverse-Wishart draw."""
    if math.isinf(dof):
        return np.eye(dim)
    A = _bartlett_lower(dim, dof, rng)
    return solve_triangular(A, np.eye(dim), lower=True).T


def sample_inverse_wishart(dim: int, dof: float, seed=None) -> np.ndarray:
    """Draw ``Sigma ~ IW(dof, I_dim)`` as the inverse of a Bartlett Wishart draw.

    ``dof=inf`` returns the identity. Finite ``dof <= dim + 1`` is allowed
    (any ``dof > dim - 1`` gives a valid draw) but emits
    :class:`UndefinedMeanWarning`.
    """
    dof = float(dof)
    if math.isinf(dof):
        return np.eye(dim)
    _check_dof(dim, dof)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    R = _inverse_wishart_factor(dim, dof, rng)
    S = R @ R.T
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class BlockWishartSpec:
    """Block-diagonal covariance-signal scenario.

    Each group gets one ``block_size``-dimensional inverse-Wishart block
    repeated down the diagonal ``p / block_size`` times.
    """

    block_size: int = 200
    dof: float = math.inf
    p: int = 2000
    K: int = 2
    n_k: int | tuple[int, ...] = 100
    d: float = 0.0
    seed: int | None = 0

    def __post_init__(self):
        object.__setattr__(self, "dof", float(self.dof))
        if self.block_size < 1 or self.p < 1:
            raise ValueError("block_size and p must be positive")
        if self.p % self.block_size:
            raise ValueError(f"p={self.p} is not a multiple of block_size={self.block_size}")
        if not math.isinf(self.dof) and not self.dof > self.block_size - 1:
            raise ValueError(f"dof must exceed block_size - 1 (got {self.dof})")
        if self.d < 0:
            raise ValueError("d must be nonnegative")


def gen_block_wishart(spec: BlockWishartSpec) -> tuple[DataMatrix, Partition]:
    sizes = _group_sizes(spec.n_k, spec.K)
    seeds = _seeds(spec.seed, spec.K + 1)
    if not math.isinf(spec.dof):
        _check_dof(spec.block_size, spec.dof)
    B = spec.block_size
    reps = spec.p // B
    blocks = []
    for k, size in enumerate(sizes):
        rng = np.random.default_rng(seeds[k])
        R = _inverse_wishart_factor(B, spec.dof, rng)
        Z = rng.standard_normal((size, reps, B))
        blocks.append((Z @ R.T).reshape(size, spec.p))
    truth = _truth(sizes)
    return _shift(np.vstack(blocks), truth, spec.d, seeds[-1]), truth


def gen_block_wishart_resampled(spec: BlockWishartSpec, p_target: int, base_n_k: int | None = None,
                                seed=None) -> tuple[DataMatrix, Partition]:
    """Widen a block-Wishart sample to ``p_target`` columns by resampling.

    A base sample with ``base_n_k`` rows per group (default: the requested
    ``n_k``) is drawn at ``spec.p`` columns; ``n_k`` rows per group are kept.
    Each extra column copies a uniformly chosen base column, filled for each
    group with ``n_k`` of that group's base entries drawn without
    replacement. No ``p x p`` matrix is ever formed.
    """
    if p_target < spec.p:
        raise ValueError(f"p_target={p_target} is below the base dimension {spec.p}")
    sizes = _group_sizes(spec.n_k, spec.K)
    base_sizes = sizes if base_n_k is None else _group_sizes(base_n_k, spec.K)
    if any(b < s for b, s in zip(base_sizes, sizes)):
        raise ValueError("base groups must be at least as large as the output groups")
    base, base_truth = gen_block_wishart(replace(spec, n_k=tuple(base_sizes)))
    if p_target == spec.p and base_sizes == sizes:
        return base, base_truth
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed if seed is None else seed, spawn_key=(7,)))
    Xb = base.values
    truth = _truth(sizes)
    out = np.empty((sum(sizes), p_target))
    starts = np.r_[0, np.cumsum(base_sizes)]
    out_starts = np.r_[0, np.cumsum(sizes)]
    for k in range(spec.K):
        rows = np.arange(starts[k], starts[k + 1])
        if base_sizes[k] != sizes[k]:
            rows = np.sort(rng.choice(rows, size=sizes[k], replace=False))
        out[out_starts[k]:out_starts[k + 1], :spec.p] = Xb[rows]
    for start in range(spec.p, p_target, _EXTRA_COL_BLOCK):
        stop = min(start + _EXTRA_COL_BLOCK, p_target)
        src = rng.integers(spec.p, size=stop - start)
        for k in range(spec.K):
            pick = np.argsort(rng.random((base_sizes[k], stop - start)), axis=0)[:sizes[k]]
            out[out_starts[k]:out_starts[k + 1], start:stop] = Xb[starts[k] + pick, src[None, :]]
    return DataMatrix(out), truth


# -- Gaussian graphical models ------------------------------------------------

@dataclass(frozen=True)
class GgmSpec:
    """Mixture of Gaussian graphical models with random sparse graphs."""

    p: int = 100
    edges_per_graph: float = 30
    K: int = 2
    n_k: int | tuple[int, ...] = 100
    d: float = 0.0
    seed: int | None = 0
    edge_weight: float = 0.4
    diag_margin: float = 0.1

    def __post_init__(self):
        if self.edges_per_graph < 0 or self.edges_per_graph > self.p * (self.p - 1) / 2:
            raise ValueError("edges_per_graph must lie in [0, p(p-1)/2]")


class GgmSample(NamedTuple):
    data: DataMatrix
    truth: Partition
    graphs: list[set[tuple[int, int]]]
    precisions: list[np.ndarray]


def random_graph(p: int, expected_edges: float, rng: np.random.Generator) -> set[tuple[int, int]]:
    """Erdos-Renyi graph with ``expected_edges`` edges on average."""
    iu, ju = np.triu_indices(p, k=1)
    prob = expected_edges / iu.size if iu.size else 0.0
    keep = rng.random(iu.size) < prob
    return {(int(i), int(j)) for i, j in zip(iu[keep], ju[keep])}


def ggm_precision(p: int, edges: set[tuple[int, int]], rng: np.random.Generator,
                  weight: float = 0.4, margin: float = 0.1) -> np.ndarray:
    """Sparse diagonally dominant precision, rescaled to a unit-variance covariance.

    Edge entries are ``+-weight`` with random signs; the diagonal is the row's
    absolute off-diagonal sum plus ``margin``. The rescaling keeps the zero
    pattern, so the support equals ``edges`` exactly.
    """
    Omega = np.zeros((p, p))
    if edges:
        e = np.array(sorted(edges))
        vals = weight * rng.choice(np.array([-1.0, 1.0]), size=len(e))
        Omega[e[:, 0], e[:, 1]] = vals
        Omega[e[:, 1], e[:, 0]] = vals
    Omega[np.diag_indices(p)] = np.abs(Omega).sum(axis=1) + margin
    sd = np.sqrt(np.diag(np.linalg.inv(Omega)))
    return Omega * np.outer(sd, sd)


def gen_ggm_mixture(spec: GgmSpec) -> GgmSample:
    sizes = _group_sizes(spec.n_k, spec.K)
    seeds = _seeds(spec.seed, spec.K + 1)
    blocks, graphs, precisions = [], [], []
    for k, size in enumerate(sizes):
        rng = np.random.default_rng(seeds[k])
        graph = random_graph(spec.p, spec.edges_per_graph, rng)
        Omega = ggm_precision(spec.p, graph, rng, spec.edge_weight, spec.diag_margin)
        # x = L^-T z has covariance (L L^T)^-1 for the Cholesky factor L of Omega
        L = np.linalg.cholesky(Omega)
        Z = rng.standard_normal((size, spec.p))
        blocks.append(solve_triangular(L, Z.T, lower=True, trans="T").T)
        graphs.append(graph)
        precisions.append(Omega)
    truth = _truth(sizes)
    return GgmSample(_shift(np.vstack(blocks), truth, spec.d, seeds[-1]), truth, graphs, precisions)


# -- resampling real data -----------------------------------------------------

def gen_permuted_large_p(base, truth: Partition, copies: int, n_k: int | Sequence[int] | None = None,
                         seed=None, permute_first: bool = True) -> tuple[DataMatrix, Partition]:
    """Concatenate ``copies`` column blocks built from a grouped base matrix.

    Every block puts the base columns through an independent random
    permutation shared by all groups (the first block keeps the original
    column order when ``permute_first`` is false), and draws ``n_k`` rows of
    each group without replacement. The result has ``copies * p_base`` columns.
    """
    if copies < 1:
        raise ValueError("copies must be >= 1")
    Xb = np.asarray(base)
    labels = np.asarray(truth)
    K = truth.k if isinstance(truth, Partition) else int(labels.max())
    members = [np.flatnonzero(labels == g) for g in range(1, K + 1)]
    sizes = [m.size for m in members] if n_k is None else _group_sizes(n_k, K)
    if any(s > m.size for s, m in zip(sizes, members)):
        raise ValueError("n_k exceeds the base group size")
    rng = np.random.default_rng(seed)
    p = Xb.shape[1]
    out = np.empty((sum(sizes), copies * p))
    offsets = np.r_[0, np.cumsum(sizes)]
    for c in range(copies):
        # one permutation per block, shared by all groups so a column is one variable
        cols = rng.permutation(p) if (c > 0 or permute_first) else np.arange(p)
        for g in range(K):
            rows = rng.choice(members[g], size=sizes[g], replace=False)
            out[offsets[g]:offsets[g + 1], c * p:(c + 1) * p] = Xb[np.ix_(rows, cols)]
    return DataMatrix(out), _truth(sizes)


def subsample_groups(X, truth: Partition, n: int | None = None, p: int | None = None,
                     n_k: int | Sequence[int] | None = None, seed=None) -> tuple[DataMatrix, Partition]:
    """Draw rows per group and a random column subset from grouped data.

    Give either ``n_k`` (per-group sizes) or a total ``n``, which is split in
    proportion to the base group sizes by largest remainder. Columns keep
    their original order.
    """
    Xb = np.asarray(X)
    labels = np.asarray(truth)
    K = truth.k if isinstance(truth, Partition) else int(labels.max())
    members = [np.flatnonzero(labels == g) for g in range(1, K + 1)]
    base = np.array([m.size for m in members], dtype=float)
    if n_k is not None:
        sizes = _group_sizes(n_k, K)
    elif n is not None:
        raw = n * base / base.sum()
        sizes = np.floor(raw).astype(int)
        extra = n - sizes.sum()
        sizes[np.argsort(-(raw - sizes), kind="stable")[:extra]] += 1
        sizes = [int(v) for v in sizes]
    else:
        sizes = [int(v) for v in base]
    if any(s > b for s, b in zip(sizes, base)) or min(sizes) < 1:
        raise ValueError(f"requested group sizes {sizes} not available in base sizes {base.astype(int).tolist()}")
    rng = np.random.default_rng(seed)
    rows = np.concatenate([np.sort(rng.choice(m, size=s, replace=False)) for m, s in zip(members, sizes)])
    ptot = Xb.shape[1]
    cols = np.arange(ptot) if p is None or p >= ptot else np.sort(rng.choice(ptot, size=p, replace=False))
    values = Xb[np.ix_(rows, cols)]
    col_ids = None
    if isinstance(X, DataMatrix) and X.col_ids is not None:
        col_ids = tuple(X.col_ids[j] for j in cols)
    return DataMatrix(values, None, col_ids), _truth(sizes)

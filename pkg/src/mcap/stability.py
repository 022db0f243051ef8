"""Subsampling stability score and data-adaptive choice of target dimension.

For each candidate ``q`` the data are projected once, a mixture is fitted on
each of ``B`` random row subsets, and the score is the Rand index between
the two fits' labels of the shared rows, averaged over all subset pairs.
Labels come straight from each subset's own EM responsibilities.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .evaluation import rand_index
from .gmm import EmConfig, EmError, em_fit
from .projection import PROJECTION_KINDS, ProjectionSpec, fit_pca_gram, make_random_projection, project

__all__ = [
    "StabilityError",
    "StabilityWarning",
    "StabilityConfig",
    "StabilityDetail",
    "StabilityResult",
    "grid_max",
    "build_grid",
    "draw_subsets",
    "subset_labels",
    "stability_details",
    "stability_score",
    "select_q",
    "derive_seed",
    "feasible_grid",
    "projection_seed",
]

MAX_FAILED_FRACTION = 0.25


class StabilityError(RuntimeError):
    pass


class StabilityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class StabilityConfig:
    """Subsampling settings.

    ``grid=None`` builds the default coarse grid from ``n`` and ``K``.
    """

    n_subsets: int = 20
    m_fraction: float = 0.75
    grid: tuple[int, ...] | None = None
    q_min: int | None = None
    seed: int | None = 0

    def __post_init__(self):
        if self.n_subsets < 2:
            raise ValueError("need at least two subsets")
        if not 0 < self.m_fraction < 1:
            raise ValueError("m_fraction must lie strictly between 0 and 1")
        if self.grid is not None:
            grid = tuple(int(q) for q in self.grid)
            if not grid or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 1:
                raise ValueError("grid must be non-empty, positive and strictly increasing")
            object.__setattr__(self, "grid", grid)

    def subset_size(self, n: int) -> int:
        return int(math.floor(self.m_fraction * n))


@dataclass(eq=False)
class StabilityDetail:
    score: float
    pair_scores: np.ndarray
    failed_fits: int = 0
    skipped_pairs: int = 0


@dataclass(eq=False)
class StabilityResult:
    scores: dict[int, float]
    q_hat: int
    per_pair_scores: dict[int, np.ndarray] = field(default_factory=dict)
    failed_fits: dict[int, int] = field(default_factory=dict)

    @property
    def grid(self) -> list[int]:
        return sorted(self.scores)

    def table(self) -> list[tuple[int, float]]:
        return [(q, self.scores[q]) for q in self.grid]


def derive_seed(seed, *key: int) -> int | None:
    """Deterministic child seed for ``key`` (``None`` stays unseeded)."""
    if seed is None:
        return None
    return int(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)).generate_state(1)[0])


def grid_max(n: int, K: int) -> int:
    """``floor(sqrt(10 n / K))``, computed exactly in integers."""
    return math.isqrt(10 * n // K)


def build_grid(n: int, K: int, q_min: int | None = None) -> list[int]:
    """Coarse candidate grid: every ``q`` from ``q_min`` (default ``K``) to 10,
    then multiples of 5, capped by and always including ``floor(sqrt(10 n / K))``.
    """
    if K < 1 or n < 2 * K:
        raise ValueError(f"need n >= 2K, got n={n}, K={K}")
    q_min = K if q_min is None else int(q_min)
    q_max = grid_max(n, K)
    if q_max < q_min:
        raise ValueError(f"sample too small: q_max={q_max} < q_min={q_min}")
    grid = set(range(q_min, min(10, q_max) + 1))
    grid.update(q for q in range(15, q_max + 1, 5) if q >= q_min)
    grid.add(q_max)
    return sorted(grid)


def draw_subsets(n: int, B: int, m: int, seed=None) -> list[np.ndarray]:
    """``B`` independent sorted subsets of ``m`` distinct indices out of ``n``."""
    if not 0 < m < n:
        raise ValueError(f"subset size must satisfy 0 < m < n, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    return [np.sort(rng.choice(n, size=m, replace=False)) for _ in range(B)]


def subset_labels(Xq, K: int, subsets, emcfg: EmConfig, threads: int = 1) -> list[np.ndarray | None]:
    """Hard labels from an EM fit on each subset; ``None`` marks a failed fit."""
    Xq = np.asarray(Xq, dtype=np.float64)
    q = Xq.shape[1]

    def fit(b: int):
        cfg = replace(emcfg, seed=derive_seed(emcfg.seed, q, b), threads=1)
        try:
            res = em_fit(Xq[subsets[b]], K, cfg)
        except (EmError, np.linalg.LinAlgError, ValueError):
            return None
        return np.argmax(res.responsibilities, axis=1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fit, range(len(subsets))))
    return [fit(b) for b in range(len(subsets))]


def _pair_scores(subsets, labels) -> tuple[np.ndarray, int]:
    scores = []
    skipped = 0
    B = len(subsets)
    for b in range(B):
        for c in range(b + 1, B):
            if labels[b] is None or labels[c] is None:
                skipped += 1
                continue
            _, ib, ic = np.intersect1d(subsets[b], subsets[c], assume_unique=True, return_indices=True)
            if ib.size < 2:
                warnings.warn(f"subsets {b} and {c} share fewer than two rows; pair excluded", StabilityWarning)
                skipped += 1
                continue
            scores.append(rand_index(labels[b][ib], labels[c][ic]))
    return np.array(scores), skipped


def stability_details(Xq, K: int, subsets, emcfg: EmConfig | None = None, threads: int = 1) -> StabilityDetail:
    emcfg = emcfg or EmConfig()
    labels = subset_labels(Xq, K, subsets, emcfg, threads)
    failed = sum(lab is None for lab in labels)
    scores, skipped = _pair_scores(subsets, labels)
    n_pairs = len(subsets) * (len(subsets) - 1) // 2
    if failed:
        warnings.warn(f"{failed} subset fit(s) failed at q={np.asarray(Xq).shape[1]}; "
                      f"{skipped} of {n_pairs} pairs skipped", StabilityWarning)
    if skipped > MAX_FAILED_FRACTION * n_pairs or scores.size == 0:
        raise StabilityError(f"{skipped} of {n_pairs} subset pairs unusable ({failed} failed fits)")
    return StabilityDetail(float(scores.mean()), scores, failed, skipped)


def stability_score(Xq, K: int, subsets, emcfg: EmConfig | None = None, threads: int = 1) -> float:
    """Mean Rand index of shared-row labels over all pairs of subset fits."""
    return stability_details(Xq, K, subsets, emcfg, threads).score


def feasible_grid(grid, n: int, p: int, kind: str) -> list[int]:
    limit = min(n - 1, p) if kind == "pca" else p
    kept = [q for q in grid if q <= limit]
    if not kept:
        raise ValueError(f"no grid value is feasible for n={n}, p={p} ({kind})")
    return kept


def select_q(X, K: int, kind: str = "pca", cfg: StabilityConfig | None = None,
             emcfg: EmConfig | None = None, threads: int = 1, pca_basis=None) -> StabilityResult:
    """Score every grid value and return the most stable target dimension.

    Ties go to the smallest ``q``. Subsets are drawn once and shared by all
    grid values. PCA is fitted once at the largest candidate and truncated,
    which gives the same leading components as fitting per ``q``.
    """
    if kind not in PROJECTION_KINDS:
        raise ValueError(f"unknown projection kind {kind!r}")
    cfg = cfg or StabilityConfig()
    emcfg = emcfg or EmConfig()
    X = np.asarray(X)
    n, p = X.shape
    grid = list(cfg.grid) if cfg.grid is not None else build_grid(n, K, cfg.q_min)
    grid = feasible_grid(grid, n, p, kind)
    subsets = draw_subsets(n, cfg.n_subsets, cfg.subset_size(n), derive_seed(cfg.seed, 0))
    if kind == "pca":
        basis = pca_basis if pca_basis is not None and pca_basis.q >= max(grid) else fit_pca_gram(X, max(grid))
        full_scores = project(X, basis)

    scores: dict[int, float] = {}
    pairs: dict[int, np.ndarray] = {}
    failed: dict[int, int] = {}
    for q in grid:
        if kind == "pca":
            Xq = full_scores[:, :q]
        else:
            Xq = project(X, make_random_projection(ProjectionSpec(kind, q, projection_seed(cfg.seed, q)), p))
        detail = stability_details(Xq, K, subsets, emcfg, threads)
        scores[q] = detail.score
        pairs[q] = detail.pair_scores
        failed[q] = detail.failed_fits
    best = max(scores.values())
    q_hat = min(q for q, s in scores.items() if s == best)
    return StabilityResult(scores, q_hat, pairs, failed)


def projection_seed(seed, q: int) -> int | None:
    """Seed of the random projection used for target dimension ``q``."""
    return derive_seed(seed, 1, q)

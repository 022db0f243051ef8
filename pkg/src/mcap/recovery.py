"""High-dimensional group parameters from low-dimensional clustering output.

Hard mode splits the rows by their labels; soft mode weights every row by
its responsibility for the group. In both modes each group's covariance is
put on unit scale (``D C D`` with ``D = diag(v)^-1/2``) before the sparse
precision step, so one-hot responsibilities reproduce the hard estimates.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import DataError, Partition
from .glasso import (
    CovarianceInput,
    CvWarning,
    MbResult,
    PrecisionEstimate,
    cross_validate,
    glasso_solve,
    lambda_grid,
    mb_select,
    scaled_moments,
)
from .stability import derive_seed

__all__ = [
    "SoftMoments",
    "GroupEstimate",
    "GroupEstimates",
    "soft_moments",
    "soft_precision",
    "hard_estimates",
    "soft_estimates",
    "back_transform",
]

ESTIMATORS = ("glasso", "mb", "none")


@dataclass(frozen=True, eq=False)
class SoftMoments:
    mean: np.ndarray
    variance: np.ndarray
    U: np.ndarray
    n_hat: float

    @property
    def scaling(self) -> np.ndarray:
        """Diagonal of ``D = diag(v)^-1/2``."""
        return 1.0 / np.sqrt(self.variance)


@dataclass(eq=False)
class GroupEstimate:
    group: int
    mean: np.ndarray
    variance: np.ndarray
    n_hat: float
    lam: float | None = None
    precision: PrecisionEstimate | None = None
    mb: MbResult | None = None
    cv_scores: list[tuple[float, float]] = field(default_factory=list)

    @property
    def scaling(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.variance)

    @property
    def graph(self) -> set[tuple[int, int]]:
        if self.precision is not None:
            return self.precision.graph
        if self.mb is not None:
            return self.mb.edges
        return set()

    def edge_scores(self) -> np.ndarray | None:
        """Symmetric matrix of edge strengths used for ranking."""
        if self.precision is not None:
            return np.abs(self.precision.Omega)
        if self.mb is not None:
            return self.mb.scores()
        return None


@dataclass(eq=False)
class GroupEstimates:
    groups: list[GroupEstimate]
    mode: str
    estimator: str

    def __len__(self) -> int:
        return len(self.groups)

    def __getitem__(self, k: int) -> GroupEstimate:
        return self.groups[k]

    @property
    def lambdas(self) -> list[float | None]:
        return [g.lam for g in self.groups]


def soft_moments(X, gamma) -> list[SoftMoments]:
    """Responsibility-weighted mean, variance and unit-scale covariance per group."""
    X = np.asarray(X, dtype=np.float64)
    gamma = _check_gamma(gamma, X.shape[0])
    return [SoftMoments(*scaled_moments(X, gamma[:, k])) for k in range(gamma.shape[1])]


def soft_precision(U, n_hat: float, lam: float, tol: float = 1e-7, max_iter: int = 1000) -> PrecisionEstimate:
    """Graphical lasso on a unit-scale weighted covariance."""
    return glasso_solve(CovarianceInput(U, n_hat), lam, tol, max_iter)


def back_transform(Omega: np.ndarray, variance: np.ndarray) -> np.ndarray:
    """Map a unit-scale precision back to the data scale: ``D Omega D``."""
    d = 1.0 / np.sqrt(np.asarray(variance))
    return Omega * np.outer(d, d)


def _check_gamma(gamma, n: int) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim != 2 or gamma.shape[0] != n:
        raise ValueError(f"responsibilities must be an {n} x K matrix, got shape {gamma.shape}")
    if np.any(gamma < 0) or np.max(np.abs(gamma.sum(axis=1) - 1.0)) > 1e-8:
        raise ValueError("responsibility rows must be nonnegative and sum to one")
    return gamma


def _estimate(X, weights, k: int, estimator: str, lam, folds: int, seed, mb_rule: str) -> GroupEstimate:
    mu, v, U, n_hat = scaled_moments(X, weights)
    est = GroupEstimate(k + 1, mu, v, n_hat)
    if estimator == "glasso":
        if lam is None or lam == "cv":
            rows = X.shape[0]
            use = min(folds, rows // 2)
            if use < 2:
                # no fold split possible: take the top of the grid (empty graph)
                warnings.warn(f"group {k + 1} has {rows} rows, too few for cross-validation; "
                              "using the largest penalty", CvWarning, stacklevel=3)
                lam_k = float(lambda_grid(U)[0])
            else:
                cv = cross_validate(X, use, seed=derive_seed(seed, k), weights=weights)
                lam_k, est.cv_scores = cv.lam, cv.table()
        else:
            lam_k = float(lam)
        est.lam = lam_k
        est.precision = soft_precision(U, n_hat, lam_k)
    elif estimator == "mb":
        est.mb = mb_select(X, None if lam in (None, "cv") else float(lam), mb_rule, weights)
        est.lam = est.mb.lam
    return est


def _run(tasks, threads: int):
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda f: f(), tasks))
    return [f() for f in tasks]


def hard_estimates(X, labels: Partition, estimator: str = "glasso", lam=None, folds: int = 5,
                   seed=0, threads: int = 1, mb_rule: str = "and") -> GroupEstimates:
    """Split the rows by ``labels`` and estimate each group on its own rows.

    ``lam=None`` chooses each group's penalty by cross-validation; a number
    fixes it for all groups.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    X = np.asarray(X, dtype=np.float64)
    labs = np.asarray(labels)
    if labs.shape != (X.shape[0],):
        raise ValueError("labels must have one entry per row")
    K = labels.k if isinstance(labels, Partition) else int(labs.max())
    members = [np.flatnonzero(labs == g) for g in range(1, K + 1)]
    for g, m in enumerate(members, start=1):
        if m.size < 2:
            raise DataError(f"group {g} has {m.size} row(s); at least 2 are needed")
    tasks = [lambda k=k: _estimate(X[members[k]], None, k, estimator, lam, folds, seed, mb_rule) for k in range(K)]
    return GroupEstimates(_run(tasks, threads), "hard", estimator)


def soft_estimates(X, gamma, estimator: str = "glasso", lam=None, folds: int = 5,
                   seed=0, threads: int = 1, mb_rule: str = "and") -> GroupEstimates:
    """Responsibility-weighted estimation; cross-validation folds carry the weights."""
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    X = np.asarray(X, dtype=np.float64)
    gamma = _check_gamma(gamma, X.shape[0])
    tasks = [lambda k=k: _estimate(X, gamma[:, k], k, estimator, lam, folds, seed, mb_rule)
             for k in range(gamma.shape[1])]
    return GroupEstimates(_run(tasks, threads), "soft", estimator)

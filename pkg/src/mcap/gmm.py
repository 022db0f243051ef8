"""Full-covariance Gaussian mixture fitted by expectation-maximisation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import Partition

__all__ = [
    "EmError",
    "EmConfig",
    "MixtureParams",
    "EmResult",
    "default_ridge",
    "log_joint_densities",
    "e_step",
    "m_step",
    "assign",
    "kmeanspp_means",
    "em_fit",
]

_LOG_2PI = math.log(2.0 * math.pi)


class EmError(RuntimeError):
    """EM could not produce a valid fit."""


@dataclass(frozen=True)
class EmConfig:
    """EM settings.

    ``ridge=None`` uses ``ridge_scale`` times the mean diagonal of the pooled
    (whole-data) covariance, recomputed for every data set fitted.
    """

    max_iter: int = 500
    tol: float = 1e-6
    n_init: int = 5
    ridge: float | None = None
    ridge_scale: float = 1e-6
    seed: int | None = 0
    max_resets: int = 10
    threads: int = 1

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.n_init < 1:
            raise ValueError("n_init must be positive")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


@dataclass(frozen=True, eq=False)
class MixtureParams:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covariances, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        K, q = mu.shape
        if w.shape != (K,) or cov.shape != (K, q, q):
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covariances {cov.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to one")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def q(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "q": self.q,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureParams":
        return cls(np.array(data["weights"]), np.array(data["means"]), np.array(data["covariances"]))


@dataclass(eq=False)
class EmResult:
    params: MixtureParams
    responsibilities: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    loglik_trace: list[float] = field(default_factory=list)
    reset_iterations: list[int] = field(default_factory=list)
    restart_logliks: list[float] = field(default_factory=list)

    @property
    def labels(self) -> Partition:
        return assign(self.responsibilities)


def default_ridge(X: np.ndarray, scale: float = 1e-6) -> float:
    X = np.asarray(X)
    if X.shape[0] < 2:
        return scale
    var = X.var(axis=0).mean()
    return scale * float(var) if var > 0 else scale


def _cholesky(covs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        bad = [k for k in range(covs.shape[0]) if not _is_pd(covs[k])]
        raise EmError(f"covariance of component(s) {bad} is not positive definite") from None


def _is_pd(A: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(A)
        return True
    except np.linalg.LinAlgError:
        return False


def _log_joint(X: np.ndarray, weights: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    q = means.shape[1]
    chol = _cholesky(covs)
    prec_chol = np.linalg.inv(chol)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    z = (X[None, :, :] - means[:, None, :]) @ prec_chol.transpose(0, 2, 1)
    maha = (z * z).sum(axis=2).T
    return np.log(weights) - 0.5 * (q * _LOG_2PI + logdet + maha)


def _normalize_rows(logp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-sum-exp and the normalised probabilities."""
    top = logp.max(axis=1, keepdims=True)
    e = np.exp(logp - top)
    s = e.sum(axis=1, keepdims=True)
    return (top + np.log(s)).ravel(), e / s


def log_joint_densities(X, params: MixtureParams) -> np.ndarray:
    """``log pi_k + log N(x_i | mu_k, Sigma_k)`` as an ``n x K`` array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != params.q:
        raise ValueError(f"data have {X.shape[1]} columns, mixture has q={params.q}")
    return _log_joint(X, params.weights, params.means, params.covariances)


def e_step(X, params: MixtureParams) -> np.ndarray:
    """Posterior component probabilities (rows sum to one)."""
    return _normalize_rows(log_joint_densities(X, params))[1]


def _weighted_moments(X: np.ndarray, gamma: np.ndarray, nk: np.ndarray, ridge: float):
    means = (gamma.T @ X) / nk[:, None]
    diff = X[None, :, :] - means[:, None, :]
    covs = (gamma.T[:, :, None] * diff).transpose(0, 2, 1) @ diff / nk[:, None, None]
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    covs += ridge * np.eye(X.shape[1])
    return means, covs


def m_step(X, gamma, ridge: float) -> MixtureParams:
    """Weighted maximum-likelihood update plus ``ridge * I`` on each covariance."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape[0] != X.shape[0]:
        raise ValueError("responsibilities and data differ in number of rows")
    nk = gamma.sum(axis=0)
    if np.any(nk <= 0):
        raise EmError(f"component(s) {np.flatnonzero(nk <= 0).tolist()} have zero total responsibility")
    means, covs = _weighted_moments(X, gamma, nk, ridge)
    return MixtureParams(nk / nk.sum(), means, covs)


def assign(gamma) -> Partition:
    """Hard labels ``argmax_k gamma_ik`` (1-based; ties go to the lowest index)."""
    gamma = np.asarray(gamma)
    return Partition(np.argmax(gamma, axis=1) + 1, gamma.shape[1])


def kmeanspp_means(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _pooled_covariance(X: np.ndarray) -> np.ndarray:
    diff = X - X.mean(axis=0)
    return diff.T @ diff / X.shape[0]


def _single_run(X: np.ndarray, K: int, cfg: EmConfig, ridge: float, pooled: np.ndarray,
                seed) -> EmResult:
    n, q = X.shape
    rng = np.random.default_rng(seed)
    pooled_r = pooled + ridge * np.eye(q)
    weights = np.full(K, 1.0 / K)
    means = kmeanspp_means(X, K, rng)
    covs = np.repeat(pooled_r[None], K, axis=0)
    trace: list[float] = []
    resets: list[int] = []
    converged = False
    reset_last = False
    min_nk = max(q + 1.0, 0.1)  # weight floor 1/(10n) is n_k < 0.1
    it = 0
    for it in range(cfg.max_iter + 1):
        row_lse, gamma = _normalize_rows(_log_joint(X, weights, means, covs))
        ll = float(row_lse.sum())
        if not math.isfinite(ll):
            raise EmError(f"non-finite log-likelihood at iteration {it}")
        trace.append(ll)
        if len(trace) > 1 and not reset_last and abs(ll - trace[-2]) <= cfg.tol * abs(ll):
            converged = True
            break
        if it == cfg.max_iter:
            break
        nk = gamma.sum(axis=0)
        degenerate = nk < min_nk
        reset_last = False
        if degenerate.any() and K > 1 and len(resets) < cfg.max_resets:
            weights, means, covs = _repair(X, gamma, nk, degenerate, row_lse, pooled_r, ridge)
            resets.append(it)
            reset_last = True
            continue
        if np.any(nk <= 1e-10 * n):
            raise EmError(f"component collapsed at iteration {it}")
        means, covs = _weighted_moments(X, gamma, nk, ridge)
        weights = nk / nk.sum()
    return EmResult(MixtureParams(weights, means, covs), gamma, trace[-1], it, converged, trace, resets)


def _repair(X, gamma, nk, degenerate, row_lse, pooled_r, ridge):
    K = gamma.shape[1]
    healthy = ~degenerate
    means = np.empty((K, X.shape[1]))
    covs = np.empty((K, X.shape[1], X.shape[1]))
    if healthy.any():
        m, c = _weighted_moments(X, gamma[:, healthy], nk[healthy], ridge)
        means[healthy], covs[healthy] = m, c
    # poorest-fitting points become the new centres
    worst = np.argsort(row_lse, kind="stable")
    for slot, k in enumerate(np.flatnonzero(degenerate)):
        means[k] = X[worst[slot]]
        covs[k] = pooled_r
    weights = np.where(degenerate, 1.0 / K, nk / X.shape[0])
    return weights / weights.sum(), means, covs


def _restart_seeds(seed, n_init: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(n_init)]


def em_fit(Xq, K: int, cfg: EmConfig | None = None) -> EmResult:
    """Fit a ``K``-component full-covariance mixture; best of ``cfg.n_init`` restarts.

    Raises :class:`EmError` when every restart fails.
    """
    cfg = cfg or EmConfig()
    X = np.asarray(Xq, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n < K:
        raise ValueError(f"need at least K={K} rows, got {n}")
    if K < 1:
        raise ValueError("K must be >= 1")
    if not np.all(np.isfinite(X)):
        raise EmError("data contain non-finite values")
    with np.errstate(over="ignore", invalid="ignore"):
        pooled = _pooled_covariance(X)
    if not np.all(np.isfinite(pooled)):
        raise EmError("covariance of the data overflows; rescale the input")
    ridge = cfg.ridge if cfg.ridge is not None else default_ridge(X, cfg.ridge_scale)
    seeds = _restart_seeds(cfg.seed, cfg.n_init)

    def run(seed):
        try:
            return _single_run(X, K, cfg, ridge, pooled, seed)
        except (EmError, np.linalg.LinAlgError) as exc:
            return exc

    if cfg.threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            outcomes = list(pool.map(run, seeds))
    else:
        outcomes = [run(s) for s in seeds]

    fits = [o for o in outcomes if isinstance(o, EmResult)]
    if not fits:
        raise EmError(f"all {len(seeds)} EM restarts failed; last error: {outcomes[-1]}")
    best = max(fits, key=lambda r: r.loglik)  # first maximum wins
    best.restart_logliks = [o.loglik if isinstance(o, EmResult) else float("nan") for o in outcomes]
    return best

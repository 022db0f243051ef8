"""Sparse precision estimation: graphical lasso and neighbourhood selection.

The graphical lasso minimises

    -log det(Omega) + tr(S Omega) + lam * sum_ij |Omega_ij|

(diagonal included) by block coordinate descent over the columns of the
working covariance ``W``, each block being a lasso solved by coordinate
descent in compiled code. Convergence is declared on the KKT residual of
the returned ``Omega``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import ndtri

from .dataset import DataError

__all__ = [
    "GlassoConvergenceError",
    "CvWarning",
    "CovarianceInput",
    "PrecisionEstimate",
    "CvResult",
    "MbResult",
    "EDGE_THRESHOLD",
    "scaled_moments",
    "glasso_objective",
    "kkt_residual",
    "glasso_solve",
    "lambda_grid",
    "cross_validate",
    "cv_lambda",
    "lasso_cd",
    "mb_default_lambda",
    "mb_select",
    "graph_from_precision",
]

EDGE_THRESHOLD = 1e-8


class CvWarning(UserWarning):
    """Part of the penalty grid was dropped because a fold solve did not converge."""


class GlassoConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (KKT residual {residual:.3g})")
        self.residual = residual


# -- compiled kernels ---------------------------------------------------------

@njit(cache=True, nogil=True)
def _cd_pass(V, r, beta, lam, idx, count):
    """One coordinate-descent pass over ``idx[:count]``; ``r = u - V beta``."""
    p = r.shape[0]
    delta = 0.0
    for t in range(count):
        k = idx[t]
        vkk = V[k, k]
        old = beta[k]
        z = r[k] + vkk * old
        if z > lam:
            new = (z - lam) / vkk
        elif z < -lam:
            new = (z + lam) / vkk
        else:
            new = 0.0
        if new != old:
            d = new - old
            for i in range(p):
                r[i] -= d * V[k, i]
            beta[k] = new
            change = abs(d) * vkk
            if change > delta:
                delta = change
    return delta


@njit(cache=True, nogil=True)
def _lasso_gram(V, u, lam, beta, r, skip, tol, max_iter):
    """Minimise ``0.5 b'Vb - u'b + lam |b|_1`` over coordinates other than ``skip``.

    ``beta`` is a warm start updated in place; on return ``r = u - V beta``.
    Returns the number of full passes, or -1 without convergence.
    """
    p = u.shape[0]
    for i in range(p):
        acc = u[i]
        for k in range(p):
            if k != skip and beta[k] != 0.0:
                acc -= V[k, i] * beta[k]
        r[i] = acc
    others = np.empty(p, np.int64)
    m = 0
    for k in range(p):
        if k != skip:
            others[m] = k
            m += 1
    active = np.empty(p, np.int64)
    for sweep in range(max_iter):
        if _cd_pass(V, r, beta, lam, others, m) <= tol:
            return sweep + 1
        na = 0
        for k in range(p):
            if k != skip and beta[k] != 0.0:
                active[na] = k
                na += 1
        for _ in range(max_iter):
            if _cd_pass(V, r, beta, lam, active, na) <= tol:
                break
    return -1


@njit(cache=True, nogil=True)
def _glasso_sweep(W, S, B, lam, tol, max_iter):
    """Update every column of ``W`` once; returns the largest change in ``W``."""
    p = W.shape[0]
    r = np.empty(p)
    u = np.empty(p)
    beta = np.empty(p)
    worst = 0.0
    failed = 0
    for j in range(p):
        for i in range(p):
            u[i] = S[i, j]
            beta[i] = B[i, j]
        beta[j] = 0.0
        if _lasso_gram(W, u, lam, beta, r, j, tol, max_iter) < 0:
            failed += 1
        for i in range(p):
            B[i, j] = beta[i]
            if i != j:
                new = u[i] - r[i]
                d = abs(new - W[i, j])
                if d > worst:
                    worst = d
                W[i, j] = new
                W[j, i] = new
    return worst, failed


@njit(cache=True, nogil=True)
def _precision_from_blocks(W, B):
    p = W.shape[0]
    Omega = np.empty((p, p))
    for j in range(p):
        acc = W[j, j]
        for i in range(p):
            if i != j:
                acc -= W[i, j] * B[i, j]
        wjj = 1.0 / acc
        for i in range(p):
            Omega[i, j] = -B[i, j] * wjj
        Omega[j, j] = wjj
    return Omega


@njit(cache=True, nogil=True)
def _column_pass(Zt, norms, r, beta, lam, idx, count):
    """Coordinate pass for the data-form lasso; ``r`` is the current residual."""
    n = r.shape[0]
    delta = 0.0
    for t in range(count):
        k = idx[t]
        ck = norms[k]
        g = 0.0
        for i in range(n):
            g += Zt[k, i] * r[i]
        old = beta[k]
        z = g + ck * old
        if z > lam:
            new = (z - lam) / ck
        elif z < -lam:
            new = (z + lam) / ck
        else:
            new = 0.0
        if new != old:
            d = new - old
            for i in range(n):
                r[i] -= d * Zt[k, i]
            beta[k] = new
            if abs(d) * ck > delta:
                delta = abs(d) * ck
    return delta


@njit(cache=True, nogil=True)
def _lasso_columns(Zt, norms, target, lam, beta, r, tol, max_iter):
    """Lasso of row ``target`` of ``Zt`` on the other rows, ``0.5|y - Zb|^2 + lam |b|_1``.

    ``Zt`` is ``p x n`` (variables in rows); ``r`` receives the residual.
    """
    p, n = Zt.shape
    for i in range(n):
        r[i] = Zt[target, i]
    for k in range(p):
        if beta[k] != 0.0:
            for i in range(n):
                r[i] -= beta[k] * Zt[k, i]
    others = np.empty(p, np.int64)
    m = 0
    for k in range(p):
        if k != target and norms[k] > 0.0:
            others[m] = k
            m += 1
    active = np.empty(p, np.int64)
    for sweep in range(max_iter):
        if _column_pass(Zt, norms, r, beta, lam, others, m) <= tol:
            return sweep + 1
        na = 0
        for t in range(m):
            if beta[others[t]] != 0.0:
                active[na] = others[t]
                na += 1
        for _ in range(max_iter):
            if _column_pass(Zt, norms, r, beta, lam, active, na) <= tol:
                break
    return -1


@njit(cache=True, nogil=True)
def _neighbourhoods(Zt, norms, lam, tol, max_iter):
    p, n = Zt.shape
    C = np.zeros((p, p))
    beta = np.zeros(p)
    r = np.empty(n)
    failed = 0
    for j in range(p):
        beta[:] = 0.0
        if _lasso_columns(Zt, norms, j, lam, beta, r, tol, max_iter) < 0:
            failed += 1
        for k in range(p):
            C[k, j] = beta[k]
    return C, failed


# -- data types ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CovarianceInput:
    """Symmetric input matrix for the graphical lasso and its effective size."""

    S: np.ndarray
    effective_n: float = 1.0

    def __post_init__(self):
        S = np.array(self.S, dtype=np.float64)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError(f"S must be square, got shape {S.shape}")
        if not np.all(np.isfinite(S)):
            raise ValueError("S has non-finite entries")
        if np.max(np.abs(S - S.T), initial=0.0) > 1e-10:
            raise ValueError("S is not symmetric")
        if np.any(np.diag(S) <= 0):
            raise ValueError("S must have a positive diagonal")
        if not self.effective_n > 0:
            raise ValueError("effective_n must be positive")
        object.__setattr__(self, "S", 0.5 * (S + S.T))

    @property
    def p(self) -> int:
        return self.S.shape[0]


def graph_from_precision(Omega: np.ndarray, threshold: float = EDGE_THRESHOLD) -> set[tuple[int, int]]:
    iu, ju = np.nonzero(np.triu(np.abs(Omega) > threshold, k=1))
    return {(int(i), int(j)) for i, j in zip(iu, ju)}


@dataclass(eq=False)
class PrecisionEstimate:
    Omega: np.ndarray
    lam: float
    graph: set[tuple[int, int]]
    kkt: float = 0.0
    n_sweeps: int = 0
    W: np.ndarray | None = field(default=None, repr=False)
    B: np.ndarray | None = field(default=None, repr=False)


@dataclass(eq=False)
class CvResult:
    lam: float
    grid: np.ndarray
    scores: np.ndarray

    def table(self) -> list[tuple[float, float]]:
        return list(zip(self.grid.tolist(), self.scores.tolist()))


@dataclass(eq=False)
class MbResult:
    """Neighbourhood-selection fit; ``coef[:, j]`` regresses variable ``j`` on the rest."""

    edges: set[tuple[int, int]]
    coef: np.ndarray
    lam: float
    rule: str

    def scores(self) -> np.ndarray:
        """Symmetric edge strengths ``max(|b_ij|, |b_ji|)``."""
        A = np.abs(self.coef)
        return np.maximum(A, A.T)


# -- moments --------------------------------------------------------------------

def scaled_moments(X, weights=None):
    """Weighted mean, marginal variance, unit-diagonal covariance and effective size.

    Returns ``(mu, v, U, n_hat)`` with ``U = D C D`` where ``C`` is the
    weighted covariance (normalised by ``n_hat = sum(weights)``) and
    ``D = diag(v)^{-1/2}``.
    """
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0):
        raise ValueError("weights must be a nonnegative vector with one entry per row")
    n_hat = float(w.sum())
    if n_hat < 2:
        raise DataError(f"effective sample size {n_hat:.3g} is below 2")
    mu = w @ X / n_hat
    Xc = X - mu
    v = w @ (Xc * Xc) / n_hat
    scale = np.maximum(np.abs(mu), 1.0)
    flat = np.flatnonzero(~(v > 1e-24 * scale * scale))
    if flat.size:
        raise DataError(f"coordinate {int(flat[0])} has zero variance under the given weights")
    Z = Xc * (1.0 / np.sqrt(v))
    U = (Z * w[:, None]).T @ Z / n_hat
    U = 0.5 * (U + U.T)
    U[np.diag_indices(p)] = 1.0
    return mu, v, U, n_hat


# -- graphical lasso ----------------------------------------------------------

def glasso_objective(S, Omega, lam: float) -> float:
    """``-log det(Omega) + tr(S Omega) + lam * |Omega|_1`` (to be minimised)."""
    sign, logdet = np.linalg.slogdet(Omega)
    if sign <= 0:
        return np.inf
    return float(-logdet + np.sum(S * Omega) + lam * np.abs(Omega).sum())


def kkt_residual(S, Omega, lam: float, W=None) -> float:
    """Largest violation of the optimality conditions of the penalised problem."""
    S = np.asarray(S, dtype=np.float64)
    W = np.linalg.inv(Omega) if W is None else W
    G = S - W
    nz = np.abs(Omega) > 0
    res = np.where(nz, np.abs(G + lam * np.sign(Omega)), np.maximum(np.abs(G) - lam, 0.0))
    return float(res.max())


def _as_input(S) -> CovarianceInput:
    return S if isinstance(S, CovarianceInput) else CovarianceInput(np.asarray(S, dtype=np.float64))


def glasso_solve(S, lam: float, tol: float = 1e-7, max_iter: int = 1000,
                 warm: PrecisionEstimate | None = None, inner_tol: float | None = None) -> PrecisionEstimate:
    """Solve the graphical lasso at penalty ``lam``.

    ``S`` is a :class:`CovarianceInput` or a symmetric matrix. ``warm``
    reuses the regression coefficients of a previous solve on the same
    ``S``. Raises :class:`GlassoConvergenceError` when the KKT residual is
    still above ``tol`` after ``max_iter`` sweeps.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    S = _as_input(S).S
    p = S.shape[0]
    inner_tol = tol * 1e-2 if inner_tol is None else inner_tol
    if warm is not None and warm.B is not None and warm.B.shape == (p, p):
        B = warm.B.copy()
        W = warm.W.copy()
    else:
        B = np.zeros((p, p))
        W = S.copy()
    W[np.diag_indices(p)] = np.diag(S) + lam
    if _empty_is_optimal(S, lam):
        # every off-diagonal |S_ij| is within the penalty: diagonal closed form
        d = np.diag(S) + lam
        return PrecisionEstimate(np.diag(1.0 / d), float(lam), set(), 0.0, 0, np.diag(d), np.zeros((p, p)))
    residual = np.inf
    for sweep in range(1, max_iter + 1):
        _, failed = _glasso_sweep(W, S, B, float(lam), inner_tol, 10000)
        Omega = _precision_from_blocks(W, B)
        Omega = 0.5 * (Omega + Omega.T)
        try:
            residual = kkt_residual(S, Omega, lam)
        except np.linalg.LinAlgError:
            residual = np.inf
        if residual <= tol and not failed:
            if not _is_pd(Omega):
                raise GlassoConvergenceError("solution is not positive definite", residual)
            return PrecisionEstimate(Omega, float(lam), graph_from_precision(Omega), residual, sweep, W, B)
    raise GlassoConvergenceError(f"graphical lasso did not converge in {max_iter} sweeps", residual)


def _empty_is_optimal(S, lam) -> bool:
    off = S - np.diag(np.diag(S))
    return bool(np.max(np.abs(off), initial=0.0) <= lam)


def _is_pd(A) -> bool:
    try:
        np.linalg.cholesky(A)
        return True
    except np.linalg.LinAlgError:
        return False


def lambda_grid(S, n_lambda: int = 20, ratio: float = 0.01) -> np.ndarray:
    """Decreasing log-spaced penalties from the empty-graph threshold down to ``ratio`` of it."""
    S = np.asarray(S)
    lam_max = float(np.max(np.abs(S - np.diag(np.diag(S))), initial=0.0))
    if lam_max == 0.0:
        return np.array([0.0])
    return np.geomspace(lam_max, ratio * lam_max, n_lambda)


def _fold_score(X_test, w_test, mu, v, Omega) -> float:
    """Weighted held-out ``sum_i w_i (log det Omega - z_i' Omega z_i)`` on the training scale."""
    Z = (X_test - mu) / np.sqrt(v)
    quad = np.einsum("ij,jk,ik->i", Z, Omega, Z)
    _, logdet = np.linalg.slogdet(Omega)
    return float(w_test @ (logdet - quad))


def cross_validate(X, folds: int = 5, grid=None, seed=None, weights=None,
                   tol: float = 1e-4, max_iter: int = 1000) -> CvResult:
    """K-fold choice of the penalty by held-out Gaussian log-likelihood.

    Every fold is standardised with its training weighted moments; scores
    are responsibility-weighted when ``weights`` is given. Ties go to the
    larger penalty. Fold solves use a looser KKT tolerance than a final
    solve; the held-out scores move by far less than their spacing on the
    grid. If a fold solve fails to converge (tiny or rank-deficient training
    sets), that penalty and all smaller ones are dropped with a
    :class:`CvWarning`.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if folds < 2:
        raise ValueError("need at least two folds")
    if grid is None:
        grid = lambda_grid(scaled_moments(X, w)[2])
    grid = np.sort(np.asarray(grid, dtype=np.float64))[::-1]
    if grid.size == 1:
        return CvResult(float(grid[0]), grid, np.zeros(1))
    rng = np.random.default_rng(seed)
    parts = np.array_split(rng.permutation(n), folds)
    if min(len(part) for part in parts) < 2:
        raise DataError(f"{n} rows cannot fill {folds} folds with at least two rows each")
    scores = np.zeros(grid.size)
    usable = grid.size
    for test in parts:
        train = np.setdiff1d(np.arange(n), test)
        mu, v, U, _ = scaled_moments(X[train], w[train])
        warm = None
        for g, lam in enumerate(grid[:usable]):
            try:
                warm = glasso_solve(U, lam, tol, max_iter, warm=warm)
            except GlassoConvergenceError as err:
                # smaller penalties are harder still: drop this one and the rest
                if g == 0:
                    raise
                warnings.warn(f"penalties <= {lam:.4g} dropped from the CV grid: {err}", CvWarning, stacklevel=2)
                usable = g
                break
            scores[g] += _fold_score(X[test], w[test], mu, v, warm.Omega)
    scores[usable:] = -np.inf
    best = scores.max()
    lam = float(grid[np.flatnonzero(scores == best)[0]])  # grid is decreasing: first is largest
    return CvResult(lam, grid, scores)


def cv_lambda(X, folds: int = 5, grid=None, seed=None, weights=None) -> float:
    return cross_validate(X, folds, grid, seed, weights).lam


# -- neighbourhood selection ----------------------------------------------------

def lasso_cd(X, y, lam: float, tol: float = 1e-12, max_iter: int = 100000) -> np.ndarray:
    """Coefficients minimising ``(2n)^-1 |y - X b|^2 + lam |b|_1`` (no intercept)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    V = np.ascontiguousarray(X.T @ X / n)
    u = X.T @ y / n
    beta = np.zeros(X.shape[1])
    r = np.empty(X.shape[1])
    if _lasso_gram(V, u, float(lam), beta, r, -1, tol, max_iter) < 0:
        raise RuntimeError("lasso coordinate descent did not converge")
    return beta


def mb_default_lambda(n: float, p: int, alpha: float = 0.05) -> float:
    """Penalty ``n^-1/2 * Phi^-1(1 - alpha / (2 p^2))`` for standardised variables."""
    return float(ndtri(1.0 - alpha / (2.0 * p * p)) / np.sqrt(n))


def _standardised_rows(X, weights):
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    n_hat = float(w.sum())
    if n < 2 or n_hat < 2:
        raise DataError("neighbourhood selection needs at least two rows")
    mu = w @ X / n_hat
    Xc = X - mu
    v = w @ (Xc * Xc) / n_hat
    scale = np.maximum(np.abs(mu), 1.0)
    flat = np.flatnonzero(~(v > 1e-24 * scale * scale))
    if flat.size:
        raise DataError(f"column {int(flat[0])} is constant")
    Zt = np.ascontiguousarray((Xc * np.sqrt(w / n_hat)[:, None] / np.sqrt(v)).T)
    return Zt, n_hat


def mb_select(X, lam: float | None = None, rule: str = "and", weights=None,
              tol: float = 1e-10, max_iter: int = 10000) -> MbResult:
    """Neighbourhood selection: a lasso of each standardised variable on the rest.

    With ``weights`` the regressions use the responsibility-weighted,
    unit-variance data, so the implied Gram matrix is the scaled weighted
    covariance. ``rule="and"`` keeps an edge when both regressions select
    it, ``"or"`` when either does.
    """
    if rule not in ("and", "or"):
        raise ValueError(f"rule must be 'and' or 'or', got {rule!r}")
    Zt, n_hat = _standardised_rows(X, weights)
    p = Zt.shape[0]
    if lam is None:
        lam = mb_default_lambda(n_hat, p)
    norms = np.einsum("ij,ij->i", Zt, Zt)
    C, failed = _neighbourhoods(Zt, norms, float(lam), tol, max_iter)
    if failed:
        raise RuntimeError(f"{failed} neighbourhood regressions did not converge")
    support = C != 0
    both = support & support.T if rule == "and" else support | support.T
    iu, ju = np.nonzero(np.triu(both, k=1))
    return MbResult({(int(i), int(j)) for i, j in zip(iu, ju)}, C, float(lam), rule)

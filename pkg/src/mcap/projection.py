"""Linear maps from ``R^p`` to ``R^q``: sparse/dense random projections and PCA.

PCA on wide matrices (``p > n``) is computed from the ``n x n`` Gram matrix of
the column-centred data. Centring is applied block-wise over columns, so a
centred copy of a very wide matrix is never materialised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PROJECTION_KINDS",
    "RANDOM_KINDS",
    "ProjectionSpec",
    "ProjectionMatrix",
    "PcaBasis",
    "sparsity_parameter",
    "make_random_projection",
    "fit_pca_gram",
    "project",
    "make_projection",
]

RANDOM_KINDS = ("rp-gauss", "rp-achl", "rp-li")
PROJECTION_KINDS = RANDOM_KINDS + ("pca",)

# columns per block when streaming over wide matrices
_COL_BLOCK = 16384


@dataclass(frozen=True)
class ProjectionSpec:
    kind: str
    q: int
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in PROJECTION_KINDS:
            raise ValueError(f"unknown projection kind {self.kind!r}; expected one of {PROJECTION_KINDS}")
        if int(self.q) < 1:
            raise ValueError(f"target dimension must be >= 1, got {self.q}")


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    W: np.ndarray
    kind: str
    s: float | None = None

    @property
    def p(self) -> int:
        return self.W.shape[0]

    @property
    def q(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True, eq=False)
class PcaBasis:
    """Leading principal directions of a training matrix.

    ``components`` is ``p x q`` with orthonormal columns, ``eigenvalues`` are
    the corresponding covariance eigenvalues (``n - 1`` normalisation) and
    ``column_means`` the training column means used for centring.
    """

    components: np.ndarray
    eigenvalues: np.ndarray
    column_means: np.ndarray

    @property
    def p(self) -> int:
        return self.components.shape[0]

    @property
    def q(self) -> int:
        return self.components.shape[1]


def sparsity_parameter(kind: str, p: int) -> float:
    if kind == "rp-achl":
        return 3.0
    if kind == "rp-li":
        # probabilities 1/(2s) need an integer s >= 1
        return float(max(1, round(np.sqrt(p))))
    raise ValueError(f"{kind!r} has no sparsity parameter")


def make_random_projection(spec: ProjectionSpec, p: int) -> ProjectionMatrix:
    """Draw a ``p x q`` random projection matrix.

    ``rp-gauss`` has i.i.d. standard normal entries. The sparse kinds draw
    ``sqrt(s) * {+1, 0, -1}`` with probabilities ``1/(2s), 1 - 1/s, 1/(2s)``,
    where ``s = 3`` (``rp-achl``) or ``s = sqrt(p)`` rounded (``rp-li``).
    """
    if spec.kind not in RANDOM_KINDS:
        raise ValueError(f"{spec.kind!r} is not a random projection kind")
    q = int(spec.q)
    if q > p:
        raise ValueError(f"target dimension q={q} exceeds input dimension p={p}")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "rp-gauss":
        return ProjectionMatrix(rng.standard_normal((p, q)), spec.kind, None)
    s = sparsity_parameter(spec.kind, p)
    u = rng.random((p, q))
    tail = 1.0 / (2.0 * s)
    W = np.zeros((p, q))
    root = np.sqrt(s)
    W[u < tail] = root
    W[u >= 1.0 - tail] = -root
    return ProjectionMatrix(W, spec.kind, s)


def _column_means(X: np.ndarray) -> np.ndarray:
    return X.mean(axis=0, dtype=np.float64)


def _centered_gram(X: np.ndarray, means: np.ndarray) -> np.ndarray:
    n, p = X.shape
    G = np.zeros((n, n))
    for start in range(0, p, _COL_BLOCK):
        block = X[:, start:start + _COL_BLOCK] - means[start:start + _COL_BLOCK]
        G += block @ block.T
    return G


def _centered_left_product(X: np.ndarray, means: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``(X - 1 means^T)^T U`` computed block-wise over columns."""
    n, p = X.shape
    out = np.empty((p, U.shape[1]))
    colsum = U.sum(axis=0)
    for start in range(0, p, _COL_BLOCK):
        stop = min(start + _COL_BLOCK, p)
        out[start:stop] = X[:, start:stop].T @ U - np.outer(means[start:stop], colsum)
    return out


def _centered_right_product(X: np.ndarray, means: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``(X - 1 means^T) V`` computed block-wise over columns."""
    n, p = X.shape
    out = np.zeros((n, V.shape[1]))
    for start in range(0, p, _COL_BLOCK):
        stop = min(start + _COL_BLOCK, p)
        out += X[:, start:stop] @ V[start:stop]
    out -= means @ V
    return out


def _fix_signs(components: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[idx, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


def fit_pca_gram(X, q: int, method: str = "auto") -> PcaBasis:
    """Fit the top-``q`` principal directions of ``X``.

    ``method="auto"`` eigendecomposes the ``n x n`` Gram matrix when
    ``p > n`` and the ``p x p`` covariance otherwise; ``"gram"`` and
    ``"covariance"`` force one route. Each direction is signed so that its
    largest-magnitude loading is positive.
    """
    X = np.asarray(X)
    n, p = X.shape
    q = int(q)
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    if not 1 <= q <= min(n, p):
        raise ValueError(f"q={q} must lie in 1..min(n, p)={min(n, p)}")
    if method == "auto":
        method = "gram" if p > n else "covariance"
    means = _column_means(X)
    if method == "gram":
        G = _centered_gram(X, means)
        evals, evecs = np.linalg.eigh(G)
        scale = float(evals[-1])
        evals, evecs = evals[::-1][:q], evecs[:, ::-1][:, :q]
        _check_rank(evals, scale, q)
        components = _centered_left_product(X, means, evecs) / np.sqrt(evals)
    elif method == "covariance":
        Xc = X - means
        C = Xc.T @ Xc
        evals, evecs = np.linalg.eigh(C)
        scale = float(evals[-1])
        evals, components = evals[::-1][:q], evecs[:, ::-1][:, :q]
        _check_rank(evals, scale, q)
    else:
        raise ValueError(f"unknown PCA method {method!r}")
    eigenvalues = np.clip(evals, 0.0, None) / (n - 1)
    return PcaBasis(_fix_signs(components), eigenvalues, means)


def _check_rank(evals: np.ndarray, scale: float, q: int) -> None:
    if scale <= 0 or not np.isfinite(scale):
        raise ValueError("data have zero variance; PCA is undefined")
    tiny = scale * 1e-12
    if evals[q - 1] <= tiny:
        rank = int(np.sum(evals > tiny))
        raise ValueError(f"q={q} exceeds the numerical rank ({rank}) of the centred data")


def project(X, mapping: ProjectionMatrix | PcaBasis) -> np.ndarray:
    """Apply a fitted map to the rows of ``X`` and return the ``n x q`` scores."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if X.shape[1] != mapping.p:
        raise ValueError(f"data have {X.shape[1]} columns, map expects {mapping.p}")
    if isinstance(mapping, PcaBasis):
        return _centered_right_product(X, mapping.column_means, mapping.components)
    if isinstance(mapping, ProjectionMatrix):
        out = np.zeros((X.shape[0], mapping.q))
        for start in range(0, X.shape[1], _COL_BLOCK):
            stop = start + _COL_BLOCK
            out += X[:, start:stop] @ mapping.W[start:stop]
        return out
    raise TypeError(f"cannot project with {type(mapping).__name__}")


def make_projection(kind: str, X, q: int, seed: int | None = None) -> ProjectionMatrix | PcaBasis:
    """Build the map of the requested kind for data ``X``."""
    if kind == "pca":
        return fit_pca_gram(X, q)
    return make_random_projection(ProjectionSpec(kind, q, seed), np.asarray(X).shape[1])

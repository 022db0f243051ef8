"""End-to-end clustering: project, choose the target dimension, fit, assign."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import Partition
from .gmm import EmConfig, EmResult, MixtureParams, assign, em_fit
from .projection import PcaBasis, ProjectionMatrix, ProjectionSpec, fit_pca_gram, make_random_projection, project
from .stability import StabilityConfig, StabilityResult, build_grid, feasible_grid, projection_seed, select_q

__all__ = ["MCAPResult", "fit_mcap"]


@dataclass(eq=False)
class MCAPResult:
    labels: Partition
    responsibilities: np.ndarray
    params: MixtureParams
    loglik: float
    q: int
    kind: str
    projection: ProjectionMatrix | PcaBasis
    scores: np.ndarray
    stability: StabilityResult | None = None
    em: EmResult | None = None


def fit_mcap(X, K: int, kind: str = "pca", q: int | str = "auto",
             stability: StabilityConfig | None = None, em: EmConfig | None = None,
             threads: int = 1) -> MCAPResult:
    """Cluster the rows of ``X`` into ``K`` groups.

    With ``q="auto"`` the target dimension is the most stable value on the
    candidate grid; an integer ``q`` skips the search (``q=K`` gives the
    fixed-dimension baseline).
    """
    stability = stability or StabilityConfig()
    em = em or EmConfig()
    X = np.asarray(X)
    n, p = X.shape
    basis = None
    selection = None
    if q == "auto":
        if kind == "pca":
            grid = list(stability.grid) if stability.grid is not None else build_grid(n, K, stability.q_min)
            basis = fit_pca_gram(X, max(feasible_grid(grid, n, p, kind)))
        selection = select_q(X, K, kind, stability, em, threads, pca_basis=basis)
        q_final = selection.q_hat
    else:
        q_final = int(q)

    if kind == "pca":
        if basis is None:
            basis = fit_pca_gram(X, q_final)
        mapping = PcaBasis(basis.components[:, :q_final], basis.eigenvalues[:q_final], basis.column_means)
    else:
        mapping = make_random_projection(ProjectionSpec(kind, q_final, projection_seed(stability.seed, q_final)), p)
    Xq = project(X, mapping)
    fit = em_fit(Xq, K, replace(em, threads=max(em.threads, threads)))
    return MCAPResult(
        labels=assign(fit.responsibilities),
        responsibilities=fit.responsibilities,
        params=fit.params,
        loglik=fit.loglik,
        q=q_final,
        kind=kind,
        projection=mapping,
        scores=Xq,
        stability=selection,
        em=fit,
    )

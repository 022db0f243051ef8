import numpy as np
import pytest

from mcap.dataset import DataError, Partition
from mcap.evaluation import topk_edge_hits
from mcap.glasso import CvWarning, cv_lambda, glasso_solve, scaled_moments
from mcap.recovery import (
    back_transform,
    hard_estimates,
    soft_estimates,
    soft_moments,
    soft_precision,
)
from mcap.simulate import GgmSpec, gen_ggm_mixture
from mcap.stability import derive_seed


def two_clouds(seed=0, n=60, p=6):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p)) * rng.uniform(0.5, 2.0, p)
    labels = np.repeat([1, 2], n // 2)
    X[labels == 2] += 3.0
    return X, Partition(labels)


def test_hard_means_are_group_means():
    X, P = two_clouds()
    est = hard_estimates(X, P, lam=0.2)
    for k in (1, 2):
        np.testing.assert_allclose(est[k - 1].mean, X[P.labels == k].mean(axis=0), atol=1e-14)
        np.testing.assert_allclose(est[k - 1].variance, X[P.labels == k].var(axis=0), atol=1e-13)
    assert [g.n_hat for g in est.groups] == [30, 30]
    assert sum(g.n_hat for g in est.groups) == X.shape[0]


def test_hard_k1_equals_direct_glasso():
    X, _ = two_clouds(seed=1)
    est = hard_estimates(X, Partition(np.ones(60, dtype=int)), seed=3)
    _, _, U, _ = scaled_moments(X)
    assert len(est) == 1
    assert est[0].graph == glasso_solve(U, est[0].lam).graph
    assert est[0].lam == cv_lambda(X, seed=derive_seed(3, 0))


def test_hard_small_group_error():
    X, _ = two_clouds()
    labels = np.ones(60, dtype=int)
    labels[0] = 2
    with pytest.raises(DataError, match="group 2"):
        hard_estimates(X, Partition(labels), lam=0.1)


def test_hard_tiny_group_falls_back_to_empty_graph():
    X, _ = two_clouds(seed=12)
    labels = np.ones(60, dtype=int)
    labels[:3] = 2
    with pytest.warns(CvWarning, match="group 2 has 3 rows"):
        est = hard_estimates(X, Partition(labels), seed=0)
    _, _, U, _ = scaled_moments(X[:3])
    assert est[1].lam == pytest.approx(np.abs(U - np.diag(np.diag(U))).max())
    assert est[1].graph == set()
    assert est[0].cv_scores


def test_soft_moments_one_hot_matches_hard():
    X, P = two_clouds(seed=2)
    gamma = np.eye(2)[P.labels - 1]
    soft = soft_estimates(X, gamma, lam=0.15)
    hard = hard_estimates(X, P, lam=0.15)
    for s, h in zip(soft.groups, hard.groups):
        np.testing.assert_allclose(s.mean, h.mean, atol=1e-13)
        np.testing.assert_allclose(s.variance, h.variance, atol=1e-13)
        np.testing.assert_allclose(s.precision.Omega, h.precision.Omega, atol=1e-8)
        assert s.graph == h.graph


def test_soft_uniform_gamma_shares_covariance():
    X, _ = two_clouds(seed=3)
    m = soft_moments(X, np.full((60, 2), 0.5))
    np.testing.assert_array_equal(m[0].U, m[1].U)
    _, _, U, _ = scaled_moments(X)
    np.testing.assert_allclose(m[0].U, U, atol=1e-14)


def test_soft_invariants_random_gamma():
    rng = np.random.default_rng(4)
    X = rng.normal(2, 3, size=(80, 7))
    gamma = rng.dirichlet(np.ones(3), 80)
    m = soft_moments(X, gamma)
    for mk in m:
        assert np.abs(np.diag(mk.U) - 1).max() <= 1e-8
        assert np.all(mk.variance > 0)
    assert abs(sum(mk.n_hat for mk in m) - 80) <= 1e-8
    k = 1
    w = gamma[:, k]
    mu = (w[:, None] * X).sum(axis=0) / w.sum()
    v = (w[:, None] * (X - mu) ** 2).sum(axis=0) / w.sum()
    D = np.diag(1 / np.sqrt(v))
    U = D @ ((w[:, None] * (X - mu)).T @ (X - mu)) @ D / w.sum()
    np.testing.assert_allclose(m[k].mean, mu, atol=1e-12)
    np.testing.assert_allclose(m[k].variance, v, atol=1e-12)
    np.testing.assert_allclose(m[k].U, U, atol=1e-12)


def test_soft_errors():
    X = np.random.default_rng(5).standard_normal((10, 3))
    bad = np.full((10, 2), 0.6)
    with pytest.raises(ValueError):
        soft_moments(X, bad)
    gamma = np.zeros((10, 2))
    gamma[:, 0] = 1.0
    gamma[0] = [0.5, 0.5]
    with pytest.raises(DataError):
        soft_moments(X, gamma)
    X[:, 1] = 4.0
    with pytest.raises(DataError, match="coordinate 1"):
        soft_moments(X, np.full((10, 2), 0.5))


def test_soft_precision_examples():
    est = soft_precision(np.eye(5), 50.0, 0.1)
    assert est.graph == set()
    np.testing.assert_allclose(est.Omega, np.eye(5) / 1.1, atol=1e-15)
    rng = np.random.default_rng(6)
    A = rng.standard_normal((4, 30))
    S = np.cov(A)
    d = 1 / np.sqrt(np.diag(S))
    U = S * np.outer(d, d)
    np.testing.assert_allclose(soft_precision(U, 30.0, 0.0).Omega, np.linalg.inv(U), atol=1e-6)


def test_back_transform():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((200, 4)) * np.array([1.0, 2.0, 0.5, 3.0])
    mu, v, U, _ = scaled_moments(X)
    Om = np.linalg.inv(U)
    np.testing.assert_allclose(back_transform(Om, v), np.linalg.inv(np.cov(X, rowvar=False, ddof=0)), atol=1e-10)


def test_group_permutation_equivariance():
    X, P = two_clouds(seed=8)
    swapped = Partition(3 - P.labels)
    a = hard_estimates(X, P, lam=0.2)
    b = hard_estimates(X, swapped, lam=0.2)
    for k in range(2):
        np.testing.assert_array_equal(a[k].mean, b[1 - k].mean)
        np.testing.assert_array_equal(a[k].precision.Omega, b[1 - k].precision.Omega)
    rng = np.random.default_rng(9)
    gamma = rng.dirichlet(np.ones(2), 60)
    c = soft_estimates(X, gamma, lam=0.2)
    d = soft_estimates(X, gamma[:, ::-1], lam=0.2)
    for k in range(2):
        np.testing.assert_array_equal(c[k].precision.Omega, d[1 - k].precision.Omega)


def test_graphs_symmetric_no_self_loops():
    X, P = two_clouds(seed=10)
    for est in (hard_estimates(X, P, seed=1), hard_estimates(X, P, estimator="mb")):
        for g in est.groups:
            assert all(i < j for i, j in g.graph)
            S = g.edge_scores()
            np.testing.assert_array_equal(S, S.T)


def test_estimator_none_and_threads():
    X, P = two_clouds(seed=11)
    est = hard_estimates(X, P, estimator="none")
    assert est[0].precision is None and est[0].graph == set()
    a = soft_estimates(X, np.eye(2)[P.labels - 1] * 0.8 + 0.1, seed=2)
    b = soft_estimates(X, np.eye(2)[P.labels - 1] * 0.8 + 0.1, seed=2, threads=2)
    assert a.lambdas == b.lambdas
    for ga, gb in zip(a.groups, b.groups):
        np.testing.assert_array_equal(ga.precision.Omega, gb.precision.Omega)
    with pytest.raises(ValueError):
        hard_estimates(X, P, estimator="bogus")


def test_known_labels_beat_pooled_fit():
    # pooling two groups with different graphs mixes their dependence structure
    precisions = []
    for rep in range(3):
        s = gen_ggm_mixture(GgmSpec(p=50, edges_per_graph=40, K=2, n_k=150, seed=rep))
        X = s.data.values
        split = hard_estimates(X, s.truth, seed=rep)
        pooled = hard_estimates(X, Partition(np.ones(X.shape[0], dtype=int)), seed=rep)
        for k in range(2):
            truth = s.graphs[k]
            m = len(truth)
            precisions.append((topk_edge_hits(split[k].edge_scores(), truth, m).fraction,
                               topk_edge_hits(pooled[0].edge_scores(), truth, m).fraction))
    split_mean, pooled_mean = np.mean(precisions, axis=0)
    assert split_mean >= pooled_mean

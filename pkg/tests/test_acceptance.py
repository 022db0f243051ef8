"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line with the measured numbers, then
asserts the same threshold. The simulation criteria take minutes each.
"""

import itertools
import json
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest

from mcap import cli
from mcap.evaluation import adjusted_rand_index, auprc_edges, match_groups, rand_index
from mcap.glasso import glasso_objective, glasso_solve
from mcap.gmm import EmConfig, em_fit, m_step
from mcap.pipeline import fit_mcap
from mcap.projection import fit_pca_gram, project
from mcap.recovery import hard_estimates, soft_estimates
from mcap.simulate import BlockWishartSpec, GgmSpec, gen_block_wishart, gen_ggm_mixture, gen_isotropic
from mcap.stability import StabilityConfig, _pair_scores, build_grid, draw_subsets, grid_max, select_q

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
    return emit


def mcap_ari(X, truth, seed, q="auto"):
    res = fit_mcap(X, 2, "pca", q, StabilityConfig(seed=seed), EmConfig(seed=seed))
    return adjusted_rand_index(res.labels, truth)


def test_c1_covariance_signal(report):
    auto, fixed = [], []
    elapsed = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for rep in range(10):
            X, truth = gen_block_wishart(BlockWishartSpec(block_size=200, dof=200, p=2000, K=2, n_k=100,
                                                          d=0.0, seed=rep))
            start = time.perf_counter()
            auto.append(mcap_ari(X.values, truth, rep))
            elapsed += time.perf_counter() - start
            fixed.append(mcap_ari(X.values, truth, rep, q=2))
    a, f = float(np.mean(auto)), float(np.mean(fixed))
    ok = a >= 0.8 and f <= 0.2 and elapsed <= 300
    report(1, ok, f"mean aRI auto={a:.3f} (>=0.8), q=K={f:.3f} (<=0.2), auto runtime={elapsed:.0f}s (<=300s)")
    assert ok


def test_c2_mean_signal_ordering(report):
    ds = (0.0, 0.05, 0.1, 0.2)
    means = []
    for d in ds:
        aris = []
        for rep in range(10):
            X, truth = gen_isotropic(2, 100, 1000, d, seed=rep)
            aris.append(mcap_ari(X.values, truth, rep))
        means.append(float(np.mean(aris)))
    monotone = all(b >= a - 0.02 for a, b in zip(means, means[1:]))
    ok = monotone and means[-1] >= 0.95
    table = ", ".join(f"d={d}: {m:.3f}" for d, m in zip(ds, means))
    report(2, ok, f"mean aRI {table}; monotone(0.02 slack)={monotone}, top>=0.95")
    assert ok


def test_c3_null_safety(report):
    aris = []
    for rep in range(20):
        X, truth = gen_block_wishart(BlockWishartSpec(block_size=200, dof=np.inf, p=2000, K=2, n_k=100,
                                                      d=0.0, seed=100 + rep))
        aris.append(mcap_ari(X.values, truth, rep))
    m = float(np.mean(aris))
    ok = abs(m) <= 0.05
    report(3, ok, f"mean aRI over 20 null reps = {m:+.4f} (|.| <= 0.05)")
    assert ok


def _recovery_auprc(s, seed, p):
    res = fit_mcap(s.data.values, 2, "pca", "auto", StabilityConfig(seed=seed), EmConfig(seed=seed))
    mapping = match_groups(res.labels, s.truth)
    hard = hard_estimates(s.data.values, res.labels, seed=seed)
    soft = soft_estimates(s.data.values, res.responsibilities, seed=seed)
    out = []
    for est in (hard, soft):
        out.append(np.mean([auprc_edges(est[k].edge_scores(), s.graphs[mapping.get(k + 1, k + 1) - 1], p)
                            for k in range(2)]))
    return out


def test_c4_graph_recovery(report):
    ns = (200, 400, 800)
    hard_means, soft_means = [], []
    for n in ns:
        vals = [_recovery_auprc(gen_ggm_mixture(GgmSpec(p=100, edges_per_graph=30, K=2, n_k=n // 2, d=0.1,
                                                        seed=rep)), rep, 100)
                for rep in range(10)]
        h, s = np.mean(vals, axis=0)
        hard_means.append(float(h))
        soft_means.append(float(s))
    monotone = all(b >= a for a, b in zip(soft_means, soft_means[1:]))
    soft_wins = all(s >= h - 0.02 for s, h in zip(soft_means, hard_means))
    # one realization of the p=500 setting (about 100 edges per graph) at the largest n
    start = time.perf_counter()
    big = _recovery_auprc(gen_ggm_mixture(GgmSpec(p=500, edges_per_graph=100, K=2, n_k=400, d=0.1, seed=0)), 0, 500)
    big_time = time.perf_counter() - start
    ok = monotone and soft_wins and big_time <= 1800
    table = "; ".join(f"n={n}: soft={s:.3f} hard={h:.3f}" for n, s, h in zip(ns, soft_means, hard_means))
    report(4, ok, f"{table}; soft nondecreasing={monotone}, soft>=hard-0.02={soft_wins}; "
                  f"p=500 n=800 run {big_time:.0f}s (<=1800s), AUPRC hard={big[0]:.3f} soft={big[1]:.3f}")
    assert ok


def _dual_value(S, lam):
    # projected gradient ascent on max log det W subject to |W - S| <= lam
    W = S + lam * np.eye(S.shape[0])
    for _ in range(200_000):
        step = np.linalg.eigvalsh(W)[0] ** 2
        W_new = np.clip(W + step * np.linalg.inv(W), S - lam, S + lam)
        if np.abs(W_new - W).max() < 1e-15:
            break
        W = W_new
    return np.linalg.slogdet(W)[1] + S.shape[0]


def _brute_rand(a, b):
    agree = sum((a[i] == a[j]) == (b[i] == b[j]) for i, j in itertools.combinations(range(len(a)), 2))
    return agree / (len(a) * (len(a) - 1) / 2)


def test_c5_oracle_equivalences(report):
    rng = np.random.default_rng(0)
    pca_err = 0.0
    for _ in range(100):
        n, p = rng.integers(5, 40), rng.integers(5, 80)
        X = rng.standard_normal((n, p))
        q = int(rng.integers(1, min(n - 1, p) + 1))
        scores = project(X, fit_pca_gram(X, q, method="gram"))
        Xc = X - X.mean(axis=0)
        U, s, _ = np.linalg.svd(Xc, full_matrices=False)
        ref = U[:, :q] * s[:q]
        signs = np.sign(np.sum(scores * ref, axis=0))
        if np.all(np.diff(s[: q + 1]) < -1e-6 * s[0]):
            pca_err = max(pca_err, np.abs(scores - ref * signs).max())
    rand_exact = True
    for _ in range(200):
        n = int(rng.integers(2, 51))
        a, b = rng.integers(1, 4, n), rng.integers(1, 5, n)
        rand_exact &= rand_index(a, b) == _brute_rand(a, b)
    glasso_err = 0.0
    for seed in range(5):
        A = np.random.default_rng(seed).standard_normal((5, 8))
        S = A @ A.T / 8
        est = glasso_solve(S, 0.1)
        glasso_err = max(glasso_err, abs(glasso_objective(S, est.Omega, 0.1) - _dual_value(S, 0.1)))
    X = rng.standard_normal((50, 3))
    gamma = rng.dirichlet(np.ones(3), 50)
    params = m_step(X, gamma, 0.0)
    mom_err = 0.0
    for k in range(3):
        w = gamma[:, k]
        mu = sum(w[i] * X[i] for i in range(50)) / w.sum()
        C = sum(w[i] * np.outer(X[i] - mu, X[i] - mu) for i in range(50)) / w.sum()
        mom_err = max(mom_err, np.abs(params.means[k] - mu).max(), np.abs(params.covariances[k] - C).max(),
                      abs(params.weights[k] - w.mean()))
    ok = pca_err <= 1e-7 and rand_exact and glasso_err <= 1e-5 and mom_err <= 1e-12
    report(5, ok, f"(a) Gram vs SVD max diff={pca_err:.1e}; (b) Rand exact={rand_exact}; "
                  f"(c) glasso vs dual oracle={glasso_err:.1e}; (d) m_step moments={mom_err:.1e}")
    assert ok


def test_c6_invariants(report):
    rng = np.random.default_rng(1)
    X = np.vstack([rng.standard_normal((60, 3)), rng.standard_normal((60, 3)) * 2 + 3])
    monotone = stochastic = True
    for seed in range(5):
        fit = em_fit(X, 3, EmConfig(seed=seed, n_init=1))
        tr = np.asarray(fit.loglik_trace)
        steps = [i for i in range(1, tr.size) if i - 1 not in set(fit.reset_iterations)]
        monotone &= all(tr[i] >= tr[i - 1] - 1e-9 * abs(tr[i - 1]) for i in steps)
        stochastic &= bool(np.all(fit.responsibilities >= 0)) and \
            np.abs(fit.responsibilities.sum(axis=1) - 1).max() <= 1e-12
    subs = draw_subsets(100, 6, 75, seed=2)
    labels = [rng.integers(0, 3, 75) for _ in subs]
    perm = np.array([1, 2, 0])
    a, _ = _pair_scores(subs, labels)
    b, _ = _pair_scores(subs, [perm[lab] for lab in labels])
    perm_ok = np.array_equal(a, b)
    Y = rng.standard_normal((80, 40))
    cfg = StabilityConfig(n_subsets=5, grid=(2, 3, 5), seed=3)
    r1, r2, r3 = select_q(Y, 2, "pca", cfg), select_q(Y, 2, "pca", cfg), select_q(Y, 2, "pca", cfg, threads=4)
    determ = r1.scores == r2.scores == r3.scores
    grid_ok = grid_max(200, 2) == 31 and grid_max(200, 4) == 22 and build_grid(200, 2)[-1] == 31
    ok = monotone and stochastic and perm_ok and determ and grid_ok
    report(6, ok, f"EM monotone={monotone}, rows stochastic={stochastic}, S_q relabel-invariant={perm_ok}, "
                  f"thread-independent={determ}, grid (200,2)->31 (200,4)->22={grid_ok}")
    assert ok


_LARGE_P = """
import resource, sys, time
from mcap import cli
out = sys.argv[1]
t = time.perf_counter()
assert cli.main(["simulate", "--scenario", "isotropic", "--n-k", "100", "--p", "1000000", "--d", "0.1",
                 "--format", "npy", "--out", out + "/sim"]) == 0
gen = time.perf_counter() - t
t = time.perf_counter()
assert cli.main(["--threads", "1", "cluster", "--data", out + "/sim/data.npy", "--K", "2", "--q", "fixed:K",
                 "--out", out + "/clu"]) == 0
fit = time.perf_counter() - t
print(gen, fit, resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024)
"""


def test_c7_scale(report, tmp_path):
    sim, clu = tmp_path / "sim", tmp_path / "clu"
    assert cli.main(["simulate", "--scenario", "isotropic", "--n-k", "100", "--p", "100000", "--d", "0.1",
                     "--format", "npy", "--out", str(sim)]) == 0
    start = time.perf_counter()
    assert cli.main(["--threads", "1", "cluster", "--data", str(sim / "data.npy"), "--K", "2",
                     "--out", str(clu)]) == 0
    t_cluster = time.perf_counter() - start
    q_hat = json.loads((clu / "manifest.json").read_text())["q_hat"]
    # p = 10^6 runs in a fresh process so its peak resident memory is measured on its own
    proc = subprocess.run([sys.executable, "-c", _LARGE_P, str(tmp_path)], capture_output=True, text=True,
                          check=True)
    gen, fit, peak = (float(v) for v in proc.stdout.split()[-3:])
    data_bytes = 200 * 10**6 * 8
    pxp_bytes = 8 * 10**12
    ok = t_cluster <= 300 and peak < 3 * data_bytes < pxp_bytes
    report(7, ok, f"p=1e5 auto cluster {t_cluster:.1f}s (<=300s, q_hat={q_hat}); p=1e6 generation {gen:.1f}s, "
                  f"fixed-q cluster {fit:.1f}s, peak RSS {peak / 2**30:.2f} GiB vs data "
                  f"{data_bytes / 2**30:.2f} GiB (a p x p matrix would need {pxp_bytes / 2**40:.0f} TiB)")
    assert ok

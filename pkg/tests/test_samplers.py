import math

import numpy as np
import pytest

from gkuq.gengk import HybridResult, ProblemInstance, gen_gk, gen_gk_init, solve_projected, map_estimate
from gkuq.operators import aslinearoperator
from gkuq.oracle import dense_matrix_function
from gkuq.posterior import exact_initializers, omega_sequence
from gkuq.priors import DensePreconditioner, GridGeometry, MaternKernel, assemble_covariance, build_laplacian_preconditioner
from gkuq.problems import add_noise, tomo_problem
from gkuq.samplers import (
    PriorFactor,
    draw_samples,
    lowrank_rep,
    method1_sample,
    method1_setup,
    method2_sample,
    method2_setup,
    monte_carlo_estimate,
    sample_diagnostics,
    sample_error_bound,
    standard_normal,
    woodbury_half_inverse,
)


def hybrid_at(problem, k, lam):
    """HybridResult for exactly ``k`` gen-GK steps at a fixed ``lam``."""
    f = gen_gk(problem, k)
    z = solve_projected(f.B, f.b_norm, lam)
    return HybridResult(map_estimate(problem, f, z), z, lam, f.k, f, "max-iter")


def assemble(sample_fn, n, shift):
    return np.column_stack([sample_fn(e).x - shift for e in np.eye(n)])


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# ---------------------------------------------------------------- small dense pieces


def test_lowrank_rep_examples():
    Z, th, deficient = lowrank_rep(np.eye(5)[:, :1])
    np.testing.assert_allclose(np.abs(Z[:, 0]), np.eye(5)[0], atol=1e-15)
    np.testing.assert_allclose(th, [1.0])
    assert not deficient
    q = np.linalg.qr(np.random.default_rng(0).standard_normal((8, 2)))[0]
    W = q * [2.0, 3.0]
    Z, th, _ = lowrank_rep(W)
    np.testing.assert_allclose(th, [9.0, 4.0], rtol=1e-14)
    np.testing.assert_allclose(Z @ Z.T @ W, W, atol=1e-14)
    W = np.random.default_rng(1).standard_normal((30, 5))
    Z, th, _ = lowrank_rep(W)
    assert np.linalg.norm(Z * th @ Z.T - W @ W.T) <= 1e-12 * max(1.0, np.linalg.norm(W @ W.T)) * 10
    np.testing.assert_allclose(Z.T @ Z, np.eye(5), atol=1e-13)
    assert np.all(np.diff(th) <= 0)


def test_lowrank_rep_flags_deficiency():
    W = np.ones((6, 2))
    _, th, deficient = lowrank_rep(W)
    assert deficient and th[1] == 0.0


@pytest.mark.parametrize("k,n,seed", [(1, 5, 0), (4, 30, 1), (10, 100, 2), (7, 7, 3)])
def test_woodbury_half_inverse(k, n, seed):
    rng = np.random.default_rng(seed)
    Z = np.linalg.qr(rng.standard_normal((n, k)))[0]
    theta = rng.random(k) * 10.0 ** rng.integers(-3, 4, k)
    D = woodbury_half_inverse(theta)
    lhs = dense_matrix_function(np.eye(n) + Z * theta @ Z.T, "invsqrt")
    np.testing.assert_allclose(np.eye(n) - Z * D @ Z.T, lhs, atol=1e-12)
    with pytest.raises(ValueError):
        woodbury_half_inverse(-theta)


def test_sample_error_bound_zero():
    assert sample_error_bound(0.0, 2.0, 3.0, 4.0, 10.0) == 0.0
    with pytest.raises(ValueError):
        sample_error_bound(1.0, 0.0, 1.0, 1.0, 1.0)


def test_standard_normal_determinism():
    a = standard_normal(5, 3, 10)
    np.testing.assert_array_equal(a, standard_normal(5, 3, 10))
    assert not np.array_equal(a, standard_normal(5, 4, 10))
    assert not np.array_equal(a, standard_normal(5, 3, 10, stream=1))


def test_monte_carlo_estimate_examples():
    rng = np.random.default_rng(0)
    N = 10_000
    X = rng.standard_normal((3, N))
    mean, se = monte_carlo_estimate(lambda s: s, X)
    assert np.all(np.abs(mean) <= 4 / math.sqrt(N))
    c = np.array([1.5, -2.0])
    mean, se = monte_carlo_estimate(lambda s: c, X)
    np.testing.assert_array_equal(mean, c)
    np.testing.assert_array_equal(se, 0.0)
    with pytest.raises(ValueError):
        monte_carlo_estimate(lambda s: s, [np.zeros(2)])


# ---------------------------------------------------------------- factor identities (dense)


def test_method1_factor_identity(small64):
    p, d = small64.problem, small64.dense
    G = build_laplacian_preconditioner(small64.setup.space_geometry, 0.5)
    s1 = method1_setup(small64.hybrid, p, G, tol=1e-10)
    S_hat = assemble(s1.sample, p.n, small64.hybrid.s_k)
    f = small64.hybrid.factorization
    assert rel_fro(S_hat @ S_hat.T, d.Gamma_hat(f.V, f.T)) <= 1e-6
    assert len(s1.precompute_iters) == f.k


def test_method2_factor_identity(small64):
    p, d = small64.problem, small64.dense
    G = build_laplacian_preconditioner(small64.setup.space_geometry, 0.5)
    s2 = method2_setup(small64.hybrid, p, G, tol=1e-10)
    S_F = assemble(s2.sample, p.n, small64.hybrid.s_k)
    assert rel_fro(S_F @ S_F.T, d.Gamma_post) <= 1e-8
    lr = method2_setup(small64.hybrid, p, G, tol=1e-10, lowrank=True)
    S_lr = assemble(lr.sample, p.n, small64.hybrid.s_k)
    f = small64.hybrid.factorization
    assert rel_fro(S_lr @ S_lr.T, d.Gamma_hat(f.V, f.T)) <= 1e-6


def test_method1_without_data_is_prior(small64):
    p = small64.problem.with_lambda(1.0)
    Q = small64.dense.Q
    G = DensePreconditioner(dense_matrix_function(Q, "invsqrt"))
    f0 = gen_gk_init(p)
    HR = HybridResult(p.mu.copy(), np.zeros(0), 1.0, 0, f0, "max-iter")
    s = method1_setup(HR, p, G)
    assert s.k == 0
    S = assemble(s.sample, p.n, p.mu)
    np.testing.assert_allclose(S @ S.T, Q, atol=1e-10)
    eps = standard_normal(0, 0, p.n)
    np.testing.assert_allclose(method1_sample(s, eps).x, PriorFactor(p.Q, G, 1.0).inverse(eps).x)


def test_method2_without_data_is_prior():
    n, m, lam = 32, 10, 0.5
    Q = assemble_covariance(MaternKernel(0.5, 0.2), GridGeometry((n,))).matrix
    p = ProblemInstance(aslinearoperator(np.zeros((m, n))), aslinearoperator(Q, spd_hint=True), np.ones(m),
                        np.ones(m), lam=lam)
    HR = HybridResult(np.zeros(n), np.zeros(0), lam, 0, gen_gk_init(p), "max-iter")
    s2 = method2_setup(HR, p, build_laplacian_preconditioner(GridGeometry((n,)), 0.5), tol=1e-10)
    S = assemble(s2.sample, n, np.zeros(n))
    np.testing.assert_allclose(S @ S.T, Q / lam**2, atol=1e-8 * np.abs(Q).max() / lam**2)


def test_methods_reject_zero_lambda(small64):
    HR = hybrid_at(small64.problem, 3, 0.0)
    with pytest.raises(ValueError):
        method1_setup(HR, small64.problem)
    with pytest.raises(ValueError):
        method2_setup(HR, small64.problem)


# ---------------------------------------------------------------- error bound for shared noise


@pytest.mark.parametrize("k", [2, 5, 10, 20])
def test_sample_error_bound_holds(small64, k):
    p, d, lam = small64.problem, small64.dense, small64.lam
    full = gen_gk(p, p.n + 1)
    w0, _ = exact_initializers(p)
    om, _ = omega_sequence(full.alphas, full.betas, w0, terminal_sq=0.0)
    S = d.sample_factor()
    Qmh = dense_matrix_function(d.Q, "invsqrt")
    sampler = method1_setup(hybrid_at(p, k, lam), p, None, tol=1e-10)
    for j in range(5):
        eps = standard_normal(99, j, p.n)
        s = d.s_post + S @ eps
        s_hat = method1_sample(sampler, eps).x
        dist = lam * np.linalg.norm(Qmh @ (s - s_hat))
        bound = sample_error_bound(om[k], lam, full.alphas[0], full.betas[0], np.linalg.norm(eps))
        assert dist <= bound, (k, j, dist, bound)


def test_sample_error_bound_decreases_on_heat(heat, heat_full):
    w0, _ = exact_initializers(heat.problem)
    om, _ = omega_sequence(heat_full.alphas, heat_full.betas, w0, terminal_sq=0.0)
    b = [sample_error_bound(om[k], heat.lam, heat_full.alphas[0], heat_full.betas[0], 16.0) for k in range(1, 60)]
    assert np.all(np.diff(b) <= 0)


# ---------------------------------------------------------------- Monte Carlo


def _cov_zscores(X, C):
    N = X.shape[1]
    E = np.cov(X)
    se = np.sqrt((C**2 + np.outer(np.diag(C), np.diag(C))) / N)
    return np.abs(E - C) / se


def test_method1_distribution(small64, mc_draws):
    f = small64.hybrid.factorization
    target = small64.dense.Gamma_hat(f.V, f.T)
    X = mc_draws.set1.samples
    assert np.max(_cov_zscores(X, target)) <= 4
    se = np.sqrt(np.diag(target) / mc_draws.N)
    assert np.all(np.abs(X.mean(axis=1) - small64.hybrid.s_k) <= 4 * se)


def test_method2_distribution(small64, mc_draws):
    d = small64.dense
    X = mc_draws.set2.samples
    assert np.max(_cov_zscores(X, d.Gamma_post)) <= 4
    se = np.sqrt(np.diag(d.Gamma_post) / mc_draws.N)
    # Method 2 is centred on s_k; the posterior mean differs by the truncation error
    assert np.all(np.abs(X.mean(axis=1) - small64.hybrid.s_k) <= 4 * se)


def test_pixelwise_variance_matches_dense_diagonal(small64, mc_draws):
    d = small64.dense
    s_k = small64.hybrid.s_k
    mean, se = monte_carlo_estimate(lambda s: (s - s_k) ** 2, mc_draws.set2.samples)
    assert np.all(np.abs(mean - np.diag(d.Gamma_post)) <= 4 * se)


def test_draws_are_reproducible_and_split_invariant(small64, mc_draws):
    s1 = mc_draws.m1
    a = draw_samples(s1, 6, seed=11)
    np.testing.assert_array_equal(a.samples, mc_draws.set1.samples[:, :6])
    b = np.hstack([draw_samples(s1, 3, seed=11).samples, draw_samples(s1, 3, seed=11, start=3).samples])
    np.testing.assert_array_equal(a.samples, b)
    assert a.warnings == 0 and a.indices == list(range(6))
    with pytest.raises(ValueError):
        draw_samples(s1, 0, seed=1)


def test_sample_diagnostics_trace(mc_draws):
    rows = sample_diagnostics(mc_draws.m2, standard_normal(0, 0, 64))
    assert rows and rows[-1]["e_tilde"] <= 1e-8
    rows = sample_diagnostics(mc_draws.m1, standard_normal(0, 0, 64))
    assert rows[-1]["e_tilde"] <= 1e-8


# ---------------------------------------------------------------- tomography scale


@pytest.fixture(scope="module")
def tomo64():
    from gkuq.gengk import hybrid_solve

    tp = tomo_problem(64, 90)
    d, noise = add_noise(tp.d_clean, 0.02, seed=0)
    Q = assemble_covariance(MaternKernel(0.5, 0.25), tp.geometry).op
    problem = ProblemInstance(tp.A, Q, d, noise.rinv_diag)
    hyb = hybrid_solve(problem)
    return problem.with_lambda(hyb.lam), hyb, build_laplacian_preconditioner(tp.geometry, 0.5)


def test_tomo_method1_precompute_iterations(tomo64):
    problem, hyb, G = tomo64
    s1 = method1_setup(hyb, problem, G)
    total = sum(s1.precompute_iters)
    assert len(s1.precompute_iters) == hyb.k
    assert 100 <= total <= 5000


def test_tomo_method2_preconditioning_ratio(tomo64):
    problem, hyb, G = tomo64
    pre = method2_setup(hyb, problem, G, tol=1e-6)
    plain = method2_setup(hyb, problem, None, tol=1e-6)
    its_pre, its_plain = [], []
    for j in range(3):
        eps = standard_normal(0, j, problem.n)
        its_pre.append(method2_sample(pre, eps).iterations)
        its_plain.append(method2_sample(plain, eps).iterations)
    assert np.mean(its_plain) >= 1.5 * np.mean(its_pre)

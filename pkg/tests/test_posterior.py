import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gkuq.gengk import ProblemInstance, gen_gk
from gkuq.operators import aslinearoperator, diagonal, identity
from gkuq.oracle import dense_gaussian_kl
from gkuq.posterior import (
    UQ_TRACE_COLUMNS,
    LowRankPosterior,
    RecurrenceWarning,
    d_optimal_hat,
    exact_initializers,
    hellinger_tv_bounds,
    hutchinson_estimates,
    kl_error_bound,
    kl_hat,
    kl_posterior_accuracy_bound,
    misfit_prior_operator,
    omega_sequence,
    posterior_cov_error_bound,
    ritz_residuals,
    theta_sequence,
    uq_trace,
)


def dense_truth(bundle, fact, k):
    d = bundle.dense
    V, T = fact.V[:, :k], fact.T[:k, :k]
    return d.omega(V, T), d.theta(V, T)


def post_kl(dense, V, T):
    G_hat = dense.Gamma_hat(V, T)
    s_hat = dense.mu + G_hat @ (dense.A.T @ (dense.rinv * dense.b))
    return dense_gaussian_kl(s_hat, G_hat, dense.s_post, dense.Gamma_post)


# ---------------------------------------------------------------- recurrences


@pytest.mark.parametrize("n", [1, 4])
def test_rank_one_capture(n):
    # with n = 1 this is the identity problem; for n = 4 A is the rank-one projector onto e_1
    A = np.zeros((n, n))
    A[0, 0] = 1.0
    p = ProblemInstance(aslinearoperator(A), identity(n), np.eye(n)[0], np.ones(n), lam=1.0)
    f = gen_gk(p, 3)
    assert f.k == 1 and f.terminated
    w0, t0 = exact_initializers(p)
    assert (w0, t0) == (1.0, 1.0)
    om, _ = omega_sequence(f.alphas, f.betas, w0, k=1)
    th, _ = theta_sequence(f.alphas, f.betas, t0, k=1)
    assert om[1] == 0.0 and th[1] == 0.0


def test_exact_initializers_match_dense(synthetic):
    d = synthetic.dense
    w0, t0 = exact_initializers(synthetic.problem)
    assert w0 == pytest.approx(np.linalg.norm(d.H_Q) ** 2, rel=1e-12)
    assert t0 == pytest.approx(np.trace(d.H_Q), rel=1e-12)


def test_synthetic_recurrences_every_k(synthetic):
    f = synthetic.fact
    n = synthetic.problem.n
    w0, t0 = exact_initializers(synthetic.problem)
    back, _ = omega_sequence(f.alphas, f.betas, w0, terminal_sq=0.0)
    fwd, _ = omega_sequence(f.alphas, f.betas, w0)
    th, _ = theta_sequence(f.alphas, f.betas, t0)
    assert back[0] == pytest.approx(math.sqrt(w0), rel=1e-10)
    for k in range(1, n):
        om_true, th_true = dense_truth(synthetic, f, k)
        assert back[k] == pytest.approx(om_true, rel=1e-10), k
        assert abs(fwd[k] ** 2 - om_true**2) <= 1e-12 * w0
        assert th[k] == pytest.approx(th_true, rel=1e-10, abs=1e-12 * t0), k


def test_heat_recurrences(heat, heat_full):
    """Backward-anchored omega matches to 1e-6; the forward form is limited to absolute accuracy."""
    f = heat_full
    assert f.terminated
    w0, t0 = exact_initializers(heat.problem)
    back, _ = omega_sequence(f.alphas, f.betas, w0, terminal_sq=0.0)
    fwd, _ = omega_sequence(f.alphas, f.betas, w0, k=30)
    th, _ = theta_sequence(f.alphas, f.betas, t0, k=30)
    for k in range(1, 31):
        om_true, th_true = dense_truth(heat, f, k)
        assert back[k] == pytest.approx(om_true, rel=1e-6)
        assert th[k] == pytest.approx(th_true, rel=1e-6)
        assert abs(fwd[k] ** 2 - om_true**2) <= 1e-11 * w0
    assert np.all(np.diff(back[:31]) <= 0) and np.all(np.diff(th) <= 0)


def test_recurrence_clamps_with_warning():
    with pytest.warns(RecurrenceWarning):
        om, clamped = omega_sequence([1.0, 1.0], [1.0, 1.0, 0.0], 0.5)
    assert clamped and om[-1] == 0.0
    with pytest.raises(ValueError):
        omega_sequence([1.0], [1.0, 0.0], -1.0)
    with pytest.raises(ValueError):
        theta_sequence([1.0], [1.0, 0.0], 1.0, k=3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 5.0))
def test_recurrences_nonincreasing_and_nonnegative(seed, lam):
    from conftest import synthetic_problem

    p = synthetic_problem(n=12, m=9, seed=seed, lam=lam)
    f = gen_gk(p, 13)
    w0, t0 = exact_initializers(p)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RecurrenceWarning)
        om, _ = omega_sequence(f.alphas, f.betas, w0)
        th, _ = theta_sequence(f.alphas, f.betas, t0)
    assert np.all(np.diff(om) <= 1e-8 * om[0]) and np.all(om >= 0)
    assert np.all(np.diff(th) <= 1e-8 * th[0]) and np.all(th >= 0)
    # theta vanishes once the Krylov space is exhausted (rank of the misfit is at most m)
    if f.terminated:
        assert th[-1] <= 1e-8 * t0


# ---------------------------------------------------------------- bounds


def test_cov_bound_examples():
    b = posterior_cov_error_bound(0.0, 2.0, 3.0, 5.0)
    assert b.bound == 0.0
    b = posterior_cov_error_bound(1e-6, 2.0, 3.0, 5.0)
    assert b.branch == "a"
    b = posterior_cov_error_bound(1e6, 2.0, 3.0, 5.0)
    assert b.branch == "b"
    with pytest.raises(ValueError):
        posterior_cov_error_bound(1.0, 0.0, 1.0, 1.0)


def test_heat_cov_bound_every_k(heat, heat_full):
    d, lam = heat.dense, heat.lam
    w0, _ = exact_initializers(heat.problem)
    om, _ = omega_sequence(heat_full.alphas, heat_full.betas, w0, terminal_sq=0.0)
    Q = d.Q
    nq2, nqf = np.linalg.norm(Q, 2), np.linalg.norm(Q)
    branches = []
    for k in range(1, 51):
        V, T = heat_full.V[:, :k], heat_full.T[:k, :k]
        err = np.linalg.norm(d.Gamma_post - d.Gamma_hat(V, T))
        cb = posterior_cov_error_bound(om[k], lam, nq2, nqf)
        assert err <= cb.bound * (1 + 1e-10) + 1e-14, k
        branches.append(cb.branch)
    # the first branch wins once omega has decayed
    assert branches[-1] == "a"


def test_kl_hat_examples():
    assert kl_hat(np.zeros((3, 3)), 1.5, 0.0, 0.0) == 0.0
    t, lam, a1, b1 = 2.3, 0.7, 1.1, 0.9
    l2 = lam**2
    want = 0.5 * (-t / (t + l2) + l2 * (a1 * b1 / (t + l2)) ** 2 + math.log(1 + t / l2))
    assert kl_hat(np.array([[t]]), lam, a1, b1) == pytest.approx(want, rel=1e-14)
    assert kl_hat((np.array([t]), np.zeros(0)), lam, a1, b1, simplified=True) == pytest.approx(
        0.5 * (-t / (t + l2) + math.log(1 + t / l2)), rel=1e-14)
    with pytest.raises(ValueError):
        kl_hat(np.eye(2), 0.0, 1.0, 1.0)


def test_kl_hat_full_rank_matches_dense(synthetic):
    f, d, lam = synthetic.fact, synthetic.dense, synthetic.lam
    a1, b1 = f.alphas[0], f.betas[0]
    assert abs(kl_hat(f.T_bands, lam, a1, b1) - d.kl_post_prior()) <= 1e-8
    assert abs(kl_hat(f.T_bands, lam, a1, b1, simplified=True) - d.kl_post_prior_simplified()) <= 1e-8
    phi, _ = d_optimal_hat(f.T_bands, lam)
    assert phi == pytest.approx(d.d_optimal(), abs=1e-10)
    np.testing.assert_allclose(phi, np.linalg.slogdet(np.eye(20) + d.H_Q / lam**2)[1], atol=1e-10)


def test_kl_bounds_zero_cases():
    assert kl_error_bound(0.0, 0.0, 1.0, 2.0, 3.0) == 0.0
    assert kl_posterior_accuracy_bound(0.0, 0.0, 1.0, 2.0, 3.0) == 0.0
    assert d_optimal_hat(np.zeros((2, 2)), 1.0)[0] == 0.0
    t, lam = 3.0, 0.5
    assert d_optimal_hat(np.array([[t]]), lam)[0] == pytest.approx(math.log(1 + t / lam**2))


def test_synthetic_kl_bounds_every_k(synthetic):
    f, d, lam = synthetic.fact, synthetic.dense, synthetic.lam
    w0, t0 = exact_initializers(synthetic.problem)
    om, _ = omega_sequence(f.alphas, f.betas, w0, terminal_sq=0.0)
    th, _ = theta_sequence(f.alphas, f.betas, t0)
    a1, b1 = f.alphas[0], f.betas[0]
    full = d.kl_post_prior()
    simp = d.kl_post_prior_simplified()
    diag, off = f.T_bands
    for k in range(1, f.k + 1):
        bands = (diag[:k], off[: k - 1])
        e_full = abs(full - kl_hat(bands, lam, a1, b1))
        e_simp = abs(simp - kl_hat(bands, lam, a1, b1, simplified=True))
        assert e_full <= kl_error_bound(th[k], om[k], lam, a1, b1) + 1e-10
        assert e_simp <= kl_error_bound(th[k], om[k], lam, a1, b1, simplified=True) + 1e-10
        kp = post_kl(d, f.V[:, :k], f.T[:k, :k])
        assert -1e-10 <= kp <= kl_posterior_accuracy_bound(th[k], om[k], lam, a1, b1) + 1e-10
        phi, phib = d_optimal_hat(bands, lam, th[k])
        assert abs(d.d_optimal() - phi) <= phib + 1e-10
    kp_full = post_kl(d, f.V, f.T)
    assert abs(kp_full) <= 1e-8


def test_heat_kl_bounds(heat, heat_full):
    f, d, lam = heat_full, heat.dense, heat.lam
    w0, t0 = exact_initializers(heat.problem)
    om, _ = omega_sequence(f.alphas, f.betas, w0, terminal_sq=0.0)
    th, _ = theta_sequence(f.alphas, f.betas, t0)
    a1, b1 = f.alphas[0], f.betas[0]
    simp = d.kl_post_prior_simplified()
    diag, off = f.T_bands
    for k in range(1, 51):
        e = abs(simp - kl_hat((diag[:k], off[: k - 1]), lam, a1, b1, simplified=True))
        assert e <= th[k] / lam**2 + 1e-10
    for k in (10, 20, 30):
        kp = post_kl(d, f.V[:, :k], f.T[:k, :k])
        assert -1e-10 <= kp <= kl_posterior_accuracy_bound(th[k], om[k], lam, a1, b1)


def test_information_measures_nondecreasing(heat, synthetic):
    for f, lam in ((heat.fact, heat.lam), (synthetic.fact, synthetic.lam)):
        diag, off = f.T_bands
        a1, b1 = f.alphas[0], f.betas[0]
        kl = [kl_hat((diag[:k], off[: k - 1]), lam, a1, b1, simplified=True) for k in range(1, f.k + 1)]
        phi = [d_optimal_hat((diag[:k], off[: k - 1]), lam)[0] for k in range(1, f.k + 1)]
        assert np.all(np.diff(phi) >= -1e-10)
        assert np.all(np.diff(kl) >= -1e-10)


def test_hellinger_tv():
    assert hellinger_tv_bounds(0.0) == (0.0, 0.0)
    assert hellinger_tv_bounds(0.5) == (1.0, 1.0)
    assert hellinger_tv_bounds(2.0) == (2.0, 2.0)
    with pytest.raises(ValueError):
        hellinger_tv_bounds(-1.0)


# ---------------------------------------------------------------- estimators


def test_hutchinson_identity_and_diagonal():
    h = hutchinson_estimates(identity(50), probes=200, seed=1)
    assert abs(h.trace - 50) <= 3 * h.trace_se + 1e-12
    dvec = np.random.default_rng(0).random(40) + 0.5
    h = hutchinson_estimates(diagonal(dvec), probes=200, seed=2)
    assert abs(h.frobsq - np.sum(dvec**2)) <= 3 * h.frobsq_se + 1e-12
    with pytest.raises(ValueError):
        hutchinson_estimates(identity(3), probes=0)


def test_hutchinson_on_misfit_operator(synthetic):
    d = synthetic.dense
    h = hutchinson_estimates(misfit_prior_operator(synthetic.problem), probes=400, seed=3)
    assert abs(h.trace - np.trace(d.H_Q)) <= 4 * h.trace_se
    assert abs(h.frobsq - np.linalg.norm(d.H_Q) ** 2) <= 4 * h.frobsq_se


# ---------------------------------------------------------------- posterior object


@pytest.mark.parametrize("k", [1, 7, 30])
def test_lowrank_posterior_matches_dense(heat, k):
    f = gen_gk(heat.problem, k)
    lr = LowRankPosterior(heat.problem, f, heat.lam)
    G_hat = heat.dense.Gamma_hat(f.V, f.T)
    rng = np.random.default_rng(k)
    for _ in range(3):
        w = rng.standard_normal(heat.problem.n)
        np.testing.assert_allclose(lr.apply_cov(w), G_hat @ w, rtol=1e-8, atol=1e-8 * np.linalg.norm(G_hat @ w))
    # the Appendix-style mean equals the projected Tikhonov solution
    s_hat = G_hat @ (heat.dense.A.T @ (heat.dense.rinv * heat.dense.b))
    np.testing.assert_allclose(lr.mean, s_hat, rtol=1e-8, atol=1e-8 * np.linalg.norm(s_hat))
    assert lr.cov_op.shape == (256, 256)
    assert lr.kl_hat() >= lr.kl_hat(simplified=True) >= 0
    assert lr.d_optimal() > 0


def test_ritz_residuals_are_finite(heat):
    r = ritz_residuals(heat.fact)
    assert r.shape == (heat.fact.k,) and np.all(np.isfinite(r)) and np.all(r >= 0)


def test_uq_trace_columns(heat, heat_full):
    w0, t0 = exact_initializers(heat.problem)
    rows = uq_trace(heat_full, heat.lam, w0, t0, 1.0, 2.0, k_max=10, omega_terminal_sq=0.0, simplified_kl=True)
    assert len(rows) == 10
    assert list(rows[0])[: len(UQ_TRACE_COLUMNS)] == UQ_TRACE_COLUMNS
    assert all(r["dkl_hat"] == r["dkl_hat_simplified"] for r in rows)
    with pytest.raises(ValueError):
        uq_trace(heat_full, 0.0, w0, t0, 1.0, 2.0)

"""Low-rank posterior built from gen-GK iterates, with error recurrences and bounds.

With ``T_k = B_kᵀB_k`` the data-misfit Hessian is approximated by
``Ĥ = V_k T_k V_kᵀ`` and

    Γ̂_post = (λ² Q⁻¹ + Ĥ)⁻¹ = λ⁻² (Q - Q V_k T_k (T_k + λ² I)⁻¹ V_kᵀ Q),

which needs only products with ``Q``.  Everything else here works on the
``k x k`` tridiagonal ``T_k`` and the bidiagonal coefficients.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .gengk import GenGKFactorization, ProblemInstance
from .operators import LinearOperator

__all__ = [
    "RecurrenceWarning",
    "LowRankPosterior",
    "omega_sequence",
    "theta_sequence",
    "posterior_cov_error_bound",
    "CovBound",
    "kl_hat",
    "kl_error_bound",
    "kl_posterior_accuracy_bound",
    "d_optimal_hat",
    "hellinger_tv_bounds",
    "hutchinson_estimates",
    "HutchinsonResult",
    "misfit_prior_operator",
    "ritz_pairs",
    "ritz_residuals",
    "uq_trace",
    "UQ_TRACE_COLUMNS",
    "exact_initializers",
]

UQ_TRACE_COLUMNS = [
    "k",
    "omega",
    "theta",
    "bound_thm32_a",
    "bound_thm32_b",
    "dkl_hat",
    "dkl_bound_thm35",
    "dkl_post_bound_thm34",
    "phi_d",
    "phi_d_bound",
]


class RecurrenceWarning(RuntimeWarning):
    """Rounding pushed ω_k² or θ_k below zero; the value was clamped."""


def _tri_eig(T_or_bands):
    """Eigen-decomposition of a symmetric tridiagonal given densely or as ``(diag, off)``."""
    if isinstance(T_or_bands, tuple):
        diag, off = (np.asarray(a, dtype=float) for a in T_or_bands)
    else:
        T = np.atleast_2d(np.asarray(T_or_bands, dtype=float))
        diag, off = np.diag(T).copy(), np.diag(T, 1).copy()
    if diag.size == 0:
        return np.zeros(0), np.zeros((0, 0))
    if diag.size == 1:
        return diag.copy(), np.ones((1, 1))
    return sla.eigh_tridiagonal(diag, off)


def _check_lambda(lam):
    if lam is None or not lam > 0:
        raise ValueError("the bound is undefined for lambda = 0")


# ---------------------------------------------------------------- recurrences


def _increments(alphas, betas, kmax):
    """``‖T_k‖_F² - ‖T_{k-1}‖_F²`` for ``k = 1..kmax``."""
    a = np.asarray(alphas, dtype=float)
    b = np.asarray(betas, dtype=float)
    inc = np.empty(kmax)
    for j in range(kmax):  # j is 0-based: step k = j + 1
        d = a[j] ** 2 + b[j + 1] ** 2
        inc[j] = d * d + (2.0 * (a[j] * b[j]) ** 2 if j > 0 else 0.0)
    return inc


def _available_steps(alphas, betas, k):
    kmax = min(len(alphas), len(betas) - 1)
    if k is not None:
        if k > kmax:
            raise ValueError(f"coefficients support at most k={kmax}")
        kmax = k
    return kmax


def omega_sequence(alphas, betas, omega0_sq: float, *, k: int | None = None,
                   terminal_sq: float | None = None):
    """Norms ``ω_k = ‖H_Q - Ĥ_Q‖_F`` for ``k = 0..K`` from the bidiagonal coefficients.

    Each step removes ``2(α_kβ_k)² + (α_k² + β_{k+1}²)²`` from ``ω²``; the
    off-diagonal term is absent at the first step.

    If ``terminal_sq`` (the value of ``ω_K²``, e.g. ``0`` after an exhaustive
    run) is given, the same increments are accumulated backward from it
    instead.  This avoids cancellation against ``ω_0²`` when ``ω_k ≪ ω_0``.

    Returns
    -------
    values : ndarray, shape (K+1,)
    clamped : bool
        True if some ``ω_k²`` came out negative and was set to zero.
    """
    if omega0_sq < 0:
        raise ValueError("omega0_sq must be nonnegative")
    K = _available_steps(alphas, betas, k)
    inc = _increments(alphas, betas, K)
    if terminal_sq is None:
        sq = omega0_sq - np.concatenate([[0.0], np.cumsum(inc)])
    else:
        if terminal_sq < 0:
            raise ValueError("terminal_sq must be nonnegative")
        tail = np.cumsum(inc[::-1])[::-1]
        sq = terminal_sq + np.concatenate([tail, [0.0]])
    clamped = bool(np.any(sq < 0))
    if clamped:
        warnings.warn("omega recurrence dropped below zero; clamped", RecurrenceWarning, stacklevel=2)
    return np.sqrt(np.clip(sq, 0.0, None)), clamped


def theta_sequence(alphas, betas, theta0: float, *, k: int | None = None):
    """``θ_k = trace(H_Q - Ĥ_Q)`` for ``k = 0..K``; each step removes ``α_k² + β_{k+1}²``."""
    if theta0 < 0:
        raise ValueError("theta0 must be nonnegative")
    K = _available_steps(alphas, betas, k)
    a = np.asarray(alphas[:K], dtype=float)
    b = np.asarray(betas[1 : K + 1], dtype=float)
    th = theta0 - np.concatenate([[0.0], np.cumsum(a**2 + b**2)])
    clamped = bool(np.any(th < 0))
    if clamped:
        warnings.warn("theta recurrence dropped below zero; clamped", RecurrenceWarning, stacklevel=2)
    return np.clip(th, 0.0, None), clamped


# ---------------------------------------------------------------- bounds


@dataclass(frozen=True)
class CovBound:
    a: float
    b: float

    @property
    def bound(self) -> float:
        return min(self.a, self.b)

    @property
    def branch(self) -> str:
        return "a" if self.a <= self.b else "b"


def posterior_cov_error_bound(omega_k, lam, normQ2, normQF) -> CovBound:
    """Frobenius bound on ``Γ_post - Γ̂_post``: the minimum of two branches.

    ``a = λ⁻⁴ ω_k ‖Q‖₂`` and ``b = λ⁻² ω_k ‖Q‖_F / (λ² + ω_k)``.
    """
    _check_lambda(lam)
    if min(omega_k, normQ2, normQF) < 0:
        raise ValueError("inputs must be nonnegative")
    l2 = lam * lam
    return CovBound(omega_k * normQ2 / l2**2, omega_k * normQF / (l2 * (l2 + omega_k)))


def kl_error_bound(theta_k, omega_k, lam, alpha1, beta1, *, simplified: bool = False) -> float:
    """Bound on ``|D_KL - D̂_KL|`` (posterior against prior)."""
    _check_lambda(lam)
    l2 = lam * lam
    if simplified:
        return theta_k / l2
    return (theta_k + l2 * omega_k / (l2 + omega_k) * (alpha1 * beta1) ** 2) / l2


def kl_posterior_accuracy_bound(theta_k, omega_k, lam, alpha1, beta1) -> float:
    """Bound on ``D_KL(ρ̂_post ‖ ρ_post)``."""
    _check_lambda(lam)
    l2 = lam * lam
    return 0.5 * (theta_k + omega_k**2 / (l2 + omega_k) * (alpha1 * beta1) ** 2) / l2


def kl_hat(T, lam, alpha1, beta1, *, simplified: bool = False) -> float:
    """Approximate ``D_KL(ρ_post ‖ ρ_prior)`` from ``T_k``.

    ``½[-tr(T(T+λ²)⁻¹) + λ²‖z‖² + logdet(I + λ⁻²T)]`` with
    ``z = α₁β₁(T + λ²I)⁻¹e₁``; the simplified form omits the mean term.
    ``T`` may be dense or a ``(diag, off)`` pair.
    """
    _check_lambda(lam)
    w, Y = _tri_eig(T)
    if w.size == 0:
        return 0.0
    w = np.clip(w, 0.0, None)
    l2 = lam * lam
    val = -np.sum(w / (w + l2)) + np.sum(np.log1p(w / l2))
    if not simplified:
        z = Y @ ((alpha1 * beta1) * Y[0, :] / (w + l2))
        val += l2 * float(z @ z)
    return 0.5 * float(val)


def d_optimal_hat(T, lam, theta_k: float | None = None):
    """``φ̂_D = logdet(I + λ⁻²T_k)`` and, given ``θ_k``, the error bound ``λ⁻²θ_k``."""
    _check_lambda(lam)
    w, _ = _tri_eig(T)
    phi = float(np.sum(np.log1p(np.clip(w, 0.0, None) / lam**2)))
    return phi, (None if theta_k is None else theta_k / lam**2)


def hellinger_tv_bounds(dkl: float) -> tuple[float, float]:
    """Pinsker-type bounds ``(d_H², d_TV) <= sqrt(2 D_KL)``."""
    if dkl < 0:
        raise ValueError("KL divergence must be nonnegative")
    b = math.sqrt(2.0 * dkl)
    return b, b


# ---------------------------------------------------------------- estimators


@dataclass(frozen=True)
class HutchinsonResult:
    trace: float
    trace_se: float
    frobsq: float
    frobsq_se: float
    probes: int


def misfit_prior_operator(problem: ProblemInstance) -> LinearOperator:
    """``x -> AᵀR⁻¹A Q x``; similar to ``H_Q`` so it shares its trace and ``trace(·²)``."""
    A, Q, rinv = problem.A, problem.Q, problem.rinv_diag
    return LinearOperator(
        (problem.n, problem.n),
        lambda x: A.apply_transpose(rinv * A.apply(Q.apply(x))),
        lambda y: Q.apply(A.apply_transpose(rinv * A.apply(y))),
        name="HQ",
    )


def hutchinson_estimates(M: LinearOperator, probes: int = 100, seed: int = 0) -> HutchinsonResult:
    """Rademacher estimates of ``trace(M)`` and ``trace(M²)``.

    For ``M = HQ`` (see :func:`misfit_prior_operator`) these are unbiased for
    ``trace(H_Q)`` and ``‖H_Q‖_F²``.  Standard errors are sample standard
    deviations over probes divided by ``sqrt(probes)`` (zero for one probe).
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x48]))
    n = M.cols
    tr = np.empty(probes)
    fr = np.empty(probes)
    for i in range(probes):
        z = rng.choice(np.array([-1.0, 1.0]), size=n)
        Mz = M.apply(z)
        tr[i] = z @ Mz
        fr[i] = z @ M.apply(Mz)
    se = lambda v: float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return HutchinsonResult(float(tr.mean()), se(tr), float(fr.mean()), se(fr), probes)


# ---------------------------------------------------------------- Ritz information


def ritz_pairs(T):
    """Ritz values (ascending, clipped at 0) and vectors of ``T_k``."""
    w, Y = _tri_eig(T)
    return np.clip(w, 0.0, None), Y


def ritz_residuals(fact: GenGKFactorization) -> np.ndarray:
    """``α_{k+1} β_{k+1} |e_kᵀ y_j|`` for each Ritz vector ``y_j``."""
    k = fact.k
    if k == 0:
        return np.zeros(0)
    _, Y = ritz_pairs(fact.T_bands)
    a_next = fact.alphas[k] if len(fact.alphas) > k else 0.0
    return abs(a_next * fact.betas[k]) * np.abs(Y[-1, :])


# ---------------------------------------------------------------- posterior object


class LowRankPosterior:
    """``N(s_k, Γ̂_post)`` represented through ``Q V_k`` and ``T_k``.

    Parameters
    ----------
    problem : ProblemInstance
    fact : GenGKFactorization
    lam : float
        Regularization parameter ``λ`` (prior covariance ``λ⁻²Q``).
    """

    def __init__(self, problem: ProblemInstance, fact: GenGKFactorization, lam: float):
        _check_lambda(lam)
        self.problem = problem
        self.fact = fact
        self.lam = float(lam)
        self.k = fact.k
        self._QV = fact.QV
        self._V = fact.V

    @property
    def V(self):
        return self._V

    @property
    def QV(self):
        return self._QV

    @cached_property
    def T(self) -> np.ndarray:
        return self.fact.T

    @cached_property
    def ritz(self):
        return ritz_pairs(self.fact.T_bands)

    @cached_property
    def _filter(self):
        """Eigenbasis of ``T_k`` and the filter ``θ/(θ+λ²)``."""
        w, Y = self.ritz
        return Y, w / (w + self.lam**2)

    @cached_property
    def z(self) -> np.ndarray:
        """``(T_k + λ²I)⁻¹ α₁β₁ e₁``, the projected Tikhonov solution."""
        w, Y = self.ritz
        if self.k == 0:
            return np.zeros(0)
        a1b1 = self.fact.alphas[0] * self.fact.betas[0]
        return Y @ (a1b1 * Y[0, :] / (w + self.lam**2))

    @cached_property
    def mean(self) -> np.ndarray:
        """``s_k = μ + Q V_k z_k``."""
        if self.k == 0:
            return self.problem.mu.copy()
        return self.problem.mu + self._QV @ self.z

    def apply_cov(self, w: np.ndarray) -> np.ndarray:
        """``Γ̂_post w`` using one product with ``Q``."""
        Qw = self.problem.Q.apply(w)
        if self.k:
            Y, filt = self._filter
            Qw = Qw - self._QV @ (Y @ (filt * (Y.T @ (self._QV.T @ w))))
        return Qw / self.lam**2

    @property
    def cov_op(self) -> LinearOperator:
        n = self.problem.n
        return LinearOperator((n, n), self.apply_cov, symmetric=True, spd_hint=True, name="Gamma_hat")

    def kl_hat(self, simplified: bool = False) -> float:
        return kl_hat(self.fact.T_bands, self.lam, self.fact.alphas[0], self.fact.betas[0], simplified=simplified)

    def d_optimal(self) -> float:
        return d_optimal_hat(self.fact.T_bands, self.lam)[0]


# ---------------------------------------------------------------- diagnostics trace


def uq_trace(fact: GenGKFactorization, lam: float, omega0_sq: float, theta0: float,
             normQ2: float, normQF: float, *, k_max: int | None = None,
             omega_terminal_sq: float | None = None, simplified_kl: bool = False) -> list[dict]:
    """Per-iteration UQ diagnostics for ``k = 1..K``.

    ``dkl_hat`` and ``dkl_bound_thm35`` use the simplified KL form when
    ``simplified_kl`` is set; both forms are always reported in the extra
    columns ``dkl_hat_full``/``dkl_hat_simplified``.
    """
    _check_lambda(lam)
    K = fact.k if k_max is None else min(k_max, fact.k)
    om, _ = omega_sequence(fact.alphas, fact.betas, omega0_sq, k=K if omega_terminal_sq is None else fact.k,
                           terminal_sq=omega_terminal_sq)
    th, _ = theta_sequence(fact.alphas, fact.betas, theta0, k=K)
    a1, b1 = fact.alphas[0], fact.betas[0]
    diag, off = fact.T_bands
    rows = []
    for k in range(1, K + 1):
        bands = (diag[:k], off[: k - 1])
        cb = posterior_cov_error_bound(om[k], lam, normQ2, normQF)
        full = kl_hat(bands, lam, a1, b1)
        simp = kl_hat(bands, lam, a1, b1, simplified=True)
        phi, phib = d_optimal_hat(bands, lam, th[k])
        rows.append({
            "k": k,
            "omega": om[k],
            "theta": th[k],
            "bound_thm32_a": cb.a,
            "bound_thm32_b": cb.b,
            "dkl_hat": simp if simplified_kl else full,
            "dkl_bound_thm35": kl_error_bound(th[k], om[k], lam, a1, b1, simplified=simplified_kl),
            "dkl_post_bound_thm34": kl_posterior_accuracy_bound(th[k], om[k], lam, a1, b1),
            "phi_d": phi,
            "phi_d_bound": phib,
            "dkl_hat_full": full,
            "dkl_hat_simplified": simp,
        })
    return rows


def exact_initializers(problem: ProblemInstance, limit: int = 4096) -> tuple[float, float]:
    """``(‖H_Q‖_F², trace(H_Q))`` from the dense product ``M = AᵀR⁻¹A Q``.

    Uses ``trace(M)`` and ``Σ M ∘ Mᵀ = trace(M²)``, so no square root of
    ``Q`` is formed.
    """
    from .operators import to_dense

    if problem.n > limit:
        raise ValueError(f"n={problem.n} exceeds the dense initializer limit {limit}")
    A = to_dense(problem.A, limit=max(limit, problem.m))
    Q = to_dense(problem.Q, limit=limit)
    M = A.T @ (problem.rinv_diag[:, None] * (A @ Q))
    return float(np.sum(M * M.T)), float(np.trace(M))

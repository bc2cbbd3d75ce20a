"""Posterior samplers built on preconditioned Lanczos.

Method 1 draws from the low-rank approximation ``N(s_k, Γ̂_post)`` through
the factor ``Ŝ = L⁻¹(I + L⁻ᵀĤL⁻¹)^{-1/2}`` where ``LᵀL = λ²Q⁻¹``.  Method 2
draws from (an approximation of) the exact posterior by applying
``Gᵀ(GFGᵀ)^{-1/2}`` with ``F = λ²Q + QHQ``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .gengk import HybridResult, ProblemInstance
from .lanczos import LanczosResult, lanczos_apply, preconditioned_operator, preconditioned_sample
from .operators import LinearOperator

log = logging.getLogger(__name__)

__all__ = [
    "lowrank_rep",
    "woodbury_half_inverse",
    "PriorFactor",
    "Method1Sampler",
    "method1_setup",
    "method1_sample",
    "Method2Sampler",
    "method2_setup",
    "method2_sample",
    "SampleDraw",
    "sample_error_bound",
    "monte_carlo_estimate",
    "standard_normal",
    "draw_samples",
    "SampleSet",
    "sample_diagnostics",
]


# ---------------------------------------------------------------- small dense pieces


def lowrank_rep(W: np.ndarray, rank_tol: float = 1e-12):
    """``W Wᵀ = Z Θ Zᵀ`` with orthonormal ``Z`` and ``Θ`` sorted in decreasing order.

    Uses a thin QR ``W = Q_w R`` and the eigendecomposition of ``R Rᵀ``.

    Returns
    -------
    Z : ndarray (n, k)
    theta : ndarray (k,)
    deficient : bool
        True if some ``θ_j <= rank_tol * θ_max``; such entries are kept (set to 0).
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    n, k = W.shape
    if k > n:
        raise ValueError("lowrank_rep needs k <= n")
    if k == 0:
        return np.zeros((n, 0)), np.zeros(0), False
    Qw, R = np.linalg.qr(W, mode="reduced")
    theta, Y = np.linalg.eigh(R @ R.T)
    order = np.argsort(theta)[::-1]
    theta, Y = theta[order], Y[:, order]
    top = max(float(theta[0]), 0.0)
    small = theta <= rank_tol * top
    theta = np.where(small, 0.0, theta)
    return Qw @ Y, theta, bool(small.any())


def woodbury_half_inverse(theta: np.ndarray) -> np.ndarray:
    """Diagonal ``D`` with ``(I + ZΘZᵀ)^{-1/2} = I - Z D Zᵀ`` for orthonormal ``Z``."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValueError("theta must be nonnegative")
    return 1.0 - 1.0 / np.sqrt(1.0 + theta)


def sample_error_bound(omega_k, lam, alpha1, beta1, eps_norm) -> float:
    """Bound on ``‖S ε - Ŝ ε‖`` in the ``λ²Q⁻¹`` norm for square-root factors of the two posteriors."""
    if lam is None or not lam > 0:
        raise ValueError("the bound is undefined for lambda = 0")
    l2 = lam * lam
    return (omega_k * alpha1 * beta1 / (l2 + omega_k) + math.sqrt(l2 * omega_k / (l2 + omega_k)) * eps_norm) / lam


def monte_carlo_estimate(qoi, samples):
    """Sample mean and per-component standard error of ``qoi`` over ``samples``.

    ``samples`` is a sequence of vectors or an ``(n, N)`` array of columns.
    """
    if isinstance(samples, np.ndarray) and samples.ndim == 2:
        samples = list(samples.T)
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    vals = np.array([np.atleast_1d(qoi(s)) for s in samples], dtype=float)
    N = vals.shape[0]
    return vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(N)


def standard_normal(seed: int, index: int, n: int, stream: int = 0) -> np.ndarray:
    """``ε_j ~ N(0, I)`` determined by ``(seed, stream, index)`` alone."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index])).standard_normal(n)


# ---------------------------------------------------------------- Method 1


@dataclass
class PriorFactor:
    """``L = λ (GQGᵀ)^{-1/2} G`` applied matrix-free (``LᵀL = λ²Q⁻¹``).

    Every application is a fresh preconditioned Lanczos run on ``GQGᵀ``.
    """

    Q: LinearOperator
    G: object
    lam: float
    tol: float = 1e-6
    max_k: int = 300

    def inverse(self, x) -> LanczosResult:
        """``L⁻¹x = λ⁻¹ G⁻¹ (GQGᵀ)^{1/2} x``."""
        res = preconditioned_sample(self.Q, self.G, x, "sqrt", tol=self.tol, max_k=self.max_k, warn=False)
        res.x = res.x / self.lam
        return res

    def inverse_transpose(self, y) -> LanczosResult:
        """``L⁻ᵀy = λ⁻¹ (GQGᵀ)^{1/2} G⁻ᵀ y``."""
        if self.G is None:
            res = lanczos_apply(self.Q, y, "sqrt", tol=self.tol, max_k=self.max_k, warn=False)
        else:
            res = lanczos_apply(preconditioned_operator(self.Q, self.G), self.G.apply_inverse_transpose(y),
                                "sqrt", tol=self.tol, max_k=self.max_k, warn=False)
        res.x = res.x / self.lam
        return res


@dataclass
class SampleDraw:
    x: np.ndarray
    iterations: int
    e_tilde: float
    converged: bool


@dataclass
class Method1Sampler:
    """Samples from ``N(s_k, Γ̂_post)``; see :func:`method1_setup`."""

    s_k: np.ndarray
    L: PriorFactor
    Z: np.ndarray
    theta: np.ndarray
    D: np.ndarray
    precompute_iters: list = field(default_factory=list)
    rank_deficient: bool = False

    @property
    def k(self) -> int:
        return self.Z.shape[1]

    def sample(self, eps) -> SampleDraw:
        return method1_sample(self, eps)


def method1_setup(hybrid: HybridResult, problem: ProblemInstance, G=None, *, tol: float = 1e-6,
                  max_k: int = 300) -> Method1Sampler:
    """Precompute ``Z_k``, ``Θ_k`` and ``D_k = I - (I + Θ_k)^{-1/2}``.

    ``Y_k = L⁻ᵀ(V_k Mᵀ)`` is formed column by column, with ``MᵀM = T_k``
    the Cholesky factorization of ``B_kᵀB_k``.
    """
    fact = hybrid.factorization
    lam = hybrid.lam
    if not lam > 0:
        raise ValueError("Method 1 needs lambda > 0")
    L = PriorFactor(problem.Q, G, lam, tol, max_k)
    n, k = problem.n, fact.k
    if k == 0:
        return Method1Sampler(hybrid.s_k, L, np.zeros((n, 0)), np.zeros(0), np.zeros(0))
    try:
        M = sla.cholesky(fact.T, lower=False)
    except sla.LinAlgError as exc:
        raise ValueError("B_k^T B_k is not positive definite; the factorization is degenerate") from exc
    VM = fact.V @ M.T
    Y = np.empty((n, k))
    iters = []
    for j in range(k):
        r = L.inverse_transpose(VM[:, j])
        Y[:, j] = r.x
        iters.append(r.k)
    Z, theta, deficient = lowrank_rep(Y)
    if deficient:
        log.warning("low-rank representation is rank deficient")
    return Method1Sampler(hybrid.s_k, L, Z, theta, woodbury_half_inverse(theta), iters, deficient)


def method1_sample(sampler: Method1Sampler, eps) -> SampleDraw:
    """``s_k + L⁻¹(ε - Z_k D_k Z_kᵀ ε)``."""
    eps = np.asarray(eps, dtype=float)
    if eps.shape != sampler.s_k.shape:
        raise ValueError("eps has the wrong length")
    x = eps
    if sampler.k:
        x = eps - sampler.Z @ (sampler.D * (sampler.Z.T @ eps))
    r = sampler.L.inverse(x)
    return SampleDraw(sampler.s_k + r.x, r.k, r.e_tilde, r.converged)


# ---------------------------------------------------------------- Method 2


def _f_operator(problem: ProblemInstance, lam: float, lowrank=None) -> LinearOperator:
    A, Q, rinv = problem.A, problem.Q, problem.rinv_diag
    l2 = lam * lam
    if lowrank is None:
        def f(x):
            y = Q.apply(x)
            return l2 * y + Q.apply(A.apply_transpose(rinv * A.apply(y)))
        name = "F"
    else:
        QV, T = lowrank

        def f(x):
            return l2 * Q.apply(x) + QV @ (T @ (QV.T @ x))
        name = "F_hat"
    return LinearOperator((problem.n, problem.n), f, f, symmetric=True, spd_hint=True, name=name)


@dataclass
class Method2Sampler:
    """Samples ``s_k + Q Gᵀ(GFGᵀ)^{-1/2} ε``.

    With ``lowrank=True`` the data-misfit Hessian inside ``F`` is replaced by
    its gen-GK approximation ``V_k T_k V_kᵀ``.
    """

    s_post_estimate: np.ndarray
    F: LinearOperator
    Q: LinearOperator
    G: object = None
    tol: float = 1e-6
    max_k: int = 500
    lowrank: bool = False

    def sample(self, eps) -> SampleDraw:
        return method2_sample(self, eps, self.tol, self.max_k)


def method2_setup(hybrid: HybridResult, problem: ProblemInstance, G=None, *, tol: float = 1e-6,
                  max_k: int = 500, lowrank: bool = False) -> Method2Sampler:
    lam = hybrid.lam
    if not lam > 0:
        raise ValueError("Method 2 needs lambda > 0")
    lr = (hybrid.factorization.QV, hybrid.factorization.T) if lowrank else None
    return Method2Sampler(hybrid.s_k, _f_operator(problem, lam, lr), problem.Q, G, tol, max_k, lowrank)


def method2_sample(sampler: Method2Sampler, eps, tol: float | None = None, max_k: int | None = None) -> SampleDraw:
    """``s_k + Q z`` with ``z = Gᵀ(GFGᵀ)^{-1/2}ε``; unconverged runs are flagged, not fatal."""
    eps = np.asarray(eps, dtype=float)
    if eps.shape != sampler.s_post_estimate.shape:
        raise ValueError("eps has the wrong length")
    tol = sampler.tol if tol is None else tol
    max_k = sampler.max_k if max_k is None else max_k
    r = preconditioned_sample(sampler.F, sampler.G, eps, "invsqrt", tol=tol, max_k=max_k, warn=False)
    if not r.converged:
        log.warning("Method 2 sample stopped at max_k=%d with e_tilde=%.3e", max_k, r.e_tilde)
    return SampleDraw(sampler.s_post_estimate + sampler.Q.apply(r.x), r.k, r.e_tilde, r.converged)


# ---------------------------------------------------------------- batches


@dataclass
class SampleSet:
    samples: np.ndarray  # (n, N)
    iterations: list
    e_tilde: list
    converged: list
    seed: int
    indices: list

    @property
    def warnings(self) -> int:
        return int(sum(not c for c in self.converged))


def draw_samples(sampler, N: int, seed: int, *, start: int = 0, stream: int = 0) -> SampleSet:
    """Draw samples ``start..start+N-1``; sample ``j`` uses ``standard_normal(seed, j)``.

    Because each ``ε_j`` depends only on ``(seed, stream, j)``, splitting the
    index range across workers reproduces the same set.
    """
    if N < 1:
        raise ValueError("N must be positive")
    n = sampler.s_k.size if isinstance(sampler, Method1Sampler) else sampler.s_post_estimate.size
    cols, its, et, conv = [], [], [], []
    idx = list(range(start, start + N))
    for j in idx:
        d = sampler.sample(standard_normal(seed, j, n, stream))
        cols.append(d.x)
        its.append(d.iterations)
        et.append(d.e_tilde)
        conv.append(d.converged)
    return SampleSet(np.column_stack(cols), its, et, conv, seed, idx)


def sample_diagnostics(sampler, eps) -> list[dict]:
    """Per-iteration Lanczos trace (``k, delta, gamma, e_tilde, residual_bound``) for one sample."""
    eps = np.asarray(eps, dtype=float)
    if isinstance(sampler, Method1Sampler):
        x = eps - sampler.Z @ (sampler.D * (sampler.Z.T @ eps)) if sampler.k else eps
        L = sampler.L
        op = L.Q if L.G is None else preconditioned_operator(L.Q, L.G)
        return lanczos_apply(op, x, "sqrt", tol=L.tol, max_k=L.max_k, record=True, warn=False).trace
    op = sampler.F if sampler.G is None else preconditioned_operator(sampler.F, sampler.G)
    return lanczos_apply(op, eps, "invsqrt", tol=sampler.tol, max_k=sampler.max_k, record=True, warn=False).trace

"""Generalized Golub-Kahan bidiagonalization and the hybrid MAP solver.

The bidiagonalization works in the ``R^{-1}`` inner product on data space and
the ``Q`` inner product on parameter space, so neither ``Q^{-1}`` nor
``Q^{1/2}`` is ever needed.  After ``k`` steps

    A Q V_k = U_{k+1} B_k,    U_{k+1}^T R^{-1} U_{k+1} = I,    V_k^T Q V_k = I,

and the projected Tikhonov problem ``min ½|B_k z - β₁e₁|² + ½λ²|z|²`` yields
the MAP estimate ``s_k = μ + Q V_k z_k``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar

from .operators import LinearOperator, aslinearoperator, diagonal

log = logging.getLogger(__name__)

__all__ = [
    "ProblemInstance",
    "GenGKFactorization",
    "HybridResult",
    "Breakdown",
    "gen_gk_init",
    "gen_gk_step",
    "gen_gk",
    "solve_projected",
    "map_estimate",
    "gcv_projected",
    "select_lambda_gcv",
    "hybrid_solve",
    "GENGK_TRACE_COLUMNS",
]

GENGK_TRACE_COLUMNS = ["k", "alpha", "beta", "lambda", "gcv", "proj_residual"]


class Breakdown(Exception):
    """An exact invariant subspace was reached; the factorization is complete."""


@dataclass(frozen=True)
class ProblemInstance:
    """Linear Gaussian inverse problem ``d = A s + δ``, ``δ ~ N(0, R)``, ``s ~ N(μ, λ^-2 Q)``.

    Only diagonal noise covariances are supported; ``rinv_diag`` holds the
    diagonal of ``R^{-1}``.
    """

    A: LinearOperator
    Q: LinearOperator
    d: np.ndarray
    rinv_diag: np.ndarray
    mu: np.ndarray | None = None
    lam: float | None = None

    def __post_init__(self):
        A = aslinearoperator(self.A)
        Q = aslinearoperator(self.Q, symmetric=True, spd_hint=True)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Q", Q)
        d = np.asarray(self.d, dtype=float)
        rinv = np.broadcast_to(np.asarray(self.rinv_diag, dtype=float), d.shape).copy()
        mu = np.zeros(A.cols) if self.mu is None else np.asarray(self.mu, dtype=float)
        if Q.shape != (A.cols, A.cols):
            raise ValueError(f"Q has shape {Q.shape}, expected {(A.cols, A.cols)}")
        if d.shape != (A.rows,) or mu.shape != (A.cols,):
            raise ValueError("data or prior mean has inconsistent length")
        if np.any(rinv <= 0):
            raise ValueError("noise precision must be positive")
        for arr in (d, rinv, mu):
            arr.setflags(write=False)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "rinv_diag", rinv)
        object.__setattr__(self, "mu", mu)

    @property
    def m(self) -> int:
        return self.A.rows

    @property
    def n(self) -> int:
        return self.A.cols

    @property
    def Rinv(self) -> LinearOperator:
        return diagonal(self.rinv_diag)

    @property
    def Rinvsqrt(self) -> LinearOperator:
        return diagonal(np.sqrt(self.rinv_diag))

    @property
    def b(self) -> np.ndarray:
        return self.d - self.A.apply(self.mu)

    def with_lambda(self, lam: float) -> "ProblemInstance":
        return ProblemInstance(self.A, self.Q, self.d, self.rinv_diag, self.mu, lam)


def _freeze(x: np.ndarray) -> np.ndarray:
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class GenGKFactorization:
    """State of the bidiagonalization after ``k`` steps.

    ``alphas`` holds α₁..α_{k+1} and ``betas`` β₁..β_{k+1}; α_{k+1} and the
    look-ahead vector v_{k+1} are the natural by-products of step ``k``.
    After a breakdown the missing coefficient is stored as zero.
    """

    k: int
    U_cols: tuple
    V_cols: tuple
    QV_cols: tuple
    alphas: tuple
    betas: tuple
    reorth: bool = True
    breakdown: str | None = None
    scale: float = 1.0

    @property
    def b_norm(self) -> float:
        return self.betas[0]

    @property
    def U(self) -> np.ndarray:
        """``U_{k+1}`` (``k`` columns after a β-breakdown)."""
        return np.column_stack(self.U_cols[: self.k + 1])

    @property
    def V(self) -> np.ndarray:
        """``V_k``."""
        if self.k == 0:
            return np.zeros((self.V_cols[0].size, 0))
        return np.column_stack(self.V_cols[: self.k])

    @property
    def QV(self) -> np.ndarray:
        if self.k == 0:
            return np.zeros((self.QV_cols[0].size, 0))
        return np.column_stack(self.QV_cols[: self.k])

    @property
    def B(self) -> np.ndarray:
        """Lower bidiagonal ``(k+1) x k`` matrix ``B_k``."""
        k = self.k
        B = np.zeros((k + 1, k))
        idx = np.arange(k)
        B[idx, idx] = self.alphas[:k]
        B[idx + 1, idx] = self.betas[1 : k + 1]
        return B

    @property
    def T(self) -> np.ndarray:
        """``T_k = B_k^T B_k`` (symmetric tridiagonal)."""
        diag, off = self.T_bands
        return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)

    @property
    def T_bands(self) -> tuple[np.ndarray, np.ndarray]:
        """Diagonal ``α_j² + β_{j+1}²`` and off-diagonal ``α_{j+1} β_{j+1}`` of ``T_k``."""
        k = self.k
        a = np.asarray(self.alphas[:k])
        b = np.asarray(self.betas[1 : k + 1])
        diag = a**2 + b**2
        off = a[1:] * b[:-1]
        return diag, off

    @property
    def terminated(self) -> bool:
        return self.breakdown is not None


def _reorth(x: np.ndarray, basis: tuple, weighted_basis: tuple) -> np.ndarray:
    """Two passes of classical Gram-Schmidt: ``x -= W (Wᵀ M x)`` with ``M W`` given."""
    if not basis:
        return x
    W = np.column_stack(basis)
    MW = np.column_stack(weighted_basis)
    for _ in range(2):
        x = x - W @ (MW.T @ x)
    return x


def gen_gk_init(problem: ProblemInstance, *, reorth: bool = True) -> GenGKFactorization:
    """Lines 1-2: ``β₁u₁ = b`` and ``α₁v₁ = AᵀR⁻¹u₁``."""
    A, Q, rinv = problem.A, problem.Q, problem.rinv_diag
    b = problem.b
    beta1 = math.sqrt(float(b @ (rinv * b)))
    if beta1 == 0.0:
        raise ValueError("b = d - A mu is zero; nothing to fit")
    u = _freeze(b / beta1)
    w = A.apply_transpose(rinv * u)
    Qw = Q.apply(w)
    alpha1 = math.sqrt(max(float(w @ Qw), 0.0))
    scale = max(beta1, alpha1)
    breakdown = None
    if alpha1 <= 1e-14 * max(1.0, float(np.linalg.norm(w))) or alpha1 == 0.0:
        breakdown = "alpha"
        v = np.zeros_like(w)
        Qv = np.zeros_like(w)
        alpha1 = 0.0
    else:
        v, Qv = w / alpha1, Qw / alpha1
    return GenGKFactorization(
        0, (u,), (_freeze(v),), (_freeze(Qv),), (alpha1,), (beta1,), reorth, breakdown, scale
    )


def gen_gk_step(problem: ProblemInstance, fact: GenGKFactorization, *, tol: float = 1e-14) -> GenGKFactorization:
    """Lines 4-5 of the bidiagonalization: advance ``k -> k+1``.

    Raises :class:`Breakdown` if the factorization has already terminated.
    A new breakdown is recorded on the returned factorization rather than
    raised.
    """
    if fact.terminated:
        raise Breakdown(f"factorization terminated by {fact.breakdown}-breakdown at k={fact.k}")
    A, Q, rinv = problem.A, problem.Q, problem.rinv_diag
    k = fact.k
    v, Qv = fact.V_cols[k], fact.QV_cols[k]
    alpha, u = fact.alphas[k], fact.U_cols[k]

    AQv = A.apply(Qv)
    p = AQv - alpha * u
    if fact.reorth:
        p = _reorth(p, fact.U_cols, tuple(rinv * uc for uc in fact.U_cols))
    beta = math.sqrt(max(float(p @ (rinv * p)), 0.0))
    ref = max(math.sqrt(float(AQv @ (rinv * AQv))), fact.scale * 1e-300)
    scale = max(fact.scale, beta)
    if beta <= tol * ref:
        return GenGKFactorization(
            k + 1, fact.U_cols, fact.V_cols, fact.QV_cols,
            fact.alphas + (0.0,), fact.betas + (0.0,), fact.reorth, "beta", scale,
        )
    u_new = _freeze(p / beta)
    w = A.apply_transpose(rinv * u_new)
    q = w - beta * v
    if fact.reorth:
        q = _reorth(q, fact.V_cols, fact.QV_cols)
    Qq = Q.apply(q)
    alpha_new = math.sqrt(max(float(q @ Qq), 0.0))
    wref = math.sqrt(max(float(w @ Q.apply(w)), 0.0)) if alpha_new < 1e-8 * scale else scale
    scale = max(scale, alpha_new)
    if alpha_new <= tol * max(wref, 1e-300):
        return GenGKFactorization(
            k + 1, fact.U_cols + (u_new,), fact.V_cols, fact.QV_cols,
            fact.alphas + (0.0,), fact.betas + (beta,), fact.reorth, "alpha", scale,
        )
    return GenGKFactorization(
        k + 1,
        fact.U_cols + (u_new,),
        fact.V_cols + (_freeze(q / alpha_new),),
        fact.QV_cols + (_freeze(Qq / alpha_new),),
        fact.alphas + (alpha_new,),
        fact.betas + (beta,),
        fact.reorth,
        None,
        scale,
    )


def gen_gk(problem: ProblemInstance, k: int, *, reorth: bool = True) -> GenGKFactorization:
    """Run up to ``k`` steps (fewer on breakdown)."""
    fact = gen_gk_init(problem, reorth=reorth)
    while fact.k < k and not fact.terminated:
        fact = gen_gk_step(problem, fact)
    return fact


def solve_projected(B: np.ndarray, beta1: float, lam: float) -> np.ndarray:
    """Minimizer of ``½|B z - β₁e₁|² + ½λ²|z|²`` via the stacked least-squares system.

    With ``λ = 0`` and rank-deficient ``B`` the minimum-norm solution is returned.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    B = np.atleast_2d(np.asarray(B, dtype=float))
    kp1, k = B.shape
    rhs = np.zeros(kp1)
    rhs[0] = beta1
    if k == 0:
        return np.zeros(0)
    if lam == 0:
        z, *_ = np.linalg.lstsq(B, rhs, rcond=None)
        return z
    M = np.vstack([B, lam * np.eye(k)])
    z, *_ = np.linalg.lstsq(M, np.concatenate([rhs, np.zeros(k)]), rcond=None)
    return z


def map_estimate(problem: ProblemInstance, fact: GenGKFactorization, z: np.ndarray) -> np.ndarray:
    """``s_k = μ + Q V_k z_k``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (fact.k,):
        raise ValueError(f"z has length {z.size}, expected {fact.k}")
    if fact.k == 0:
        return problem.mu.copy()
    return problem.mu + fact.QV @ z


def _gcv_parts(B: np.ndarray, beta1: float):
    U, sv, _ = np.linalg.svd(B, full_matrices=True)
    c = beta1 * U[0, :]
    return sv, c


def _projected_gcv_value(lam, sv, c, rows, weight):
    s2, l2 = sv**2, lam**2
    filt = s2 / (s2 + l2)
    k = sv.size
    resid = np.sum(((1.0 - filt) * c[:k]) ** 2) + np.sum(c[k:] ** 2)
    denom = (rows - weight * np.sum(filt)) ** 2
    return resid / denom


def gcv_projected(B: np.ndarray, beta1: float, lam, weight: float = 1.0):
    """Weighted GCV of the projected problem.

    ``G(λ) = |(I - B B_λ^†) β₁e₁|² / trace(I - w B B_λ^†)²`` with
    ``B_λ^† = (BᵀB + λ²I)^{-1} Bᵀ``.
    """
    sv, c = _gcv_parts(np.atleast_2d(B), beta1)
    rows = np.atleast_2d(B).shape[0]
    lam = np.asarray(lam, dtype=float)
    return np.vectorize(lambda l: _projected_gcv_value(l, sv, c, rows, weight))(lam)


@dataclass(frozen=True)
class GCVSelection:
    lam: float
    gcv: float
    flat: bool


def select_lambda_gcv(
    B: np.ndarray,
    beta1: float,
    weight: float = 1.0,
    *,
    previous: float | None = None,
    bounds: tuple[float, float] = (1e-6, 1e6),
    grid_points: int = 121,
) -> GCVSelection:
    """Minimize the projected GCV function over ``λ``.

    A log-spaced grid over ``bounds`` brackets the minimum which is then
    refined by golden-section search in ``log λ``.  If the GCV function is
    flat (relative variation below 1e-12) ``previous`` is returned with
    ``flat=True``.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if not 0 < weight <= 1:
        raise ValueError("GCV weight must lie in (0, 1]")
    rows = B.shape[0]
    sv, c = _gcv_parts(B, beta1)
    f = lambda t: _projected_gcv_value(math.exp(t), sv, c, rows, weight)
    ts = np.linspace(math.log(bounds[0]), math.log(bounds[1]), grid_points)
    vals = np.array([f(t) for t in ts])
    vmax, vmin = vals.max(), vals.min()
    if vmax - vmin <= 1e-12 * max(abs(vmax), 1e-300):
        lam = previous if previous is not None else float(math.exp(ts[-1]))
        return GCVSelection(lam, float(f(math.log(lam))), True)
    i = int(np.argmin(vals))
    lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, ts.size - 1)]
    if hi > lo:
        res = minimize_scalar(f, bracket=None, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        t_best = float(res.x) if res.fun <= vals[i] else float(ts[i])
    else:
        t_best = float(ts[i])
    return GCVSelection(float(math.exp(t_best)), float(f(t_best)), False)


def _full_gcv(B, beta1, lam, m, weight):
    """GCV of the full-size problem evaluated with projected quantities (stopping rule)."""
    sv, c = _gcv_parts(B, beta1)
    s2 = sv**2
    filt = s2 / (s2 + lam**2)
    k = sv.size
    resid = np.sum(((1.0 - filt) * c[:k]) ** 2) + np.sum(c[k:] ** 2)
    return float(m * resid / (m - weight * np.sum(filt)) ** 2)


@dataclass
class HybridResult:
    s_k: np.ndarray
    z_k: np.ndarray
    lam: float
    k: int
    factorization: GenGKFactorization
    stop_reason: str
    trace: list = field(default_factory=list)

    @property
    def lambda2(self) -> float:
        return self.lam**2


def hybrid_solve(
    problem: ProblemInstance,
    *,
    max_k: int = 100,
    tol: float = 1e-4,
    window: int = 3,
    reorth: bool = True,
    weight: float = 1.0,
    lam: float | None = None,
    min_k: int = 2,
    residual_tol: float = 0.0,
) -> HybridResult:
    """Hybrid gen-GK solver with per-iteration GCV selection of ``λ``.

    Stops when the full-problem GCV estimate changes by less than ``tol``
    times its first-iteration value for ``window`` consecutive iterations, when the projected
    residual falls below ``residual_tol * β₁``, at ``max_k``, or on
    breakdown.  A fixed ``lam`` disables GCV selection.
    """
    fact = gen_gk_init(problem, reorth=reorth)
    trace: list[dict] = []
    lam_k = lam
    calm = 0
    prev_gcv = None
    gcv_ref = None
    stop = "max-iter"
    while True:
        if fact.terminated and fact.k == 0:
            stop = "breakdown"
            break
        if fact.k >= max_k:
            stop = "max-iter"
            break
        fact = gen_gk_step(problem, fact)
        B = fact.B
        k = fact.k
        if lam is None:
            if k >= min_k:
                sel = select_lambda_gcv(B, fact.b_norm, weight, previous=lam_k)
                lam_k = sel.lam
            elif lam_k is None:
                lam_k = select_lambda_gcv(B, fact.b_norm, weight).lam
        z = solve_projected(B, fact.b_norm, lam_k)
        r = B @ z
        r[0] -= fact.b_norm
        proj_res = float(np.linalg.norm(r))
        g = _full_gcv(B, fact.b_norm, lam_k, problem.m, weight)
        trace.append(
            {"k": k, "alpha": fact.alphas[k - 1], "beta": fact.betas[k], "lambda": lam_k, "gcv": g,
             "proj_residual": proj_res}
        )
        if fact.terminated:
            stop = "breakdown"
            break
        if residual_tol > 0 and proj_res <= residual_tol * fact.b_norm:
            stop = "residual-tol"
            break
        if gcv_ref is None:
            gcv_ref = abs(g)
        if prev_gcv is not None and k > min_k:
            calm = calm + 1 if abs(g - prev_gcv) <= tol * gcv_ref else 0
            if calm >= window:
                stop = "gcv-flat"
                break
        prev_gcv = g
    k = fact.k
    if lam_k is None:
        lam_k = 0.0
    z = solve_projected(fact.B, fact.b_norm, lam_k)
    s = map_estimate(problem, fact, z)
    log.info("hybrid solve stopped at k=%d (%s), lambda^2=%.4g", k, stop, lam_k**2)
    return HybridResult(s, z, float(lam_k), k, fact, stop, trace)

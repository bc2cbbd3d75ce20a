"""Lanczos tridiagonalization for drawing ``N(0, Γ)`` and ``N(0, Γ⁻¹)`` samples.

Starting from ``w₁ = ε/‖ε‖`` the recurrence builds ``Γ W_k = W_k T_k +
δ_{k+1} w_{k+1} e_kᵀ``; ``W_k T_k^{±1/2} δ₁ e₁`` then approximates
``Γ^{±1/2} ε``.  Convergence is monitored through the change between
successive approximations, which only needs the small coefficient vectors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .operators import LinearOperator, aslinearoperator

__all__ = [
    "LanczosFactorization",
    "LanczosResult",
    "lanczos_run",
    "lanczos_coefficients",
    "lanczos_sample",
    "convergence_estimate",
    "residual_error_bound",
    "lanczos_apply",
    "preconditioned_operator",
    "preconditioned_sample",
    "LANCZOS_TRACE_COLUMNS",
    "MaxIterWarning",
]

LANCZOS_TRACE_COLUMNS = ["k", "delta", "gamma", "e_tilde", "residual_bound"]
MODES = ("sqrt", "invsqrt")


class MaxIterWarning(RuntimeWarning):
    """The iteration cap was reached before the tolerance."""


@dataclass(frozen=True)
class LanczosFactorization:
    """``W_k``, ``γ₁..γ_k`` and ``δ₁..δ_{k+1}`` (``δ₁ = ‖ε‖₂``).

    ``W_cols`` also holds the look-ahead vector ``w_{k+1}`` unless the run
    terminated on an invariant subspace, in which case ``δ_{k+1} = 0``.
    """

    W_cols: tuple
    gammas: tuple
    deltas: tuple
    terminated: bool = False
    fingerprint: str = ""

    @property
    def k(self) -> int:
        return len(self.gammas)

    @property
    def W(self) -> np.ndarray:
        return np.column_stack(self.W_cols[: self.k])

    @property
    def T(self) -> np.ndarray:
        k = self.k
        off = np.asarray(self.deltas[1:k])
        return np.diag(self.gammas) + np.diag(off, 1) + np.diag(off, -1)

    def T_at(self, j: int) -> np.ndarray:
        g = np.asarray(self.gammas[:j])
        off = np.asarray(self.deltas[1:j])
        return np.diag(g) + np.diag(off, 1) + np.diag(off, -1)


def _fingerprint(op) -> str:
    return f"{op.name or 'op'}:{op.rows}x{op.cols}"


def _tri_function(gammas, deltas_off, mode: str, scale: float):
    """``f(T) scale·e₁`` for the tridiagonal with the given bands."""
    k = len(gammas)
    if k == 1:
        w = np.array([gammas[0]])
        Y0 = np.ones(1)
        Y = np.ones((1, 1))
    else:
        T = np.diag(gammas) + np.diag(deltas_off, 1) + np.diag(deltas_off, -1)
        w, Y = np.linalg.eigh(T)
        Y0 = Y[0, :]
    if mode == "sqrt":
        fw = np.sqrt(np.clip(w, 0.0, None))
    else:
        wmin = float(w.min())
        if wmin <= 1e-14 * max(abs(float(w.max())), 1e-300):
            raise np.linalg.LinAlgError(f"T_k is numerically singular (smallest Ritz value {wmin:.3e})")
        fw = 1.0 / np.sqrt(w)
    return Y @ (fw * Y0 * scale)


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _step(apply, W, gammas, deltas, reorth, n_scale):
    """One Lanczos step in place; returns False on an invariant subspace."""
    w = W[-1]
    p = apply(w)
    if len(W) > 1:
        p = p - deltas[-1] * W[-2]
    g = float(w @ p)
    p = p - g * w
    if reorth:
        Wm = np.column_stack(W)
        for _ in range(2):
            p = p - Wm @ (Wm.T @ p)
    gammas.append(g)
    d = float(np.linalg.norm(p))
    n_scale[0] = max(n_scale[0], abs(g), d)
    if d <= 1e-14 * n_scale[0]:
        deltas.append(0.0)
        return False
    deltas.append(d)
    W.append(p / d)
    return True


def _start(eps):
    eps = np.asarray(eps, dtype=float)
    d1 = float(np.linalg.norm(eps))
    if d1 == 0.0 or not math.isfinite(d1):
        raise ValueError("starting vector must be nonzero and finite")
    return eps / d1, d1


def lanczos_run(Gamma: LinearOperator, eps, k: int, reorth: bool = True, *, check_symmetry: bool = True,
                seed: int = 0) -> LanczosFactorization:
    """Run ``k`` Lanczos steps (fewer on an invariant subspace)."""
    Gamma = aslinearoperator(Gamma)
    if Gamma.rows != Gamma.cols:
        raise ValueError("operator must be square")
    if check_symmetry:
        _symmetry_check(Gamma, seed)
    w1, d1 = _start(eps)
    W, gammas, deltas = [w1], [], [d1]
    scale = [0.0]
    alive = True
    while len(gammas) < k and alive:
        alive = _step(Gamma.apply, W, gammas, deltas, reorth, scale)
    return LanczosFactorization(tuple(W), tuple(gammas), tuple(deltas), not alive, _fingerprint(Gamma))


def _symmetry_check(op, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(op.cols), rng.standard_normal(op.cols)
    Ax, Ay = op.apply(x), op.apply(y)
    scale = max(np.linalg.norm(Ax) * np.linalg.norm(y), np.linalg.norm(Ay) * np.linalg.norm(x), 1e-300)
    if abs(y @ Ax - x @ Ay) > 1e-10 * scale:
        raise ValueError("operator failed the symmetry check")


def lanczos_coefficients(fact: LanczosFactorization, mode: str, j: int | None = None) -> np.ndarray:
    """``T_j^{±1/2} δ₁ e₁`` (default ``j = k``)."""
    _check_mode(mode)
    j = fact.k if j is None else j
    if not 1 <= j <= fact.k:
        raise ValueError(f"j must lie in [1, {fact.k}]")
    return _tri_function(np.asarray(fact.gammas[:j]), np.asarray(fact.deltas[1:j]), mode, fact.deltas[0])


def lanczos_sample(fact: LanczosFactorization, mode: str = "sqrt") -> np.ndarray:
    """``ξ_k = W_k T_k^{1/2} δ₁e₁`` (``sqrt``) or ``ζ_k = W_k T_k^{-1/2} δ₁e₁`` (``invsqrt``)."""
    return fact.W @ lanczos_coefficients(fact, mode)


def convergence_estimate(fact: LanczosFactorization, k: int, mode: str) -> float:
    """Relative change ``‖x_k - x_{k+1}‖ / ‖x_{k+1}‖`` between successive approximations.

    Evaluated on the zero-padded coefficient vectors, which give the same
    value as the ``n``-space formula because ``W`` has orthonormal columns.
    If the run terminated at step ``k`` the approximation is exact and 0 is
    returned.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if fact.terminated and k >= fact.k:
        return 0.0
    if k + 1 > fact.k:
        raise ValueError("the estimate needs one look-ahead step")
    c1 = lanczos_coefficients(fact, mode, k + 1)
    c0 = lanczos_coefficients(fact, mode, k)
    den = float(np.linalg.norm(c1))
    if den == 0.0:
        raise ZeroDivisionError("successive iterate has zero norm")
    diff = c1.copy()
    diff[:k] -= c0
    return float(np.linalg.norm(diff)) / den


def residual_error_bound(fact: LanczosFactorization, k: int | None = None) -> float:
    """Residual-based error indicator ``sqrt(λ_min(T_k)) δ₁ |e_kᵀ T_k⁻¹ e₁|``.

    Zero when the run terminated on an invariant subspace at step ``k``.
    """
    k = fact.k if k is None else k
    if fact.terminated and k >= fact.k:
        return 0.0
    T = fact.T_at(k)
    w = np.linalg.eigvalsh(T)
    e1 = np.zeros(k)
    e1[0] = 1.0
    x = np.linalg.solve(T, e1)
    return math.sqrt(max(float(w.min()), 0.0)) * fact.deltas[0] * abs(float(x[-1]))


@dataclass
class LanczosResult:
    """Outcome of an adaptive Lanczos matrix-function application."""

    x: np.ndarray
    k: int
    e_tilde: float
    converged: bool
    factorization: LanczosFactorization
    trace: list = field(default_factory=list)


def lanczos_apply(Gamma: LinearOperator, eps, mode: str = "sqrt", *, tol: float = 1e-6, max_k: int = 300,
                  reorth: bool = True, record: bool = False, check_symmetry: bool = False,
                  warn: bool = True) -> LanczosResult:
    """Approximate ``Γ^{±1/2} ε``, stopping once the successive-change estimate drops to ``tol``.

    The (k+1)-th step is always run before the k-th estimate is accepted;
    the returned vector is the ``(k+1)``-step approximation.
    """
    _check_mode(mode)
    Gamma = aslinearoperator(Gamma)
    if check_symmetry:
        _symmetry_check(Gamma, 0)
    w1, d1 = _start(eps)
    W, gammas, deltas = [w1], [], [d1]
    scale = [0.0]
    trace = []
    alive = _step(Gamma.apply, W, gammas, deltas, reorth, scale)
    prev = _tri_function(np.asarray(gammas), np.asarray(deltas[1:1]), mode, d1)
    e_tilde = 0.0 if not alive else math.inf
    converged = not alive
    while alive and len(gammas) < max_k:
        alive = _step(Gamma.apply, W, gammas, deltas, reorth, scale)
        j = len(gammas)
        cur = _tri_function(np.asarray(gammas), np.asarray(deltas[1:j]), mode, d1)
        diff = cur.copy()
        diff[: j - 1] -= prev
        e_tilde = float(np.linalg.norm(diff) / np.linalg.norm(cur))
        if record:
            trace.append({"k": j - 1, "delta": deltas[j - 1], "gamma": gammas[j - 2], "e_tilde": e_tilde,
                          "residual_bound": math.nan})
        prev = cur
        if e_tilde <= tol or not alive:
            converged = True
            break
    fact = LanczosFactorization(tuple(W), tuple(gammas), tuple(deltas), not alive, _fingerprint(Gamma))
    if record:
        for r in trace:
            r["residual_bound"] = residual_error_bound(fact, r["k"])
    if not converged and warn:
        warnings.warn(f"Lanczos hit max_k={max_k} with e_tilde={e_tilde:.3e}", MaxIterWarning, stacklevel=2)
    x = fact.W @ prev
    return LanczosResult(x, fact.k, e_tilde, converged, fact, trace)


def preconditioned_operator(Gamma: LinearOperator, G) -> LinearOperator:
    """Lazy ``G Γ Gᵀ``."""
    Gamma = aslinearoperator(Gamma)
    n = Gamma.rows
    f = lambda x: G.apply(Gamma.apply(G.apply_transpose(x)))
    return LinearOperator((n, n), f, f, symmetric=True, spd_hint=Gamma.spd_hint, name=f"G{Gamma.name}Gt")


def preconditioned_sample(Gamma: LinearOperator, G, eps, mode: str = "sqrt", **kw) -> LanczosResult:
    """Lanczos on ``GΓGᵀ`` mapped back to a draw with covariance ``Γ`` or ``Γ⁻¹``.

    ``sqrt`` returns ``G⁻¹ W T^{1/2} δ₁e₁`` and ``invsqrt`` returns
    ``Gᵀ W T^{-1/2} δ₁e₁``.  With ``G = None`` plain Lanczos on ``Γ`` is used.
    """
    _check_mode(mode)
    if G is None:
        return lanczos_apply(Gamma, eps, mode, **kw)
    res = lanczos_apply(preconditioned_operator(Gamma, G), eps, mode, **kw)
    res.x = G.apply_inverse(res.x) if mode == "sqrt" else G.apply_transpose(res.x)
    return res

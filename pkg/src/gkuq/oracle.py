"""Dense brute-force references for the Krylov quantities.

Nothing here touches the gen-GK or Lanczos code paths: every quantity is
obtained from explicit matrices and full symmetric eigendecompositions.
Intended for tests and small problems only (``n <= 4096``).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .operators import to_dense

ORACLE_LIMIT = 4096


def dense_matrix_function(M: np.ndarray, f: str, shift: float = 0.0) -> np.ndarray:
    """Apply ``sqrt``, ``invsqrt``, ``inv`` or ``shifted-inv`` to a symmetric matrix."""
    M = np.asarray(M, dtype=float)
    w, U = np.linalg.eigh(0.5 * (M + M.T))
    scale = max(float(np.abs(w).max()), 1.0) if w.size else 1.0
    if f in ("sqrt", "invsqrt") and w.size and w.min() < -1e-12 * scale:
        raise ValueError(f"matrix has negative eigenvalue {w.min():.3e}")
    if f == "sqrt":
        g = np.sqrt(np.clip(w, 0.0, None))
    elif f == "invsqrt":
        g = 1.0 / np.sqrt(w)
    elif f == "inv":
        g = 1.0 / w
    elif f == "shifted-inv":
        g = 1.0 / (w + shift)
    else:
        raise ValueError(f"unknown matrix function {f!r}")
    return (U * g) @ U.T


def _logdet_spd(M: np.ndarray) -> float:
    c = sla.cholesky(0.5 * (M + M.T), lower=True)
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def dense_gaussian_kl(mean1, cov1, mean2, cov2) -> float:
    """``KL(N(mean1, cov1) || N(mean2, cov2))``."""
    mean1, mean2 = np.atleast_1d(mean1).astype(float), np.atleast_1d(mean2).astype(float)
    cov1, cov2 = np.atleast_2d(cov1).astype(float), np.atleast_2d(cov2).astype(float)
    n = mean1.size
    try:
        c2 = sla.cho_factor(0.5 * (cov2 + cov2.T), lower=True)
        ld1 = _logdet_spd(cov1)
    except sla.LinAlgError as exc:
        raise ValueError("covariances must be SPD") from exc
    ld2 = 2.0 * float(np.sum(np.log(np.diag(c2[0]))))
    dm = mean2 - mean1
    tr = float(np.trace(sla.cho_solve(c2, cov1)))
    quad = float(dm @ sla.cho_solve(c2, dm))
    return 0.5 * (tr + quad - n + ld2 - ld1)


@dataclass
class DensePosterior:
    """Exact Gaussian posterior for ``d = A s + noise`` with prior ``N(mu, lam^-2 Q)``.

    ``rinv`` holds the diagonal of the noise precision ``R^{-1}``.
    """

    A: np.ndarray
    rinv: np.ndarray
    Q: np.ndarray
    mu: np.ndarray
    d: np.ndarray
    lam: float

    @cached_property
    def Q_half(self) -> np.ndarray:
        return dense_matrix_function(self.Q, "sqrt")

    @cached_property
    def H(self) -> np.ndarray:
        H = self.A.T @ (self.rinv[:, None] * self.A)
        return 0.5 * (H + H.T)

    @cached_property
    def H_Q(self) -> np.ndarray:
        HQ = self.Q_half @ self.H @ self.Q_half
        return 0.5 * (HQ + HQ.T)

    @cached_property
    def H_Q_eigenvalues(self) -> np.ndarray:
        return np.clip(np.linalg.eigvalsh(self.H_Q), 0.0, None)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def b(self) -> np.ndarray:
        return self.d - self.A @ self.mu

    @cached_property
    def Gamma_post(self) -> np.ndarray:
        n = self.n
        inner = dense_matrix_function(self.lam**2 * np.eye(n) + self.H_Q, "inv")
        G = self.Q_half @ inner @ self.Q_half
        return 0.5 * (G + G.T)

    @cached_property
    def s_post(self) -> np.ndarray:
        return self.mu + self.Gamma_post @ (self.A.T @ (self.rinv * self.b))

    # quantities tied to a gen-GK basis (V_k, T_k)

    def H_Q_hat(self, V: np.ndarray, T: np.ndarray) -> np.ndarray:
        QhV = self.Q_half @ V
        M = QhV @ T @ QhV.T
        return 0.5 * (M + M.T)

    def omega(self, V, T) -> float:
        return float(np.linalg.norm(self.H_Q - self.H_Q_hat(V, T), "fro"))

    def theta(self, V, T) -> float:
        return float(np.trace(self.H_Q - self.H_Q_hat(V, T)))

    def Gamma_hat(self, V, T) -> np.ndarray:
        """``(lam^2 Q^{-1} + V T V^T)^{-1}`` assembled as ``Q^{1/2}(lam^2 I + Ĥ_Q)^{-1}Q^{1/2}``."""
        inner = dense_matrix_function(self.lam**2 * np.eye(self.n) + self.H_Q_hat(V, T), "inv")
        G = self.Q_half @ inner @ self.Q_half
        return 0.5 * (G + G.T)

    def prior_cov(self) -> np.ndarray:
        return self.Q / self.lam**2

    def kl_post_prior(self) -> float:
        return dense_gaussian_kl(self.s_post, self.Gamma_post, self.mu, self.prior_cov())

    def kl_post_prior_simplified(self) -> float:
        """KL with the mean term dropped: ``½[tr(X) - n - logdet X]``, ``X = lam^2 Q^{-1} Γ_post``."""
        ev = self.H_Q_eigenvalues / self.lam**2
        return 0.5 * float(np.sum(1.0 / (1.0 + ev) - 1.0 + np.log1p(ev)))

    def d_optimal(self) -> float:
        return float(np.sum(np.log1p(self.H_Q_eigenvalues / self.lam**2)))

    def sample_factor(self) -> np.ndarray:
        """``S = Q^{1/2}(lam^2 I + H_Q)^{-1/2}`` with ``S S^T = Γ_post``."""
        return self.Q_half @ dense_matrix_function(self.lam**2 * np.eye(self.n) + self.H_Q, "invsqrt")


def dense_posterior(problem, lam: float | None = None) -> DensePosterior:
    """Assemble the exact posterior of a :class:`~gkuq.gengk.ProblemInstance`."""
    lam = problem.lam if lam is None else lam
    if lam is None or lam <= 0:
        raise ValueError("a positive lambda is required")
    n = problem.Q.rows
    if n > ORACLE_LIMIT or problem.A.rows > 4 * ORACLE_LIMIT:
        raise ValueError(f"problem too large for the dense oracle (n={n})")
    A = to_dense(problem.A, limit=4 * ORACLE_LIMIT)
    Q = to_dense(problem.Q)
    Q = 0.5 * (Q + Q.T)
    post = DensePosterior(A, np.asarray(problem.rinv_diag, float), Q, np.asarray(problem.mu, float), np.asarray(problem.d, float), float(lam))
    w = np.linalg.eigvalsh(post.Gamma_post)
    if w.min() <= 0:
        raise ValueError("posterior covariance is not positive definite")
    return post

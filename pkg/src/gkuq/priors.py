"""Matérn covariance priors on regular grids and Laplacian-power preconditioners."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.fft import dstn, idstn
from scipy.spatial.distance import cdist

from .operators import LinearOperator, aslinearoperator

__all__ = [
    "MaternKernel",
    "GridGeometry",
    "AssembledCovariance",
    "matern_eval",
    "assemble_covariance",
    "Preconditioner",
    "IdentityPreconditioner",
    "DensePreconditioner",
    "LaplacianPreconditioner",
    "KronPreconditioner",
    "build_laplacian_preconditioner",
    "gamma_for_nu",
    "JITTER_FLOOR",
]

SUPPORTED_NU = (0.5, 1.5, 2.5)
JITTER_FLOOR = 1e-10
DENSE_SINE_LIMIT = 128


@dataclass(frozen=True)
class MaternKernel:
    """Half-integer Matérn kernel ``kappa(r)`` with unit-variance default."""

    nu: float = 0.5
    ell: float = 0.1
    variance: float = 1.0

    def __post_init__(self):
        if float(self.nu) not in SUPPORTED_NU:
            raise ValueError(f"unsupported smoothness nu={self.nu}; choose one of {SUPPORTED_NU}")
        if self.ell <= 0 or self.variance <= 0:
            raise ValueError("ell and variance must be positive")

    def __call__(self, r):
        return matern_eval(self, r)


def matern_eval(kernel: MaternKernel, r):
    """Closed-form Matérn covariance at distance(s) ``r >= 0``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distances must be nonnegative")
    nu = float(kernel.nu)
    if nu == 0.5:
        out = np.exp(-r / kernel.ell)
    elif nu == 1.5:
        a = np.sqrt(3.0) * r / kernel.ell
        out = (1.0 + a) * np.exp(-a)
    elif nu == 2.5:
        a = np.sqrt(5.0) * r / kernel.ell
        out = (1.0 + a + a * a / 3.0) * np.exp(-a)
    else:
        raise ValueError(f"unsupported smoothness nu={nu}")
    return kernel.variance * out


def _matern_inplace(kernel: MaternKernel, D: np.ndarray) -> np.ndarray:
    # same formulas as matern_eval, without temporaries the size of D
    nu = float(kernel.nu)
    c = {0.5: 1.0, 1.5: np.sqrt(3.0), 2.5: np.sqrt(5.0)}[nu] / kernel.ell
    D *= c
    if nu == 0.5:
        np.negative(D, out=D)
        np.exp(D, out=D)
    else:
        poly = 1.0 + D
        if nu == 2.5:
            poly += D * D / 3.0
        np.negative(D, out=D)
        np.exp(D, out=D)
        D *= poly
    if kernel.variance != 1.0:
        D *= kernel.variance
    return D


@dataclass(frozen=True)
class GridGeometry:
    """Regular cell-centred grid on a box ``[0, extent_0] x ...``.

    Point ``i`` along an axis with ``N`` points sits at ``(i + 1/2) * extent / N``.
    Points are ordered row-major (last axis fastest).
    """

    dims: tuple[int, ...]
    extent: tuple[float, ...] | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in np.atleast_1d(self.dims))
        if not dims or any(d < 1 for d in dims):
            raise ValueError(f"invalid grid dims {self.dims}")
        extent = (1.0,) * len(dims) if self.extent is None else tuple(float(e) for e in self.extent)
        if len(extent) != len(dims) or any(e <= 0 for e in extent):
            raise ValueError("extent must be positive with one entry per axis")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "extent", extent)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(e / d for e, d in zip(self.extent, self.dims))

    def axis_coordinates(self, axis: int) -> np.ndarray:
        h = self.spacing[axis]
        return (np.arange(self.dims[axis]) + 0.5) * h

    def points(self) -> np.ndarray:
        """``(size, ndim)`` array of point coordinates."""
        axes = [self.axis_coordinates(a) for a in range(self.ndim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)


@dataclass(frozen=True)
class AssembledCovariance:
    """Dense SPD covariance matrix together with the diagonal jitter it received."""

    matrix: np.ndarray
    jitter: float = 0.0
    kernel: MaternKernel | None = None
    geometry: GridGeometry | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def op(self) -> LinearOperator:
        return aslinearoperator(self.matrix, symmetric=True, spd_hint=True, name="Q")


def assemble_covariance(
    kernel: MaternKernel,
    geometry: GridGeometry,
    *,
    dense_limit: int = 16384,
    jitter_floor: float = JITTER_FLOOR,
) -> AssembledCovariance:
    """Dense kernel matrix ``kappa(|x_i - x_j|)`` on the grid points.

    If the smallest eigenvalue is below ``jitter_floor * variance`` the matrix
    is shifted so that it equals that floor; the shift is returned as
    ``jitter``.
    """
    n = geometry.size
    if n > dense_limit:
        raise ValueError(
            f"{n} points exceed the dense limit {dense_limit}; factor the prior with kron_operator instead"
        )
    pts = geometry.points()
    K = _matern_inplace(kernel, cdist(pts, pts))
    K = 0.5 * (K + K.T)
    tau = jitter_floor * kernel.variance
    jitter = 0.0
    if n > 1:
        probe = K - tau * np.eye(n)
        try:
            sla.cholesky(probe, lower=True, check_finite=False, overwrite_a=True)
        except sla.LinAlgError:
            lam_min = float(sla.eigh(K, eigvals_only=True, subset_by_index=[0, 0], check_finite=False)[0])
            jitter = tau - lam_min
            K[np.diag_indices(n)] += jitter
        del probe
    K.setflags(write=False)
    return AssembledCovariance(K, jitter, kernel, geometry)


def gamma_for_nu(nu: float) -> float:
    """Laplacian power paired with a Matérn smoothness (1/2, 3/2, 5/2 -> 1/2, 1, 2)."""
    table = {0.5: 0.5, 1.5: 1.0, 2.5: 2.0}
    try:
        return table[float(nu)]
    except KeyError:
        raise ValueError(f"no default Laplacian power for nu={nu}") from None


class Preconditioner:
    """Invertible square ``G`` exposing ``G``, ``G^{-1}``, ``G^T`` and ``G^{-T}``."""

    n: int

    def apply(self, x):
        raise NotImplementedError

    def apply_inverse(self, x):
        raise NotImplementedError

    def apply_transpose(self, x):
        raise NotImplementedError

    def apply_inverse_transpose(self, x):
        raise NotImplementedError

    @property
    def op(self) -> LinearOperator:
        return LinearOperator((self.n, self.n), self.apply, self.apply_transpose, name="G")

    @property
    def inv_op(self) -> LinearOperator:
        return LinearOperator((self.n, self.n), self.apply_inverse, self.apply_inverse_transpose, name="G^-1")


class IdentityPreconditioner(Preconditioner):
    def __init__(self, n: int):
        self.n = int(n)

    def apply(self, x):
        return np.array(x, dtype=float)

    apply_inverse = apply_transpose = apply_inverse_transpose = apply


class DensePreconditioner(Preconditioner):
    """Preconditioner given by an explicit invertible matrix."""

    def __init__(self, G: np.ndarray):
        G = np.array(G, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError("preconditioner must be square")
        self.n = G.shape[0]
        self.G = G
        self._lu = sla.lu_factor(G)

    def apply(self, x):
        return self.G @ x

    def apply_transpose(self, x):
        return self.G.T @ x

    def apply_inverse(self, x):
        return sla.lu_solve(self._lu, x, trans=0)

    def apply_inverse_transpose(self, x):
        return sla.lu_solve(self._lu, x, trans=1)


@dataclass(frozen=True)
class LaplacianPreconditioner(Preconditioner):
    """``G = (-Δ_h)^gamma`` with homogeneous Dirichlet conditions.

    ``-Δ_h`` is the standard (2·ndim+1)-point finite-difference Laplacian with
    ``h^-2`` scaling. It is diagonalized by the orthonormal type-I discrete
    sine transform, so every real power is applied exactly.
    """

    geometry: GridGeometry
    gamma: float
    eigenvalues: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        lam = np.zeros(self.geometry.dims)
        for a, (N, h) in enumerate(zip(self.geometry.dims, self.geometry.spacing)):
            j = np.arange(1, N + 1)
            la = 4.0 / h**2 * np.sin(np.pi * j / (2 * (N + 1))) ** 2
            shape = [1] * self.geometry.ndim
            shape[a] = N
            lam = lam + la.reshape(shape)
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def n(self) -> int:
        return self.geometry.size

    @cached_property
    def _sine_matrices(self):
        """Orthonormal (and symmetric) DST-I matrices per axis, for small 1-D/2-D grids."""
        if self.geometry.ndim > 2 or max(self.geometry.dims) > DENSE_SINE_LIMIT:
            return None
        mats = []
        for N in self.geometry.dims:
            j = np.arange(1, N + 1)
            mats.append(np.sqrt(2.0 / (N + 1)) * np.sin(np.pi * np.outer(j, j) / (N + 1)))
        return mats

    def _power(self, x, p):
        x = np.asarray(x, dtype=float)
        dims = self.geometry.dims
        lead = x.shape[:-1]
        X = x.reshape(lead + dims)
        S = self._sine_matrices
        if S is not None:
            # small grids: two matrix products beat the FFT call overhead
            if len(dims) == 1:
                Xh = (X @ S[0]) * self.eigenvalues ** p
                return (Xh @ S[0]).reshape(x.shape)
            Xh = (S[0] @ X @ S[1]) * self.eigenvalues ** p
            return (S[0] @ Xh @ S[1]).reshape(x.shape)
        axes = tuple(range(len(lead), len(lead) + len(dims)))
        Xh = dstn(X, type=1, axes=axes, norm="ortho")
        Xh *= self.eigenvalues ** p
        return idstn(Xh, type=1, axes=axes, norm="ortho").reshape(x.shape)

    def apply(self, x):
        return self._power(x, self.gamma)

    def apply_inverse(self, x):
        return self._power(x, -self.gamma)

    apply_transpose = apply
    apply_inverse_transpose = apply_inverse

    def power(self, p: float) -> "LaplacianPreconditioner":
        return LaplacianPreconditioner(self.geometry, self.gamma * p)

    def dense_laplacian(self) -> np.ndarray:
        """Assembled ``-Δ_h`` (for cross-checks on small grids)."""
        mats = []
        for N, h in zip(self.geometry.dims, self.geometry.spacing):
            mats.append((2 * np.eye(N) - np.eye(N, k=1) - np.eye(N, k=-1)) / h**2)
        L = np.zeros((self.n, self.n))
        for a, M in enumerate(mats):
            term = np.ones((1, 1))
            for b, N in enumerate(self.geometry.dims):
                term = np.kron(term, M if a == b else np.eye(N))
            L += term
        return L


def build_laplacian_preconditioner(geometry: GridGeometry, gamma: float) -> LaplacianPreconditioner:
    if geometry.ndim not in (1, 2, 3):
        raise ValueError("Laplacian preconditioner supports 1-D to 3-D grids")
    return LaplacianPreconditioner(geometry, float(gamma))


class KronPreconditioner(Preconditioner):
    """``G = Gt ⊗ Gs`` with dense ``Gt`` and any spatial preconditioner ``Gs``.

    Vectors are ordered time-major, matching :func:`~gkuq.operators.kron_operator`.
    """

    def __init__(self, Gt: np.ndarray, Gs: Preconditioner):
        self.Gt = np.array(Gt, dtype=float)
        self.Gt_inv = np.linalg.inv(self.Gt)
        self.Gs = Gs
        self.nt = self.Gt.shape[0]
        self.ns = Gs.n
        self.n = self.nt * self.ns

    @classmethod
    def from_temporal_covariance(cls, Qt: np.ndarray, Gs: Preconditioner) -> "KronPreconditioner":
        """Use the upper Cholesky factor of ``Qt^{-1} = Gt^T Gt`` in time."""
        Gt = sla.cholesky(np.linalg.inv(Qt), lower=False)
        return cls(Gt, Gs)

    def _spatial(self, X, method):
        if isinstance(self.Gs, LaplacianPreconditioner):
            return getattr(self.Gs, method)(X)
        f = getattr(self.Gs, method)
        return np.stack([f(row) for row in X])

    def _go(self, x, Mt, method):
        X = np.asarray(x, dtype=float).reshape(self.nt, self.ns)
        return (Mt @ self._spatial(X, method)).reshape(-1)

    def apply(self, x):
        return self._go(x, self.Gt, "apply")

    def apply_inverse(self, x):
        return self._go(x, self.Gt_inv, "apply_inverse")

    def apply_transpose(self, x):
        return self._go(x, self.Gt.T, "apply_transpose")

    def apply_inverse_transpose(self, x):
        return self._go(x, self.Gt_inv.T, "apply_inverse_transpose")

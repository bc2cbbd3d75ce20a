"""Matrix-free linear operators and weighted inner products.

Every matrix in the library (forward model, prior covariance, noise precision,
preconditioners) is handled through :class:`LinearOperator`, a small immutable
wrapper around a pair of callables ``apply``/``apply_transpose``.  Composition,
sums and scaling build lazy expression trees; nothing is ever materialized
unless :func:`to_dense` is called explicitly.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.sparse as sp

__all__ = [
    "LinearOperator",
    "NotSPDError",
    "aslinearoperator",
    "identity",
    "diagonal",
    "weighted_norm",
    "adjoint_test",
    "kron_operator",
    "block_diag_operator",
    "lowrank_update_operator",
    "to_dense",
    "DENSE_LIMIT",
]

DENSE_LIMIT = 4096

Matvec = Callable[[np.ndarray], np.ndarray]


class NotSPDError(ValueError):
    """Raised when a quadratic form that should be positive is negative."""


class LinearOperator:
    """Immutable matrix-free linear map ``R^cols -> R^rows``.

    Parameters
    ----------
    shape : tuple of int
        ``(rows, cols)``.
    apply, apply_transpose : callable
        Maps a 1-D array of length ``cols`` (resp. ``rows``) to a 1-D array of
        length ``rows`` (resp. ``cols``). For a symmetric operator
        ``apply_transpose`` may be omitted.
    symmetric, spd_hint : bool
        Structural flags; they are trusted, not verified.
    """

    __slots__ = ("_shape", "_apply", "_apply_t", "symmetric", "spd_hint", "name")

    def __init__(
        self,
        shape: tuple[int, int],
        apply: Matvec,
        apply_transpose: Matvec | None = None,
        *,
        symmetric: bool = False,
        spd_hint: bool = False,
        name: str = "",
    ):
        rows, cols = (int(shape[0]), int(shape[1]))
        if rows < 0 or cols < 0:
            raise ValueError(f"invalid shape {shape}")
        if apply_transpose is None:
            if not symmetric:
                raise ValueError("apply_transpose is required for non-symmetric operators")
            apply_transpose = apply
        if symmetric and rows != cols:
            raise ValueError("a symmetric operator must be square")
        object.__setattr__(self, "_shape", (rows, cols))
        object.__setattr__(self, "_apply", apply)
        object.__setattr__(self, "_apply_t", apply_transpose)
        object.__setattr__(self, "symmetric", bool(symmetric))
        object.__setattr__(self, "spd_hint", bool(spd_hint))
        object.__setattr__(self, "name", name)

    def __setattr__(self, key, value):
        raise AttributeError("LinearOperator is immutable")

    @property
    def shape(self) -> tuple[int, int]:
        return self._shape

    @property
    def rows(self) -> int:
        return self._shape[0]

    @property
    def cols(self) -> int:
        return self._shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.cols,):
            raise ValueError(f"expected vector of length {self.cols}, got shape {x.shape}")
        return np.asarray(self._apply(x), dtype=float).reshape(self.rows)

    def apply_transpose(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.rows,):
            raise ValueError(f"expected vector of length {self.rows}, got shape {y.shape}")
        return np.asarray(self._apply_t(y), dtype=float).reshape(self.cols)

    def matmat(self, X: np.ndarray) -> np.ndarray:
        """Apply column by column to a 2-D array."""
        X = np.asarray(X, dtype=float)
        out = np.empty((self.rows, X.shape[1]))
        for j in range(X.shape[1]):
            out[:, j] = self.apply(X[:, j])
        return out

    @property
    def T(self) -> "LinearOperator":
        return LinearOperator(
            (self.cols, self.rows),
            self._apply_t,
            self._apply,
            symmetric=self.symmetric,
            spd_hint=self.spd_hint,
            name=f"{self.name}^T" if self.name else "",
        )

    def __matmul__(self, other):
        if isinstance(other, LinearOperator):
            return compose(self, other)
        other = np.asarray(other)
        if other.ndim == 1:
            return self.apply(other)
        return self.matmat(other)

    def __add__(self, other: "LinearOperator") -> "LinearOperator":
        if not isinstance(other, LinearOperator):
            return NotImplemented
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        a, b = self, other
        return LinearOperator(
            self.shape,
            lambda x: a.apply(x) + b.apply(x),
            lambda y: a.apply_transpose(y) + b.apply_transpose(y),
            symmetric=a.symmetric and b.symmetric,
            spd_hint=a.spd_hint and b.spd_hint,
        )

    def __sub__(self, other: "LinearOperator") -> "LinearOperator":
        return self + (-1.0) * other

    def __rmul__(self, c: float) -> "LinearOperator":
        c = float(c)
        a = self
        return LinearOperator(
            self.shape,
            lambda x: c * a.apply(x),
            lambda y: c * a.apply_transpose(y),
            symmetric=a.symmetric,
            spd_hint=a.spd_hint and c > 0,
        )

    __mul__ = __rmul__

    def __repr__(self) -> str:
        flags = "".join(f for f, on in (("S", self.symmetric), ("P", self.spd_hint)) if on)
        label = f" {self.name}" if self.name else ""
        return f"<LinearOperator{label} {self.rows}x{self.cols} {flags}>"


def compose(a: LinearOperator, b: LinearOperator) -> LinearOperator:
    """Lazy product ``a @ b``."""
    if a.cols != b.rows:
        raise ValueError(f"cannot compose {a.shape} with {b.shape}")
    return LinearOperator(
        (a.rows, b.cols),
        lambda x: a.apply(b.apply(x)),
        lambda y: b.apply_transpose(a.apply_transpose(y)),
    )


def aslinearoperator(M, *, symmetric: bool | None = None, spd_hint: bool = False, name: str = "") -> LinearOperator:
    """Wrap a dense array, a scipy sparse matrix or an existing operator."""
    if isinstance(M, LinearOperator):
        return M
    if sp.issparse(M):
        M = sp.csr_matrix(M, dtype=float)
        Mt = M.T.tocsr()
        if symmetric is None:
            symmetric = M.shape[0] == M.shape[1] and abs(M - Mt).max() == 0 if M.nnz else M.shape[0] == M.shape[1]
        return LinearOperator(M.shape, M.dot, Mt.dot, symmetric=bool(symmetric), spd_hint=spd_hint, name=name)
    M = np.array(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("expected a 2-D array")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    M.setflags(write=False)
    if symmetric is None:
        symmetric = M.shape[0] == M.shape[1] and np.array_equal(M, M.T)
    return LinearOperator(M.shape, M.dot, M.T.dot, symmetric=symmetric, spd_hint=spd_hint, name=name)


def identity(n: int) -> LinearOperator:
    return LinearOperator((n, n), lambda x: x.copy(), symmetric=True, spd_hint=True, name="I")


def diagonal(d) -> LinearOperator:
    d = np.array(d, dtype=float)
    d.setflags(write=False)
    return LinearOperator((d.size, d.size), lambda x: d * x, symmetric=True, spd_hint=bool(np.all(d > 0)), name="diag")


def to_dense(op, limit: int = DENSE_LIMIT) -> np.ndarray:
    """Materialize an operator by applying it to the standard basis."""
    if isinstance(op, np.ndarray):
        return np.array(op, dtype=float)
    if sp.issparse(op):
        return op.toarray()
    if max(op.shape) > limit:
        raise ValueError(f"operator {op.shape} exceeds dense limit {limit}")
    return op.matmat(np.eye(op.cols))


def weighted_norm(x: np.ndarray, M: LinearOperator) -> float:
    """``sqrt(x^T M x)`` for a symmetric positive definite weight ``M``."""
    x = np.asarray(x, dtype=float)
    if not M.spd_hint:
        raise NotSPDError("weight operator is not flagged SPD")
    Mx = M.apply(x)
    q = float(x @ Mx)
    scale = float(np.linalg.norm(x) * np.linalg.norm(Mx))
    if q < -1e-12 * scale:
        raise NotSPDError(f"negative quadratic form {q:.3e}")
    return float(np.sqrt(max(q, 0.0)))


def adjoint_test(op: LinearOperator, trials: int = 10, seed: int = 0) -> float:
    """Worst relative dot-product mismatch ``|<y, Ax> - <A^T y, x>| / (|x||y|)``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.cols)
        y = rng.standard_normal(op.rows)
        lhs = y @ op.apply(x)
        rhs = op.apply_transpose(y) @ x
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return float(worst)


def kron_operator(Qt, Qs, *, spd_hint: bool | None = None) -> LinearOperator:
    """``Qt ⊗ Qs`` applied as ``Qt X Qs^T`` on the row-major reshape ``X``.

    Dense array factors take a BLAS matrix-matrix path; operator factors are
    applied row by row and column by column.
    """
    if isinstance(Qt, np.ndarray) and isinstance(Qs, np.ndarray):
        if Qt.shape[0] != Qt.shape[1] or Qs.shape[0] != Qs.shape[1]:
            raise ValueError("kron_operator expects square factors")
        return _dense_kron(Qt, Qs, bool(spd_hint))
    Qt, Qs = aslinearoperator(Qt), aslinearoperator(Qs)
    if Qt.rows != Qt.cols or Qs.rows != Qs.cols:
        raise ValueError("kron_operator expects square factors")
    nt, ns = Qt.rows, Qs.rows
    n = nt * ns
    if n > np.iinfo(np.int64).max // max(n, 1):
        raise OverflowError("Kronecker dimension overflow")

    def _make(ft: Matvec, fs: Matvec) -> Matvec:
        def _apply(x):
            X = x.reshape(nt, ns)
            Y = np.empty_like(X)
            for i in range(nt):
                Y[i] = fs(X[i])
            for j in range(ns):
                Y[:, j] = ft(np.ascontiguousarray(Y[:, j]))
            return Y.reshape(n)

        return _apply

    return LinearOperator(
        (n, n),
        _make(Qt.apply, Qs.apply),
        _make(Qt.apply_transpose, Qs.apply_transpose),
        symmetric=Qt.symmetric and Qs.symmetric,
        spd_hint=(Qt.spd_hint and Qs.spd_hint) if spd_hint is None else spd_hint,
        name="kron",
    )


def _dense_kron(Qt: np.ndarray, Qs: np.ndarray, spd_hint: bool) -> LinearOperator:
    Qt = np.array(Qt, dtype=float)
    Qs = np.array(Qs, dtype=float)
    nt, ns = Qt.shape[0], Qs.shape[0]
    sym = np.array_equal(Qt, Qt.T) and np.array_equal(Qs, Qs.T)

    def _apply(x):
        return (Qt @ x.reshape(nt, ns) @ Qs.T).reshape(-1)

    def _apply_t(y):
        return (Qt.T @ y.reshape(nt, ns) @ Qs).reshape(-1)

    return LinearOperator((nt * ns, nt * ns), _apply, _apply_t, symmetric=sym, spd_hint=spd_hint and sym, name="kron")


def block_diag_operator(blocks) -> LinearOperator:
    """Block-diagonal operator built from a sequence of operators."""
    blocks = [aslinearoperator(b) for b in blocks]
    r_off = np.cumsum([0] + [b.rows for b in blocks])
    c_off = np.cumsum([0] + [b.cols for b in blocks])

    def _apply(x):
        return np.concatenate([b.apply(x[c_off[i]:c_off[i + 1]]) for i, b in enumerate(blocks)])

    def _apply_t(y):
        return np.concatenate([b.apply_transpose(y[r_off[i]:r_off[i + 1]]) for i, b in enumerate(blocks)])

    return LinearOperator(
        (int(r_off[-1]), int(c_off[-1])),
        _apply,
        _apply_t,
        symmetric=all(b.symmetric for b in blocks),
        spd_hint=all(b.spd_hint for b in blocks),
        name="blockdiag",
    )


def lowrank_update_operator(base: LinearOperator, Z: np.ndarray, D: np.ndarray) -> LinearOperator:
    """``x -> base(x) - Z D Z^T x`` for orthonormal ``Z`` and diagonal ``D``.

    ``D`` may be given as a 1-D array of diagonal entries or a diagonal matrix.
    """
    base = aslinearoperator(base)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[0] != base.cols and Z.shape[1] == base.cols:
        Z = Z.T
    D = np.asarray(D, dtype=float)
    if D.ndim == 2:
        if np.any(D - np.diag(np.diag(D))):
            raise ValueError("D must be diagonal")
        D = np.diag(D).copy()
    if D.shape != (Z.shape[1],):
        raise ValueError(f"column count mismatch: Z has {Z.shape[1]} columns, D has {D.size} entries")
    if Z.shape[1] and np.linalg.norm(Z.T @ Z - np.eye(Z.shape[1])) > 1e-8:
        raise ValueError("Z must have orthonormal columns")
    if base.rows != base.cols or Z.shape[0] != base.rows:
        raise ValueError("base must be square with the same dimension as Z")

    def _apply(x):
        return base.apply(x) - Z @ (D * (Z.T @ x))

    def _apply_t(y):
        return base.apply_transpose(y) - Z @ (D * (Z.T @ y))

    return LinearOperator(base.shape, _apply, _apply_t, symmetric=base.symmetric)

"""Desk-scale test problems: 1D heat deconvolution, 2D parallel-beam tomography,
a toy dynamic tomography sequence, and additive white noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import io
from .operators import LinearOperator, aslinearoperator, kron_operator
from .priors import GridGeometry, MaternKernel, assemble_covariance

__all__ = [
    "TestProblem",
    "heat_matrix",
    "heat_solution",
    "heat_problem",
    "parallel_beam_matrix",
    "two_blob_phantom",
    "tomo_problem",
    "dynamic_problem",
    "DynamicPrior",
    "NoiseModel",
    "add_noise",
    "save_problem",
    "load_problem",
]


@dataclass(frozen=True)
class TestProblem:
    """A forward operator with a reference solution and its noise-free data.

    ``matrix`` keeps the explicit (dense or sparse) representation of ``A``
    when one exists so the problem can be serialized.
    """

    __test__ = False  # not a pytest class

    A: LinearOperator
    s_true: np.ndarray
    d_clean: np.ndarray
    geometry: GridGeometry
    label: str
    matrix: object = None
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.A.rows

    @property
    def n(self) -> int:
        return self.A.cols


# ---------------------------------------------------------------- heat


def heat_matrix(n: int, kappa: float = 1.0) -> np.ndarray:
    """Lower-triangular Toeplitz midpoint discretization of the heat Volterra kernel."""
    h = 1.0 / n
    t = h * (np.arange(n) + 0.5)
    c = h / (2.0 * kappa * math.sqrt(math.pi))
    col = c * t**-1.5 * np.exp(-1.0 / (4.0 * kappa**2 * t))
    row = np.zeros(n)
    row[0] = col[0]
    return sla.toeplitz(col, row)


def heat_solution(n: int) -> np.ndarray:
    """Piecewise reference solution: a quadratic rise, a bump and an exponential tail on [0, 1/2]."""
    x = np.zeros(n)
    i = np.arange(1, n // 2 + 1)
    ti = 20.0 * i / n
    x[: n // 2] = np.where(
        ti < 2, 0.75 * ti**2 / 4, np.where(ti < 3, 0.75 + (ti - 2) * (3 - ti), 0.75 * np.exp(-2 * (ti - 3)))
    )
    return x


def heat_problem(n: int = 256, kappa: float = 1.0) -> TestProblem:
    if n < 8:
        raise ValueError("heat problem needs n >= 8")
    A = heat_matrix(n, kappa)
    s = heat_solution(n)
    A.setflags(write=False)
    return TestProblem(
        aslinearoperator(A, name="heat"), s, A @ s, GridGeometry((n,)), f"heat-{n}", A,
        {"kind": "heat", "n": n, "kappa": kappa},
    )


# ---------------------------------------------------------------- tomography


def _ray_segments(g: int, theta: float, offsets: np.ndarray):
    """Exact ray/pixel intersection lengths for all rays of one projection angle.

    Pixels are unit squares covering ``[-g/2, g/2]^2``; a ray at detector
    offset ``s`` runs along ``(sin θ, cos θ)`` through the point ``s (cos θ, -sin θ)``.
    Returns ``(ray, pixel, length)`` triples with row-major pixel numbering
    (``pixel = iy * g + ix``).
    """
    half = g / 2.0
    dx, dy = math.sin(theta), math.cos(theta)
    if abs(dx) < 1e-12:
        dx = 0.0
    if abs(dy) < 1e-12:
        dy = 0.0
    px, py = offsets * math.cos(theta), -offsets * math.sin(theta)
    nr = offsets.size
    lines = np.arange(g + 1) - half
    lo = np.full(nr, -np.inf)
    hi = np.full(nr, np.inf)
    hit = np.ones(nr, dtype=bool)
    cand = []
    for d, p in ((dx, px), (dy, py)):
        if d == 0.0:
            hit &= (p >= -half) & (p < half)
        else:
            t1, t2 = (-half - p) / d, (half - p) / d
            lo = np.maximum(lo, np.minimum(t1, t2))
            hi = np.minimum(hi, np.maximum(t1, t2))
            cand.append((lines[None, :] - p[:, None]) / d)
    hit &= hi > lo
    if not hit.any():
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    lo, hi, px, py = lo[hit], hi[hit], px[hit], py[hit]
    rays = np.flatnonzero(hit)
    ts = np.concatenate([lo[:, None], hi[:, None]] + [c[hit] for c in cand], axis=1)
    ts = np.sort(np.clip(ts, lo[:, None], hi[:, None]), axis=1)
    seg = np.diff(ts, axis=1)
    mid = 0.5 * (ts[:, 1:] + ts[:, :-1])
    ix = np.clip(np.floor(px[:, None] + mid * dx + half), 0, g - 1).astype(int)
    iy = np.clip(np.floor(py[:, None] + mid * dy + half), 0, g - 1).astype(int)
    keep = seg > 1e-12
    r = np.broadcast_to(rays[:, None], seg.shape)[keep]
    return r, (iy * g + ix)[keep], seg[keep]


def parallel_beam_matrix(g: int, angles_deg, n_det: int | None = None) -> sp.csr_matrix:
    """Sparse parallel-beam projector with line-length weights.

    Detectors are spaced one pixel apart and centred on the rotation axis;
    by default about ``sqrt(2) g`` of them cover the image diagonal, with the
    count rounded up to the parity of ``g`` so that axis-aligned rays run
    through pixel centres rather than along pixel edges.
    """
    angles = np.atleast_1d(np.asarray(angles_deg, dtype=float))
    if n_det is None:
        n_det = int(math.ceil(math.sqrt(2.0) * g))
        n_det += (n_det - g) % 2
    offsets = np.arange(n_det) - (n_det - 1) / 2.0
    rows, cols, vals = [], [], []
    for a_idx, ang in enumerate(angles):
        r, c, v = _ray_segments(g, math.radians(ang), offsets)
        rows.append(r + a_idx * n_det)
        cols.append(c)
        vals.append(v)
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(angles.size * n_det, g * g),
    )
    A.sum_duplicates()
    return A.tocsr()


def two_blob_phantom(g: int, shift: tuple[float, float] = (0.0, 0.0),
                     shift2: tuple[float, float] | None = None) -> np.ndarray:
    """Two isotropic Gaussians (width ``g/10``, heights 1.0 and 0.8), row-major.

    ``shift`` and ``shift2`` move the first and second blob in pixel units.
    """
    if shift2 is None:
        shift2 = shift
    c = np.arange(g) - g / 2.0 + 0.5
    X, Y = np.meshgrid(c, c)  # Y varies along rows
    sig = g / 10.0
    c1 = (-g / 5.0 + shift[0], g / 8.0 + shift[1])
    c2 = (g / 6.0 + shift2[0], -g / 5.0 + shift2[1])
    img = np.exp(-((X - c1[0]) ** 2 + (Y - c1[1]) ** 2) / (2 * sig**2))
    img += 0.8 * np.exp(-((X - c2[0]) ** 2 + (Y - c2[1]) ** 2) / (2 * sig**2))
    return img.ravel()


def _angles(n_angles: int, offset: float) -> np.ndarray:
    return offset + 180.0 * np.arange(n_angles) / n_angles


def tomo_problem(g: int = 64, n_angles: int = 90, angle_offset: float = 0.0) -> TestProblem:
    if not 16 <= g <= 256:
        raise ValueError("grid size must lie in [16, 256]")
    if n_angles < 1:
        raise ValueError("need at least one angle")
    A = parallel_beam_matrix(g, _angles(n_angles, angle_offset))
    s = two_blob_phantom(g)
    return TestProblem(
        aslinearoperator(A, name="radon"), s, A @ s, GridGeometry((g, g)), f"tomo-{g}", A,
        {"kind": "tomo", "grid": g, "n_angles": n_angles, "angle_offset": angle_offset},
    )


@dataclass(frozen=True)
class DynamicPrior:
    """Separable space-time prior ``Q = Q_t ⊗ Q_s``."""

    Qt: np.ndarray
    Qs: np.ndarray
    time_kernel: MaternKernel
    space_kernel: MaternKernel

    @property
    def op(self) -> LinearOperator:
        return kron_operator(self.Qt, self.Qs, spd_hint=True)


def dynamic_problem(g: int = 32, n_times: int = 20, angles_per_time: int = 18,
                    time_kernel: MaternKernel | None = None,
                    space_kernel: MaternKernel | None = None) -> tuple[TestProblem, DynamicPrior]:
    """Frame ``i`` is observed with ``angles_per_time`` angles offset by ``i`` degrees.

    The phantom's blobs translate one pixel per frame, the first to the right
    and the second upward.
    """
    if g > 64 or n_times > 20:
        raise ValueError("dynamic problem is limited to g <= 64 and n_times <= 20")
    blocks, frames = [], []
    for i in range(n_times):
        blocks.append(parallel_beam_matrix(g, _angles(angles_per_time, float(i))))
        frames.append(two_blob_phantom(g, shift=(i - n_times / 2, 0.0), shift2=(0.0, i - n_times / 2)))
    A = sp.block_diag(blocks, format="csr")
    s = np.concatenate(frames)
    tk = time_kernel or MaternKernel(2.5, 0.1)
    sk = space_kernel or MaternKernel(0.5, 0.25)
    Qt = assemble_covariance(tk, GridGeometry((n_times,))).matrix
    Qs = assemble_covariance(sk, GridGeometry((g, g))).matrix
    tp = TestProblem(
        aslinearoperator(A, name="dynamic-radon"), s, A @ s, GridGeometry((g, g)), f"dynamic-{g}x{n_times}", A,
        {"kind": "dynamic", "grid": g, "n_times": n_times, "angles_per_time": angles_per_time},
    )
    return tp, DynamicPrior(Qt, Qs, tk, sk)


# ---------------------------------------------------------------- noise


@dataclass(frozen=True)
class NoiseModel:
    """White noise ``N(0, σ² I)``; ``rinv_diag`` is the diagonal of ``R^{-1}``."""

    sigma: float
    m: int

    @property
    def rinv_diag(self) -> np.ndarray:
        return np.full(self.m, 1.0 / self.sigma**2)


def add_noise(d_clean: np.ndarray, level: float, seed: int) -> tuple[np.ndarray, NoiseModel]:
    """Add white noise scaled so that ``E|δ|² = level² |d_clean|²``."""
    if level <= 0:
        raise ValueError("noise level must be positive")
    d_clean = np.asarray(d_clean, dtype=float)
    m = d_clean.size
    sigma = level * float(np.linalg.norm(d_clean)) / math.sqrt(m)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E6F697365]))
    return d_clean + sigma * rng.standard_normal(m), NoiseModel(sigma, m)


# ---------------------------------------------------------------- serialization


def save_problem(path, tp: TestProblem, d: np.ndarray | None = None, noise: NoiseModel | None = None) -> None:
    """Write ``A.mtx`` (coordinate), vector files (array) and ``problem.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if tp.matrix is None:
        raise ValueError("problem has no explicit matrix to serialize")
    io.write_mm(path / "A.mtx", sp.csr_matrix(tp.matrix))
    io.write_mm(path / "s_true.mtx", tp.s_true)
    io.write_mm(path / "d_clean.mtx", tp.d_clean)
    meta = {"label": tp.label, "dims": list(tp.geometry.dims), "extent": list(tp.geometry.extent), **tp.meta}
    if d is not None:
        io.write_mm(path / "d.mtx", d)
    if noise is not None:
        meta["sigma"] = noise.sigma
    io.write_json(path / "problem.json", meta)


def load_problem(path) -> tuple[TestProblem, np.ndarray | None, NoiseModel | None]:
    path = Path(path)
    meta = io.read_json(path / "problem.json")
    A = io.read_mm(path / "A.mtx")
    s = io.read_mm(path / "s_true.mtx")
    dc = io.read_mm(path / "d_clean.mtx")
    d = io.read_mm(path / "d.mtx") if (path / "d.mtx").exists() else None
    noise = NoiseModel(meta["sigma"], A.shape[0]) if "sigma" in meta else None
    extra = {k: v for k, v in meta.items() if k not in ("label", "dims", "extent", "sigma")}
    geom = GridGeometry(tuple(meta["dims"]), tuple(meta["extent"]))
    return TestProblem(aslinearoperator(A), s, dc, geom, meta["label"], A, extra), d, noise

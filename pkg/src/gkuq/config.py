"""Experiment configuration schema and the pipeline pieces it drives."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import problems as P
from .gengk import ProblemInstance
from .operators import kron_operator
from .priors import (
    GridGeometry,
    IdentityPreconditioner,
    KronPreconditioner,
    MaternKernel,
    assemble_covariance,
    build_laplacian_preconditioner,
    gamma_for_nu,
)


class ConfigError(ValueError):
    """Invalid or unreadable configuration (CLI exit code 2)."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KernelSpec(_Strict):
    nu: float = 0.5
    ell: float = Field(0.1, gt=0)
    variance: float = Field(1.0, gt=0)

    @field_validator("nu")
    @classmethod
    def _nu(cls, v):
        if v not in (0.5, 1.5, 2.5):
            raise ValueError("nu must be 0.5, 1.5 or 2.5")
        return v

    def kernel(self) -> MaternKernel:
        return MaternKernel(self.nu, self.ell, self.variance)


class GridSpec(_Strict):
    dims: list[int]
    extent: Optional[list[float]] = None


class ProblemSpec(_Strict):
    kind: Literal["heat", "tomo", "dynamic", "file"]
    n: int = 256
    kappa: float = 1.0
    grid: int = 64
    n_angles: int = 90
    angle_offset: float = 0.0
    n_times: int = 20
    angles_per_time: int = 18
    path: Optional[str] = None


class PriorSpec(_Strict):
    kernel: Optional[KernelSpec] = None
    grid: Optional[GridSpec] = None
    time_kernel: Optional[KernelSpec] = None


class NoiseSpec(_Strict):
    level: float = Field(0.01, gt=0)


class SolverSpec(_Strict):
    max_k: int = Field(100, ge=1)
    tol: float = Field(1e-4, gt=0)
    reorth: bool = True
    weight: float = Field(1.0, gt=0, le=1)
    # fixed lambda overrides GCV selection (prior covariance lambda^-2 Q)
    lam: Optional[float] = Field(None, alias="lambda", ge=0)

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class UQSpec(_Strict):
    k_max: int = Field(50, ge=1)
    probes: int = Field(100, ge=1)
    simplified_kl: bool = True
    # "backward" anchors the omega recurrence at the exhausted factorization;
    # "auto" does so when n <= backward_limit
    omega_mode: Literal["forward", "backward", "auto"] = "auto"
    backward_limit: int = Field(1024, ge=1)


class SamplerSpec(_Strict):
    method: Literal[1, 2] = 1
    N: int = Field(10, ge=1)
    tol: float = Field(1e-6, gt=0)
    max_k: Optional[int] = Field(None, ge=1)
    precondition: bool = True
    gamma: Optional[float] = Field(None, gt=0)
    lowrank_F: bool = False


class ExperimentConfig(_Strict):
    problem: ProblemSpec
    prior: PriorSpec = PriorSpec()
    noise: NoiseSpec = NoiseSpec()
    seed: int = Field(0, ge=0, lt=2**64)
    solver: SolverSpec = SolverSpec()
    uq: UQSpec = UQSpec()
    sampler: SamplerSpec = SamplerSpec()
    output: Optional[str] = None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- pipeline assembly


_DEFAULT_KERNELS = {
    "heat": KernelSpec(nu=0.5, ell=0.1),
    "tomo": KernelSpec(nu=0.5, ell=0.25),
    "file": KernelSpec(nu=0.5, ell=0.25),
    "dynamic": KernelSpec(nu=0.5, ell=0.25),
}


@dataclass
class Setup:
    """Everything a command needs: the test problem, noisy data and prior."""

    test: P.TestProblem
    problem: ProblemInstance
    noise: P.NoiseModel
    Q_matrix: Optional[np.ndarray]
    Q_factors: Optional[tuple]
    space_kernel: MaternKernel
    space_geometry: GridGeometry

    def norms_Q(self) -> tuple[float, float]:
        """``(‖Q‖₂, ‖Q‖_F)``; Kronecker norms factor exactly."""
        if self.Q_factors is not None:
            Qt, Qs = self.Q_factors
            return (float(np.linalg.norm(Qt, 2) * np.linalg.norm(Qs, 2)),
                    float(np.linalg.norm(Qt) * np.linalg.norm(Qs)))
        return float(np.linalg.norm(self.Q_matrix, 2)), float(np.linalg.norm(self.Q_matrix))


def build_test_problem(spec: ProblemSpec):
    if spec.kind == "heat":
        return P.heat_problem(spec.n, spec.kappa), None
    if spec.kind == "tomo":
        return P.tomo_problem(spec.grid, spec.n_angles, spec.angle_offset), None
    if spec.kind == "dynamic":
        return P.dynamic_problem(spec.grid, spec.n_times, spec.angles_per_time)
    if spec.path is None:
        raise ConfigError("problem.kind 'file' needs problem.path")
    try:
        tp, d, noise = P.load_problem(spec.path)
    except FileNotFoundError as exc:
        raise ConfigError(f"cannot load problem from {spec.path}: {exc}") from exc
    return tp, (d, noise)


def build_setup(cfg: ExperimentConfig, seed: int | None = None) -> Setup:
    seed = cfg.seed if seed is None else seed
    tp, dyn = build_test_problem(cfg.problem)
    kind = cfg.problem.kind
    kspec = cfg.prior.kernel or _DEFAULT_KERNELS[kind]
    if kind == "dynamic":
        tk = cfg.prior.time_kernel.kernel() if cfg.prior.time_kernel else dyn.time_kernel
        sk = kspec.kernel() if cfg.prior.kernel else dyn.space_kernel
        g = cfg.problem.grid
        sgeom = GridGeometry((g, g))
        Qt = assemble_covariance(tk, GridGeometry((cfg.problem.n_times,))).matrix
        Qs = assemble_covariance(sk, sgeom).matrix if cfg.prior.kernel else dyn.Qs
        Q_op, Qm, factors = kron_operator(Qt, Qs, spd_hint=True), None, (Qt, Qs)
    else:
        sk = kspec.kernel()
        if cfg.prior.grid is not None:
            sgeom = GridGeometry(tuple(cfg.prior.grid.dims),
                                 None if cfg.prior.grid.extent is None else tuple(cfg.prior.grid.extent))
        else:
            sgeom = tp.geometry
        if sgeom.size != tp.n:
            raise ConfigError(f"prior grid has {sgeom.size} points but the problem has {tp.n} unknowns")
        cov = assemble_covariance(sk, sgeom)
        Q_op, Qm, factors = cov.op, cov.matrix, None
    if kind == "file" and dyn[0] is not None and dyn[1] is not None:
        d, noise = dyn  # stored data are used as-is
    else:
        d, noise = P.add_noise(tp.d_clean, cfg.noise.level, seed)
    problem = ProblemInstance(tp.A, Q_op, d, noise.rinv_diag, lam=cfg.solver.lam)
    return Setup(tp, problem, noise, Qm, factors, sk, sgeom)


def build_preconditioner(setup: Setup, spec: SamplerSpec):
    """``(-Δ)^γ`` on the spatial grid, combined in time with a Cholesky factor of ``Q_t⁻¹``."""
    if not spec.precondition:
        return None
    gamma = spec.gamma if spec.gamma is not None else gamma_for_nu(setup.space_kernel.nu)
    Gs = build_laplacian_preconditioner(setup.space_geometry, gamma)
    if setup.Q_factors is not None:
        return KronPreconditioner.from_temporal_covariance(setup.Q_factors[0], Gs)
    return Gs


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "Setup",
    "build_setup",
    "build_preconditioner",
    "IdentityPreconditioner",
]

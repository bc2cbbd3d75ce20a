"""Krylov-based uncertainty quantification for large linear Bayesian inverse problems.

The package computes MAP estimates with a generalized Golub-Kahan hybrid
solver, reuses the same Krylov basis for a low-rank posterior approximation
with computable error bounds, and draws posterior samples with
preconditioned Lanczos methods.
"""

__version__ = "0.1.0"

from .gengk import GenGKFactorization, HybridResult, ProblemInstance, gen_gk, gen_gk_step, hybrid_solve
from .operators import LinearOperator, aslinearoperator, kron_operator
from .posterior import LowRankPosterior, omega_sequence, theta_sequence

__all__ = [
    "__version__",
    "LinearOperator",
    "aslinearoperator",
    "kron_operator",
    "ProblemInstance",
    "GenGKFactorization",
    "HybridResult",
    "gen_gk",
    "gen_gk_step",
    "hybrid_solve",
    "LowRankPosterior",
    "omega_sequence",
    "theta_sequence",
]

"""Command-line driver: ``gkuq {solve,uq,sample,gen-problem} --config run.json``.

Every command reads a JSON experiment config, writes CSV traces, Matrix
Market arrays and a JSON manifest into ``--out``, and exits with 0 on
success, 1 on a runtime failure and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, io
from .config import ConfigError, ExperimentConfig, build_preconditioner, build_setup, load_config
from .gengk import GENGK_TRACE_COLUMNS, gen_gk, hybrid_solve
from .lanczos import LANCZOS_TRACE_COLUMNS
from .oracle import ORACLE_LIMIT, dense_gaussian_kl, dense_posterior
from .posterior import (
    UQ_TRACE_COLUMNS,
    exact_initializers,
    hutchinson_estimates,
    misfit_prior_operator,
    uq_trace,
)
from .problems import save_problem
from .samplers import draw_samples, method1_setup, method2_setup, sample_diagnostics, standard_normal

log = logging.getLogger("gkuq")

ORACLE_COLUMNS = ["omega_true", "theta_true", "cov_err_true", "dkl_true", "dkl_err_true", "dkl_post_true"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- shared plumbing


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.output or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg: ExperimentConfig) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    if not 0 <= seed < 2**64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    return seed


def _manifest(cfg: ExperimentConfig, seed: int, command: str, **fields) -> dict:
    dumped = cfg.model_dump(mode="json", by_alias=True)
    return {
        "command": command,
        "config": dumped,
        "config_hash": io.config_hash(dumped),
        "seed": seed,
        "version": __version__,
        **fields,
    }


def _solve(setup, cfg: ExperimentConfig):
    s = cfg.solver
    return hybrid_solve(setup.problem, max_k=s.max_k, tol=s.tol, reorth=s.reorth, weight=s.weight, lam=s.lam)


# ---------------------------------------------------------------- commands


def cmd_solve(args, cfg: ExperimentConfig) -> int:
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    setup = build_setup(cfg, seed)
    t1 = time.perf_counter()
    res = _solve(setup, cfg)
    t2 = time.perf_counter()
    io.write_mm(out / "map_estimate.mm", res.s_k)
    io.write_csv(out / "trace.csv", res.trace, GENGK_TRACE_COLUMNS)
    s_true = setup.test.s_true
    rel = float(np.linalg.norm(res.s_k - s_true) / np.linalg.norm(s_true))
    io.write_json(out / "run_manifest.json", _manifest(
        cfg, seed, "solve", k=res.k, **{"lambda": res.lam}, lambda2=res.lambda2, stop_reason=res.stop_reason,
        relative_error=rel, timings={"setup_s": t1 - t0, "solve_s": t2 - t1}))
    print(f"k={res.k} lambda2={res.lambda2:.6g} stop={res.stop_reason} rel_error={rel:.4g}")
    return 0


def _oracle_columns(rows, setup, fact, lam, simplified):
    dense = dense_posterior(setup.problem, lam)
    G_post = dense.Gamma_post
    dkl = dense.kl_post_prior_simplified() if simplified else dense.kl_post_prior()
    mu = setup.problem.mu
    for r in rows:
        k = r["k"]
        V, T = fact.V[:, :k], fact.T[:k, :k]
        G_hat = dense.Gamma_hat(V, T)
        s_hat = mu + G_hat @ (dense.A.T @ (dense.rinv * dense.b))
        r["omega_true"] = dense.omega(V, T)
        r["theta_true"] = dense.theta(V, T)
        r["cov_err_true"] = float(np.linalg.norm(G_post - G_hat))
        r["dkl_true"] = dkl
        r["dkl_err_true"] = abs(dkl - r["dkl_hat"])
        r["dkl_post_true"] = dense_gaussian_kl(s_hat, G_hat, dense.s_post, G_post)


def cmd_uq(args, cfg: ExperimentConfig) -> int:
    if cfg.solver.lam is not None and cfg.solver.lam == 0:
        raise ConfigError("the error bounds are undefined for lambda = 0")
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    setup = build_setup(cfg, seed)
    res = _solve(setup, cfg)
    lam = res.lam
    if not lam > 0:
        raise ConfigError("the error bounds are undefined for lambda = 0")
    problem = setup.problem.with_lambda(lam)
    n = problem.n
    u = cfg.uq
    if n <= ORACLE_LIMIT:
        omega0_sq, theta0 = exact_initializers(problem)
        init = {"method": "dense", "omega0_sq": omega0_sq, "theta0": theta0}
    else:
        h = hutchinson_estimates(misfit_prior_operator(problem), u.probes, seed)
        omega0_sq, theta0 = h.frobsq, h.trace
        init = {"method": "hutchinson", "omega0_sq": omega0_sq, "theta0": theta0, "probes": h.probes,
                "omega0_sq_se": h.frobsq_se, "theta0_se": h.trace_se}
    backward = u.omega_mode == "backward" or (u.omega_mode == "auto" and n <= u.backward_limit)
    k_run = n + 1 if backward else u.k_max
    fact = gen_gk(problem, k_run, reorth=cfg.solver.reorth)
    terminal = None
    if backward:
        if not fact.terminated:
            raise RuntimeError("backward omega needs an exhausted factorization")
        terminal = 0.0
    normQ2, normQF = setup.norms_Q()
    rows = uq_trace(fact, lam, omega0_sq, theta0, normQ2, normQF, k_max=u.k_max, omega_terminal_sq=terminal,
                    simplified_kl=u.simplified_kl)
    columns = UQ_TRACE_COLUMNS + ["dkl_hat_full", "dkl_hat_simplified"]
    if args.with_oracle:
        if n > ORACLE_LIMIT:
            raise UsageError(f"--with-oracle needs n <= {ORACLE_LIMIT}, got n={n}")
        _oracle_columns(rows, setup, fact, lam, u.simplified_kl)
        columns += ORACLE_COLUMNS
    io.write_csv(out / "uq_trace.csv", rows, columns)
    io.write_json(out / "uq_manifest.json", _manifest(
        cfg, seed, "uq", **{"lambda": lam}, lambda2=lam * lam, k_solve=res.k, rows=len(rows),
        omega_mode="backward" if backward else "forward", factorization_k=fact.k, initializers=init,
        norm_Q_2=normQ2, norm_Q_F=normQF, timings={"total_s": time.perf_counter() - t0}))
    print(f"wrote {len(rows)} rows to {out / 'uq_trace.csv'} (lambda2={lam * lam:.6g})")
    return 0


def cmd_sample(args, cfg: ExperimentConfig) -> int:
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    sp = cfg.sampler
    t0 = time.perf_counter()
    setup = build_setup(cfg, seed)
    res = _solve(setup, cfg)
    if not res.lam > 0:
        raise ConfigError("sampling needs lambda > 0")
    problem = setup.problem.with_lambda(res.lam)
    G = build_preconditioner(setup, sp)
    t1 = time.perf_counter()
    if sp.method == 1:
        sampler = method1_setup(res, problem, G, tol=sp.tol, max_k=sp.max_k or 300)
        precompute = list(sampler.precompute_iters)
    else:
        sampler = method2_setup(res, problem, G, tol=sp.tol, max_k=sp.max_k or 500, lowrank=sp.lowrank_F)
        precompute = []
    t2 = time.perf_counter()
    ss = draw_samples(sampler, sp.N, seed)
    t3 = time.perf_counter()
    io.write_mm(out / "samples.mm", ss.samples)
    mean = ss.samples.mean(axis=1)
    var = ss.samples.var(axis=1, ddof=1) if sp.N > 1 else np.zeros_like(mean)
    summary = [{"quantity": "precompute_iters", "index": j, "value": v} for j, v in enumerate(precompute)]
    summary += [{"quantity": "mean", "index": j, "value": v} for j, v in enumerate(mean)]
    summary += [{"quantity": "variance", "index": j, "value": v} for j, v in enumerate(var)]
    io.write_csv(out / "summary.csv", summary, ["quantity", "index", "value"])
    trace = sample_diagnostics(sampler, standard_normal(seed, 0, problem.n))
    io.write_csv(out / "lanczos_trace.csv", trace, LANCZOS_TRACE_COLUMNS)
    if ss.warnings:
        log.warning("%d of %d samples hit the iteration cap", ss.warnings, sp.N)
    io.write_json(out / "sample_manifest.json", _manifest(
        cfg, seed, "sample", method=sp.method, N=sp.N, k=res.k, **{"lambda": res.lam}, lambda2=res.lambda2,
        tol=sp.tol, preconditioned=G is not None, precompute_iters=precompute,
        iterations=ss.iterations, e_tilde=ss.e_tilde, converged=ss.converged, warnings=ss.warnings,
        mean_iterations=float(np.mean(ss.iterations)),
        timings={"solve_s": t1 - t0, "precompute_s": t2 - t1, "sampling_s": t3 - t2}))
    print(f"method {sp.method}: {sp.N} samples, mean iterations {np.mean(ss.iterations):.1f}, "
          f"warnings {ss.warnings}")
    return 0


def cmd_gen_problem(args, cfg: ExperimentConfig) -> int:
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    setup = build_setup(cfg, seed)
    save_problem(out, setup.test, setup.problem.d, setup.noise)
    io.write_json(out / "gen_manifest.json", _manifest(cfg, seed, "gen-problem", n=setup.problem.n,
                                                       m=setup.problem.m))
    print(f"wrote {setup.test.label} problem (m={setup.problem.m}, n={setup.problem.n}) to {out}")
    return 0


COMMANDS = {"solve": cmd_solve, "uq": cmd_uq, "sample": cmd_sample, "gen-problem": cmd_gen_problem}


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gkuq", description="Hybrid gen-GK solves, UQ diagnostics and posterior sampling.")
    p.add_argument("--version", action="version", version=f"gkuq {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in [("solve", "MAP estimate with GCV-selected lambda"),
                        ("uq", "omega/theta recurrences and error bounds per iteration"),
                        ("sample", "posterior samples with Method 1 or Method 2"),
                        ("gen-problem", "write a test problem to disk")]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=_u64, default=None, help="overrides the config seed")
        sp.add_argument("--out", default=None, help="output directory")
        if name == "uq":
            sp.add_argument("--with-oracle", action="store_true", help="add dense true-error columns")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"gkuq: usage error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if not args.verbose:
            warnings.simplefilter("ignore", category=RuntimeWarning)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"gkuq: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"gkuq: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())

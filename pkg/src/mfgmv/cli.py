"""Command-line driver: ``mfgmv {solve,validate,simulate,export}``.

Exit codes: 0 success, 1 configuration or input error, 2 no convergence,
3 invariant violation, 4 validation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidParameter, MFGError, NoConvergence
from .fixedpoint import epsilon_continuation
from .io import EngineConfig, load_checkpoint, load_solution, save_solution, write_csv
from .mollify import MollifierKernel
from .simulate import lift_paths, simulate_aux_paths
from .validate import run_battery

EXIT_OK, EXIT_CONFIG, EXIT_NOCONV, EXIT_INVARIANT, EXIT_VALIDATION = 0, 1, 2, 3, 4

log = logging.getLogger("mfgmv")


def _setup_logging(level: str):
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _fail(code: str, exit_code: int, msg: str) -> int:
    log.error("code=%s exit=%d %s", code, exit_code, msg)
    return exit_code


def _out_dir(args, cfg: EngineConfig) -> Path:
    return Path(args.out) if args.out else cfg.base_dir / cfg["output"]["dir"]


def cmd_solve(args) -> int:
    cfg = EngineConfig.load(args.config)
    problem = cfg.problem()
    fp = cfg.fixed_point(args.epsilon_floor)
    out = _out_dir(args, cfg)
    try:
        eq = epsilon_continuation(problem, fp)
    except NoConvergence as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None and partial.records:
            save_solution(out, partial, cfg)
        return _fail(exc.code, EXIT_NOCONV, str(exc))
    save_solution(out, eq, cfg)
    bad = [f"eps={r.epsilon:g}: {','.join(r.invariants.failed)}" for r in eq.records if not r.invariants.passes]
    if bad:
        return _fail("invariant_violation", EXIT_INVARIANT, "; ".join(bad))
    f = eq.final
    log.info("solved: eps=%g residual=%.3e iterations=%d out=%s", f.epsilon, f.residual, f.iterations, out)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = EngineConfig.load(args.config)
    problem = cfg.problem()
    fp = cfg.fixed_point(args.epsilon_floor)
    out = _out_dir(args, cfg)
    eq = load_solution(out, problem, fp.kernel_kind)
    rep = run_battery(problem, eq, fp, seed=args.seed, n_paths=args.paths or 100_000,
                      drift_hook=args.bias_drift)
    (out / "validation.txt").write_text(rep.to_kv())
    (out / "validation.csv").write_text(rep.to_csv())
    if not rep.passed:
        return _fail("validation_failed", EXIT_VALIDATION, "failed checks: " + ", ".join(rep.failed))
    log.info("validation passed (%d checks)", len(rep.entries))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = EngineConfig.load(args.config)
    problem = cfg.problem()
    fp = cfg.fixed_point(args.epsilon_floor)
    out = _out_dir(args, cfg)
    n_paths = cfg["fixedpoint"]["paths"] if args.paths is None else args.paths
    if n_paths < 1:
        raise InvalidParameter(f"--paths must be at least 1, got {n_paths}")
    eq = load_solution(out, problem, fp.kernel_kind)
    rec = eq.final
    kernel = MollifierKernel(fp.kernel_kind, rec.epsilon)
    b = simulate_aux_paths(rec.sol, problem.xi, kernel, problem.dm, problem.prefs, rec.m, n_paths, args.seed)
    lift_paths(b, rec.sol, problem.dm, problem.prefs, kernel, rec.m)
    k = min(n_paths, args.csv_paths)
    idx = np.repeat(np.arange(k), len(b.t))
    tt = np.tile(b.t, k)
    write_csv(out / "paths.csv", ["path", "t", "x", "X", "P", "Q_norm", "pi_norm"],
              [idx, tt, b.x[:k].ravel(), b.X[:k].ravel(), b.P_adj[:k].ravel(),
               np.linalg.norm(b.Q_adj[:k], axis=2).ravel(), np.linalg.norm(b.pi_bar[:k], axis=2).ravel()])
    mean = b.X.mean(axis=0)
    se = b.X.std(axis=0, ddof=1) / np.sqrt(n_paths) if n_paths > 1 else np.zeros_like(mean)
    m = rec.m(b.t)
    tol = 3.0 * se + 5.0 * problem.grid.dx ** 2
    ok = np.abs(mean - m) <= tol
    write_csv(out / "mc_vs_m.csv", ["t", "mc_mean", "se", "m", "abs_dev", "within_tol"],
              [b.t, mean, se, m, np.abs(mean - m), ok.astype(float)])
    if n_paths > 1 and not ok.all():
        return _fail("mc_mismatch", EXIT_VALIDATION,
                     f"Monte Carlo mean outside 3*SE + 5*dx^2 at {int((~ok).sum())} record times")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = EngineConfig.load(args.config)
    out = _out_dir(args, cfg)
    sol = load_checkpoint(out / "u.ckpt")
    g = sol.grid
    T, X = np.meshgrid(g.t, g.x, indexing="ij")
    write_csv(out / "u.csv", ["t", "x", "u", "ux"], [T.ravel(), X.ravel(), sol.u.ravel(), sol.ux.ravel()])
    log.info("exported %d nodes to %s", sol.u.size, out / "u.csv")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "validate": cmd_validate, "simulate": cmd_simulate, "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfgmv", description="Mean-field mean-variance equilibrium engine")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="solution directory (default: [output] dir from the config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paths", type=int)
    p.add_argument("--epsilon-floor", type=float, dest="epsilon_floor")
    p.add_argument("--log", choices=["error", "info", "debug"], default=None)
    p.add_argument("--csv-paths", type=int, default=1000, dest="csv_paths",
                   help="paths written to paths.csv by simulate")
    # negative-control hook: constant drift added to the simulated auxiliary state
    p.add_argument("--bias-drift", type=float, default=0.0, dest="bias_drift", help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    _setup_logging(args.log or "info")
    try:
        if args.log is None:
            try:
                level = EngineConfig.load(args.config)["output"]["log_level"]
                _setup_logging(level)
            except (ConfigError, AttributeError):
                pass
        return COMMANDS[args.command](args)
    except MFGError as exc:
        return _fail(exc.code, exc.exit_code, str(exc))
    except (OSError, ValueError) as exc:
        return _fail("input", EXIT_CONFIG, str(exc))


if __name__ == "__main__":
    sys.exit(main())

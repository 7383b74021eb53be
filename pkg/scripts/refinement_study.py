"""Grid refinement on the canonical piecewise case at a fixed epsilon.

Prints m(T), b(0), the fixed-point residual and runtime per grid, and the
successive differences, which should shrink under refinement.

    python scripts/refinement_study.py [--epsilon 0.05]
"""

import argparse
import time
from pathlib import Path

from mfgmv.fixedpoint import FixedPointConfig, Problem, epsilon_continuation
from mfgmv.io import EngineConfig
from mfgmv.pde import make_grid

ROOT = Path(__file__).resolve().parent.parent
GRIDS = ((201, 301), (401, 601), (801, 1201))


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(ROOT / "experiments" / "canonical_piecewise.cfg"))
    p.add_argument("--epsilon", type=float, default=0.05)
    args = p.parse_args()
    cfg = EngineConfig.load(args.config)
    base = cfg.problem()
    rows = []
    for nt, nx in GRIDS:
        grid = make_grid(base.dm, base.prefs, base.xi, nt, nx, cfg["grid"]["margin_factor"])
        prob = Problem(base.dm, base.prefs, base.xi, grid, base.scheme)
        fp = FixedPointConfig(epsilon_schedule=(args.epsilon,), damping=cfg["fixedpoint"]["damping"])
        t0 = time.perf_counter()
        rec = epsilon_continuation(prob, fp).final
        rows.append((nt, nx, float(rec.m.values[-1]), float(rec.boundary.b[0]), rec.residual,
                     time.perf_counter() - t0))
    print(f"{'nt':>5} {'nx':>5} {'m(T)':>20} {'b(0)':>20} {'residual':>10} {'sec':>6}")
    for r in rows:
        print(f"{r[0]:5d} {r[1]:5d} {r[2]:20.14f} {r[3]:20.14f} {r[4]:10.2e} {r[5]:6.2f}")
    for a, b in zip(rows, rows[1:]):
        print(f"{a[1]}->{b[1]}: |dm(T)| = {abs(a[2] - b[2]):.3e}  |db(0)| = {abs(a[3] - b[3]):.3e}")


if __name__ == "__main__":
    main()

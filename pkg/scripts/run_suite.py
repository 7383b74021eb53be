"""Run an experiment manifest and print one line per check.

    python scripts/run_suite.py [experiments/acceptance.manifest] [--work runs/suite]
"""

import argparse
import sys
from pathlib import Path

from mfgmv.bench import run_suite

ROOT = Path(__file__).resolve().parent.parent


def main():
    p = argparse.ArgumentParser()
    p.add_argument("manifest", nargs="?", default=str(ROOT / "experiments" / "acceptance.manifest"))
    p.add_argument("--work", default=str(ROOT / "runs" / "suite"))
    args = p.parse_args()
    rep = run_suite(args.manifest, args.work)
    for e in rep.entries:
        print(f"{'PASS' if e.passed else 'FAIL'}  {e.name}  value={e.value:.6g}  tol={e.tolerance:.6g}")
    Path(args.work).mkdir(parents=True, exist_ok=True)
    (Path(args.work) / "suite_report.txt").write_text(rep.to_kv())
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())

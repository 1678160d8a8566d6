"""Finite-difference sweep over layers, units, the building block and a tiny chain.

Writes one CSV row per checked tensor and exits nonzero if any probe fails.

    python3 scripts/gradient_sweep.py --seeds 10 --chain-seeds 3 --out runs/gradcheck.csv
"""

import argparse
import time
from pathlib import Path

from opticnet.gradcheck import chain_gradient_norm, run_suite, write_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--suite", default="all")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--chain-seeds", type=int, default=3)
    ap.add_argument("--out", default="runs/gradcheck.csv")
    args = ap.parse_args()

    t0 = time.perf_counter()
    reports = run_suite(args.suite, range(args.seeds), range(args.chain_seeds))
    worst = max(reports, key=lambda r: r.max_rel_error)
    failed = [r for r in reports if not r.passed]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(reports, args.out)

    by_name = {}
    for r in reports:
        by_name.setdefault(r.name, []).append(r.max_rel_error)
    for name, errs in by_name.items():
        print(f"{name:<34} n={len(errs):<3} max rel {max(errs):.2e}")
    print(f"worst: {worst.summary()}")
    print(f"input-gradient norm of the tiny chain (seed 0): {chain_gradient_norm(0):.4e}")
    print(f"{len(reports) - len(failed)}/{len(reports)} passed in {time.perf_counter() - t0:.1f}s -> {args.out}")
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()

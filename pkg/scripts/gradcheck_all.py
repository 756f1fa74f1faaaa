"""Finite-difference check of every layer's backward pass, plus the whole network end to end.

    python3 scripts/gradcheck_all.py --seeds 20 --json gradcheck.json
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict

from resemote.gradcheck import run_suite


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--eps", type=float, default=1e-4)
    ap.add_argument("--json", help="write per-layer results here")
    args = ap.parse_args()

    start = time.perf_counter()
    entries = run_suite(seeds=args.seeds, eps=args.eps)
    elapsed = time.perf_counter() - start
    for e in entries:
        print(f"{e.name:<28} {e.worst:10.2e}  tol {e.tol:g}  {'pass' if e.passed else 'FAIL'}")
    print(f"{sum(e.passed for e in entries)}/{len(entries)} passed in {elapsed:.1f}s")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump([asdict(e) | {"passed": e.passed} for e in entries], fh, indent=2)
    return 0 if all(e.passed for e in entries) else 1


if __name__ == "__main__":
    sys.exit(main())

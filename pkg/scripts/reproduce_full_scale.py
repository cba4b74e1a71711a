#!/usr/bin/env python3
"""Full-size benchmark campaigns (multi-hour; not part of the test suite).

Runs every damper layout of the chain (n = 1900, 44 layouts) and/or the
two-line oscillator (d = 1000, 28 layouts) with the offline+online reduced
basis method and reports the best layout next to the reference optimum:

    example1: layout 34 (j=350, k=850), J ~ 5.141
    example2: layout 25 (j=850, k=1450), J ~ 761.7

Usage::

    python3 scripts/reproduce_full_scale.py --family example1 --out-dir results/
"""

import argparse
import logging
from pathlib import Path

from dampopt.bench import BenchmarkSpec, run_campaign

REFERENCE = {
    "example1": dict(scale=1900, best=34, J=5.141, tol_f=1e-3, opt_tol=1e-4),
    "example2": dict(scale=1000, best=25, J=761.7, tol_f=1e-2, opt_tol=5e-4),
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--family", choices=("example1", "example2", "both"), default="both")
    p.add_argument("--methods", default="rbm", help="comma-separated subset of exact,rbm,adaptive")
    p.add_argument("--iter-max", type=int, default=30, help="sign-iteration budget")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out-dir", default=".")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    families = ("example1", "example2") if args.family == "both" else (args.family,)
    methods = tuple(m.strip() for m in args.methods.split(","))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ok = True
    for fam in families:
        ref = REFERENCE[fam]
        spec = BenchmarkSpec(fam, ref["scale"], tol_f=ref["tol_f"], opt_tol=ref["opt_tol"],
                             iter_max=args.iter_max)
        rows = run_campaign(spec, methods, workers=args.threads,
                            csv_path=out_dir / f"full_{fam}.csv")
        for method in methods:
            done = [r for r in rows if r.method == method and r.status == "converged"]
            if not done:
                print(f"{fam} {method}: no converged layout")
                ok = False
                continue
            best = min(done, key=lambda r: r.J_opt)
            hit = best.config_id == ref["best"]
            ok &= hit
            print(f"{fam} {method}: best layout {best.config_id} (j={best.j}, k={best.k}) "
                  f"J={best.J_opt:.4f} g={best.g_opt}; reference layout {ref['best']} "
                  f"J~{ref['J']} -> {'match' if hit else 'MISMATCH'}")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())

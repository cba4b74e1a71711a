"""Command-line interface: ``dampopt generate|offline|optimize|campaign|verify``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import bench
from .errors import DampOptError
from .lyap import GramianSolver

log = logging.getLogger("dampopt")

ENV_OUTPUT_DIR = "DAMPOPT_OUTPUT_DIR"
ENV_THREADS = "DAMPOPT_THREADS"


def _positive(cast):
    def parse(text):
        try:
            v = cast(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _float_list(text):
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def _default_threads():
    env = os.environ.get(ENV_THREADS)
    if env:
        return int(env)
    return os.cpu_count() or 1


def _output_dir(args):
    out = Path(args.output_dir or os.environ.get(ENV_OUTPUT_DIR) or ".")
    out.mkdir(parents=True, exist_ok=True)
    try:
        with tempfile.TemporaryFile(dir=out):
            pass
    except OSError as exc:
        raise DampOptError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _resolve(args, path):
    path = Path(path)
    return path if path.is_absolute() or path.parent != Path(".") else _output_dir(args) / path


def _add_solver_flags(p):
    g = p.add_argument_group("full-order Lyapunov solver")
    g.add_argument("--solver", choices=("auto", "dense", "sign"), default="auto")
    g.add_argument("--sign-tol", type=_positive(float), default=1e-6)
    g.add_argument("--iter-max", type=_positive(int), default=10)
    g.add_argument("--trunc-tol", type=_positive(float), default=1e-8)
    g.add_argument("--dense-cap", type=_positive(int), default=2000,
                   help="largest first-order dimension 2n solved densely")


def _add_rbm_flags(p):
    g = p.add_argument_group("reduced basis")
    g.add_argument("--tol-f", type=_positive(float), default=1e-3)
    g.add_argument("--basis-tol", type=_positive(float), default=1e-2,
                   help="relative singular-value cut for each new basis block")
    g.add_argument("--estimator", choices=("delta1", "delta2"), default="delta1")
    g.add_argument("--grid", type=_positive(int), default=None,
                   help="test-set size (default 36 for 2 gains, 21 otherwise)")


def _solver(args):
    return GramianSolver(method=args.solver, tol=args.sign_tol, iter_max=args.iter_max,
                         trunc_tol=args.trunc_tol, dense_cap=args.dense_cap)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dampopt", description="Optimal damping gains via reduced basis Lyapunov solves.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--output-dir", default=None,
                        help=f"directory for relative output paths (env {ENV_OUTPUT_DIR})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a benchmark system to a JSON file")
    p.add_argument("--family", choices=bench.FAMILIES, default="example1")
    size = p.add_mutually_exclusive_group()
    size.add_argument("--n", type=int, help="chain length (example1)")
    size.add_argument("--d", type=int, help="masses per line (example2)")
    p.add_argument("--config", type=_positive(int), default=1, help="1-based damper layout id")
    p.add_argument("--alpha", type=_positive(float), default=None)
    p.add_argument("--bounds", type=_float_list, default=None, metavar="LO,HI")
    p.add_argument("--out", default=None)

    p = sub.add_parser("offline", help="build a reduced basis for a system file")
    p.add_argument("system")
    _add_rbm_flags(p)
    _add_solver_flags(p)
    p.add_argument("--resume", default=None, help="start from this basis checkpoint")
    p.add_argument("--out", default="basis.npz")
    p.add_argument("--threads", type=_positive(int), default=None)

    p = sub.add_parser("optimize", help="optimise the gains of a system file")
    p.add_argument("system")
    p.add_argument("--method", choices=bench.METHODS, default="exact")
    p.add_argument("--g0", type=_float_list, default=None)
    p.add_argument("--opt-tol", type=_positive(float), default=1e-4)
    p.add_argument("--max-evals", type=_positive(int), default=2000)
    p.add_argument("--basis", default=None, help="basis checkpoint for --method rbm")
    p.add_argument("--csv", default=None)
    _add_rbm_flags(p)
    _add_solver_flags(p)

    p = sub.add_parser("campaign", help="optimise every damper layout of a benchmark")
    p.add_argument("--family", choices=bench.FAMILIES, default="example1")
    size = p.add_mutually_exclusive_group()
    size.add_argument("--n", type=int)
    size.add_argument("--d", type=int)
    p.add_argument("--methods", default="exact,rbm")
    p.add_argument("--configs", type=_int_list, default=None)
    p.add_argument("--opt-tol", type=_positive(float), default=1e-4)
    p.add_argument("--max-evals", type=_positive(int), default=2000)
    p.add_argument("--threads", type=_positive(int), default=None)
    p.add_argument("--out", default=None, help="CSV file name")
    _add_rbm_flags(p)
    _add_solver_flags(p)

    p = sub.add_parser("verify", help="run the built-in consistency checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _scale(args):
    if args.family == "example1":
        if args.d is not None:
            raise DampOptError("example1 is sized with --n")
        return args.n or bench.EXAMPLE1_N
    if args.n is not None:
        raise DampOptError("example2 is sized with --d")
    return args.d or bench.EXAMPLE2_D


def cmd_generate(args):
    from .model import save_system

    overrides = {}
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    spec = bench.BenchmarkSpec(args.family, _scale(args), overrides,
                               bounds=tuple(args.bounds) if args.bounds else None)
    n_cfg = len(spec.all_configs())
    if args.config > n_cfg:
        raise DampOptError(f"--config must be in 1..{n_cfg}")
    sys_ = spec.system(args.config)
    out = _resolve(args, args.out or f"{args.family}_{spec.scale}_c{args.config}.json")
    save_system(sys_, out)
    b = sys_.bounds
    print(f"{out}: n={sys_.n} m={sys_.m} p={sys_.p} gains={sys_.ell} "
          f"bounds=[{', '.join(f'({lo:g}, {hi:g})' for lo, hi in b)}]")
    return 0


def _load_modal(path):
    from .model import load_system, modal_transform

    return modal_transform(load_system(path))


def cmd_offline(args):
    from .rbm import ReducedBasis, offline_rbm

    out = _resolve(args, args.out)
    modal = _load_modal(args.system)
    D = bench.uniform_test_set(modal.bounds, args.grid or (36 if modal.ell == 2 else 21))
    start = ReducedBasis.load(args.resume) if args.resume else None
    rb = offline_rbm(modal, D, tol_f=args.tol_f, estimator=args.estimator, solver=_solver(args),
                     basis_tol=args.basis_tol, workers=args.threads or _default_threads(),
                     basis=start)
    rb.save(out)
    print(f"r={rb.r} r_err={rb.r_err} enrichments={len(rb.used_params) - 1}")
    for h in rb.history:
        print(f"  it={h['iteration']} delta_max={h['delta_max']:.3e} r={h['r']} r_err={h['r_err']}")
    print(f"basis written to {out}")
    return 0


def _outcome_row(out, modal):
    return bench.ConfigResult(
        0, 0, 0, out.method, tuple(float(x) for x in out.g_opt), float(out.J_opt.value),
        wall_time_s=float(out.wall_times.get("total", np.nan)), basis_r=out.basis_r,
        basis_re=out.basis_re, restarts=out.restarts if out.method == "adaptive" else None,
        status="converged" if out.converged else "not_converged", error=out.message)


def cmd_optimize(args):
    from .optimize import (adaptive_rbm_optimize, optimize_exact, optimize_reduced,
                           rbm_optimize)
    from .rbm import ReducedBasis

    csv_out = _resolve(args, args.csv) if args.csv else None
    modal = _load_modal(args.system)
    solver = _solver(args)
    D = bench.uniform_test_set(modal.bounds, args.grid or (36 if modal.ell == 2 else 21))
    if args.g0 is not None and len(args.g0) != modal.ell:
        raise DampOptError(f"--g0 needs {modal.ell} values")
    if args.method == "exact":
        out = optimize_exact(modal, args.g0, opt_tol=args.opt_tol, solver=solver,
                             max_evals=args.max_evals)
    elif args.method == "rbm":
        if args.basis:
            out = optimize_reduced(modal, ReducedBasis.load(args.basis), args.g0, args.opt_tol,
                                   args.max_evals)
        else:
            out = rbm_optimize(modal, D, args.g0, tol_f=args.tol_f, opt_tol=args.opt_tol,
                               solver=solver, basis_tol=args.basis_tol,
                               estimator=args.estimator, max_evals=args.max_evals)
    else:
        out = adaptive_rbm_optimize(modal, args.g0, D_test=D, tol_f=args.tol_f,
                                    opt_tol=args.opt_tol, solver=solver,
                                    basis_tol=args.basis_tol, estimator=args.estimator,
                                    max_evals=args.max_evals)
    g = ", ".join(f"{x:.6g}" for x in out.g_opt)
    print(f"method={out.method} converged={out.converged} g_opt=({g}) J={out.J_opt.value:.10g} "
          f"evals={out.evals} time={out.wall_times.get('total', float('nan')):.3f}s")
    if out.basis_sizes:
        print(f"basis r={out.basis_r} r_err={out.basis_re} restarts={out.restarts}")
    if out.message:
        print(out.message)
    row = _outcome_row(out, modal)
    text = bench.write_results_csv([row], csv_out)
    if csv_out is None:
        sys.stdout.write(text)
    return 0 if out.converged else 1


def cmd_campaign(args):
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    unknown = set(methods) - set(bench.METHODS)
    if unknown:
        raise DampOptError(f"unknown methods {sorted(unknown)}")
    spec = bench.BenchmarkSpec(
        args.family, _scale(args), configs=tuple(args.configs) if args.configs else None,
        grid_size=args.grid, tol_f=args.tol_f, opt_tol=args.opt_tol, basis_tol=args.basis_tol,
        estimator=args.estimator, sign_tol=args.sign_tol, iter_max=args.iter_max,
        trunc_tol=args.trunc_tol, dense_cap=args.dense_cap, max_evals=args.max_evals)
    out = _resolve(args, args.out or f"campaign_{spec.family}_{spec.scale}.csv")
    results = bench.run_campaign(spec, methods, workers=args.threads or _default_threads(),
                                 csv_path=out)
    for r in results:
        err = "" if r.rel_gain_err is None else f" rel_gain_err={r.rel_gain_err:.2e}"
        print(f"config {r.config_id:3d} ({r.j},{r.k}) {r.method:8s} J={r.J_opt:.8g} "
              f"{r.status}{err}")
    best = {}
    for r in results:
        if r.status == "converged" and (r.method not in best or r.J_opt < best[r.method].J_opt):
            best[r.method] = r
    for m, r in best.items():
        print(f"best {m}: config {r.config_id} ({r.j},{r.k}) J={r.J_opt:.8g}")
    print(f"results written to {out}")
    return 0 if all(r.status == "converged" for r in results) else 1


def cmd_verify(args):
    from .checks import run_checks

    ok = True
    for name, passed, detail in run_checks(seed=args.seed):
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return 0 if ok else 1


COMMANDS = {"generate": cmd_generate, "offline": cmd_offline, "optimize": cmd_optimize,
            "campaign": cmd_campaign, "verify": cmd_verify}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DampOptError, OSError, ValueError) as exc:
        print(f"dampopt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

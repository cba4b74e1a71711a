"""Benchmark families, damping configurations and campaign runner.

Both families are generated at arbitrary scale.  At the reference size
(``n = 1900`` for the chain, ``d = 1000`` for the two-line oscillator) every
index, mass and window is the published one; smaller instances place all
windows, mass-law breakpoints and damper positions at the same relative
locations.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConstructionError, DampOptError

log = logging.getLogger(__name__)

EXAMPLE1_N = 1900
EXAMPLE2_D = 1000


def _round(x):
    return int(math.floor(x + 0.5))


def _scaled(index, scale):
    return _round(index * scale)


# ---------------------------------------------------------------------------
# Example 1: chain with neighbour and next-neighbour springs


def chain_stiffness(k):
    """Pentadiagonal stiffness of the chain from spring constants ``k_1..k_{n+1}``.

    Diagonal ``2 k_j + 2 k_{j+1}``, neighbour coupling ``-k_{j+1}`` between
    masses ``j`` and ``j+1`` and next-neighbour coupling ``-k_{j+2}`` between
    ``j`` and ``j+2``.  Symmetric by construction.
    """
    k = np.asarray(k, dtype=float)
    n = k.shape[0] - 1
    K = np.diag(2.0 * k[:-1] + 2.0 * k[1:])
    j = np.arange(n - 1)
    K[j, j + 1] = K[j + 1, j] = -k[j + 1]
    j = np.arange(n - 2)
    K[j, j + 2] = K[j + 2, j] = -k[j + 2]
    return K


def example1_masses(n):
    """Piecewise mass law evaluated at the reference coordinate ``t = j*1900/n``."""
    t = np.arange(1, n + 1) * (EXAMPLE1_N / n)
    if n == EXAMPLE1_N:
        t = np.arange(1, n + 1, dtype=float)
    return np.where(t <= 475.0 + 1e-9, 144.0 - 0.15 * t, t / 10.0 + 25.0)


def example1_dampers(n, j, k):
    """Grounded dampers at masses ``j, j+1, k, k+1`` (1-based), gains (g1,g1,g2,g2)."""
    if not (1 <= j < n and 1 <= k < n):
        raise ConstructionError(f"damper positions ({j}, {k}) outside 1..{n - 1}")
    F = np.zeros((n, 4))
    for col, pos in enumerate((j, j + 1, k, k + 1)):
        F[pos - 1, col] = 1.0
    return F, np.array([0, 0, 1, 1])


def example1_configs(n=EXAMPLE1_N):
    """The 44 damper placements ``(j, k)``, j-major then ascending k."""
    s = n / EXAMPLE1_N
    js = [50, 150, 250, 350]
    ks = list(range(850, 1851, 100))
    out = []
    for j in js:
        for k in ks:
            jj = min(max(_scaled(j, s), 1), n - 1)
            kk = min(max(_scaled(k, s), 1), n - 1)
            out.append((jj, kk))
    return out


def example1_system(n=EXAMPLE1_N, config=None, alpha=0.005, stiffness=500.0,
                    bounds=(500.0, 4000.0)):
    """Chain of ``n`` masses with the published mass law and input/output maps.

    ``config`` is a ``(j, k)`` damper placement (defaults to the first one);
    ``stiffness`` is a scalar or an array of ``n+1`` spring constants.
    """
    if n < 40:
        raise ConstructionError(f"example 1 needs n >= 40 to host the input block, got {n}")
    from .model import SecondOrderSystem

    s = n / EXAMPLE1_N
    k = np.broadcast_to(np.asarray(stiffness, dtype=float), (n + 1,)).copy() \
        if np.ndim(stiffness) == 0 else np.asarray(stiffness, dtype=float)
    if k.shape != (n + 1,):
        raise ConstructionError(f"stiffness must be scalar or of length {n + 1}")
    M = np.diag(example1_masses(n))
    K = chain_stiffness(k)

    start = _scaled(471, s)
    if start + 9 > n:
        raise ConstructionError(f"n={n} too small to host the input block")
    B = np.zeros((n, 10))
    weights = [10, 20, 30, 40, 50, 50, 40, 30, 20, 10]
    for col, w in enumerate(weights):
        B[start - 1 + col, col] = w

    step = n // 19
    C = np.zeros((18, n))
    for row in range(18):
        C[row, step * (row + 1) - 1] = 1.0

    j, kk = example1_configs(n)[0] if config is None else config
    F, groups = example1_dampers(n, j, kk)
    return SecondOrderSystem(M, K, alpha, B, C, F, [bounds, bounds], groups=groups,
                             name=f"example1(n={n},j={j},k={kk})")


# ---------------------------------------------------------------------------
# Example 2: two lines of masses joined at a common end mass


def example2_masses(d):
    """Mass law of the two-line oscillator, ``n = 2d+1`` masses.

    The third piece uses ``(j - 999)`` in its linear term; the literal
    ``(j - 99)`` makes every second-line mass negative.
    """
    s = EXAMPLE2_D / d
    t = np.arange(1, d + 1) * s
    if d == EXAMPLE2_D:
        t = np.arange(1, d + 1, dtype=float)
    line1 = np.where(t <= 500.0 + 1e-9, 100.0 - t / 10.0, t / 30.0 + 33.0)
    j = 1000.0 + t
    line2 = 100.0 - (j - 999.0) * 5.0 / 20.0 + (j - 999.0) ** 2 / 5000.0
    return np.concatenate([line1, line2, [100.0]])


def example2_stiffness(d, k1=400.0, k2=100.0, k3=300.0):
    n = 2 * d + 1
    T = 2.0 * np.eye(d) - np.eye(d, k=1) - np.eye(d, k=-1)
    K = np.zeros((n, n))
    K[:d, :d] = k1 * T
    K[d:2 * d, d:2 * d] = k2 * T
    K[d - 1, n - 1] = K[n - 1, d - 1] = k1
    K[2 * d - 1, n - 1] = K[n - 1, 2 * d - 1] = k2
    K[n - 1, n - 1] = k1 + k2 + k3
    return K


def _example2_offsets(d):
    u = max(1, _round(5 * d / EXAMPLE2_D))
    return u, 4 * u, 5 * u


def example2_configs(d=EXAMPLE2_D):
    """The 28 placements ``(j, k)`` (1-based global indices), j-major."""
    s = d / EXAMPLE2_D
    _, _, o3 = _example2_offsets(d)
    hi = d - o3
    out = []
    for j in (250, 450, 650, 850):
        for k in (1150, 1250, 1350, 1450, 1550, 1650, 1750):
            jj = min(max(_scaled(j, s), 1), hi)
            kk = d + min(max(_scaled(k - EXAMPLE2_D, s), 1), hi)
            out.append((jj, kk))
    return out


def example2_dampers(d, j, k):
    n = 2 * d + 1
    o1, o2, o3 = _example2_offsets(d)
    F = np.zeros((n, 4))
    pairs = ((j, j + o1), (j + o2, j + o3), (k, k + o1), (k + o2, k + o3))
    for col, (a, b) in enumerate(pairs):
        if not (1 <= a <= n and 1 <= b <= n):
            raise ConstructionError(f"damper ({a}, {b}) outside 1..{n}")
        F[a - 1, col] = 1.0
        F[b - 1, col] = -1.0
    return F, np.arange(4)


def example2_system(d=EXAMPLE2_D, config=None, alpha=0.003, k1=400.0, k2=100.0,
                    k3=300.0, bounds=(350.0, 7000.0)):
    if d < 30:
        raise ConstructionError(f"example 2 needs d >= 30, got {d}")
    from .model import SecondOrderSystem

    n = 2 * d + 1
    M = np.diag(example2_masses(d))
    K = example2_stiffness(d, k1, k2, k3)
    B = np.zeros((n, 21))
    w = np.arange(1000.0, 99.0, -100.0)
    for i in range(10):
        B[i, i] = w[i]
        B[d + i, 10 + i] = w[i]
    B[n - 1, 20] = 2000.0

    center = _scaled(500, d / EXAMPLE2_D)
    first = min(max(center - 10, 1), d - 20)
    C = np.zeros((42, n))
    for i in range(21):
        C[i, first - 1 + i] = 1.0
        C[21 + i, d + first - 1 + i] = 1.0

    j, k = example2_configs(d)[0] if config is None else config
    F, groups = example2_dampers(d, j, k)
    return SecondOrderSystem(M, K, alpha, B, C, F, [bounds] * 4, groups=groups,
                             name=f"example2(d={d},j={j},k={k})")


# ---------------------------------------------------------------------------
# campaign


FAMILIES = ("example1", "example2")
METHODS = ("exact", "rbm", "adaptive")


def uniform_test_set(bounds, count):
    """``count`` parameters spread over the box.

    A tensor grid when ``count`` is a perfect power of the dimension (36
    points on a 2-d box give a 6 x 6 grid), otherwise the first ``count``
    points of the unscrambled Halton sequence.
    """
    b = np.asarray(bounds, dtype=float).reshape(-1, 2)
    ell = b.shape[0]
    if count < 1:
        raise ValueError("test set needs at least one point")
    side = _round(count ** (1.0 / ell))
    if side ** ell == count:
        axes = [np.linspace(lo, hi, side) for lo, hi in b]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])
    from scipy.stats import qmc

    pts = qmc.Halton(d=ell, scramble=False).random(count)
    return qmc.scale(pts, b[:, 0], b[:, 1]) if np.all(b[:, 1] > b[:, 0]) else \
        b[:, 0] + pts * (b[:, 1] - b[:, 0])


@dataclass(frozen=True)
class BenchmarkSpec:
    """A benchmark family at a given scale plus campaign settings.

    ``scale`` is ``n`` for example1 and ``d`` for example2. ``overrides``
    are passed to the system builder (``alpha``, ``stiffness``, ``k1``...).
    ``configs`` restricts the campaign to the listed 1-based config ids.
    """

    family: str = "example1"
    scale: int = 190
    overrides: dict = field(default_factory=dict)
    bounds: tuple = None
    grid_size: int = None
    configs: tuple = None
    tol_f: float = 1e-3
    opt_tol: float = 1e-4
    basis_tol: float = 1e-2
    estimator: str = "delta1"
    sign_tol: float = 1e-6
    iter_max: int = 10
    trunc_tol: float = 1e-8
    dense_cap: int = 2000
    max_evals: int = 2000

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConstructionError(f"unknown family {self.family!r}")
        if self.scale < 20:
            raise ConstructionError(f"scale must be at least 20, got {self.scale}")

    def _builder(self):
        return example1_system if self.family == "example1" else example2_system

    def all_configs(self):
        return example1_configs(self.scale) if self.family == "example1" \
            else example2_configs(self.scale)

    def config_ids(self):
        n_all = len(self.all_configs())
        ids = range(1, n_all + 1) if self.configs is None else self.configs
        ids = [int(i) for i in ids]
        bad = [i for i in ids if not 1 <= i <= n_all]
        if bad:
            raise ConstructionError(f"config ids {bad} outside 1..{n_all}")
        return ids

    def system(self, config_id=1):
        kw = dict(self.overrides)
        if self.bounds is not None:
            kw["bounds"] = tuple(self.bounds)
        return self._builder()(self.scale, config=self.all_configs()[config_id - 1], **kw)

    def dampers(self, config_id):
        j, k = self.all_configs()[config_id - 1]
        fn = example1_dampers if self.family == "example1" else example2_dampers
        return fn(self.scale, j, k)

    def test_set(self, bounds):
        b = np.asarray(bounds, dtype=float).reshape(-1, 2)
        count = self.grid_size or (36 if b.shape[0] == 2 else 21)
        return uniform_test_set(b, count)

    def solver(self):
        from .lyap import GramianSolver

        return GramianSolver(method="auto", tol=self.sign_tol, iter_max=self.iter_max,
                             trunc_tol=self.trunc_tol, dense_cap=self.dense_cap)


@dataclass
class ConfigResult:
    """One (configuration, method) row of a campaign."""

    config_id: int
    j: int
    k: int
    method: str
    g_opt: tuple
    J_opt: float
    rel_gain_err: float = None
    wall_time_s: float = None
    basis_r: int = None
    basis_re: int = None
    restarts: int = None
    status: str = "converged"
    error: str = ""


def _rel_err(a, ref):
    a, ref = np.asarray(a, dtype=float), np.asarray(ref, dtype=float)
    return float(np.linalg.norm(a - ref) / np.linalg.norm(ref))


def run_config(spec, config_id, methods, modal0=None, undamped=None):
    """Run the requested methods on one configuration (no exceptions escape)."""
    from .model import modal_transform
    from .optimize import adaptive_rbm_optimize, optimize_exact, rbm_optimize

    j, k = spec.all_configs()[config_id - 1]
    if modal0 is None:
        modal0 = modal_transform(spec.system(config_id))
    F, groups = spec.dampers(config_id)
    modal = modal0.with_dampers(F, groups)
    solver = spec.solver()
    D = spec.test_set(modal.bounds)
    rows = {}
    for method in methods:
        try:
            if method == "exact":
                out = optimize_exact(modal, opt_tol=spec.opt_tol, solver=solver,
                                     max_evals=spec.max_evals)
            elif method == "rbm":
                out = rbm_optimize(modal, D, tol_f=spec.tol_f, opt_tol=spec.opt_tol,
                                   solver=solver, undamped=undamped, basis_tol=spec.basis_tol,
                                   estimator=spec.estimator, max_evals=spec.max_evals)
            elif method == "adaptive":
                out = adaptive_rbm_optimize(modal, D_test=D, tol_f=spec.tol_f,
                                            opt_tol=spec.opt_tol, solver=solver,
                                            undamped=undamped, basis_tol=spec.basis_tol,
                                            estimator=spec.estimator, max_evals=spec.max_evals)
            else:
                raise ValueError(f"unknown method {method!r}")
        except DampOptError as exc:
            rows[method] = ConfigResult(config_id, j, k, method, (), float("nan"),
                                        status="failed", error=f"{type(exc).__name__}: {exc}")
            continue
        rows[method] = ConfigResult(
            config_id, j, k, method, tuple(float(x) for x in out.g_opt), float(out.J_opt.value),
            wall_time_s=float(out.wall_times["total"]), basis_r=out.basis_r,
            basis_re=out.basis_re, restarts=out.restarts if method == "adaptive" else None,
            status="converged" if out.converged else "not_converged", error=out.message)
    ref = rows.get("exact")
    if ref is not None and ref.status != "failed":
        for method, row in rows.items():
            if method != "exact" and row.status != "failed":
                row.rel_gain_err = _rel_err(row.g_opt, ref.g_opt)
    return [rows[m] for m in methods]


def _run_config_job(args):
    return run_config(*args)


def run_campaign(spec, methods=("exact", "rbm"), workers=1, csv_path=None):
    """Optimise every configuration of ``spec`` with each method.

    The modal transform and ``Z1(0)`` do not depend on the damper layout and
    are computed once, outside the timed sections. Rows come back in
    configuration order whatever the number of workers.
    """
    from .model import modal_transform
    from .rbm import undamped_factor

    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    ids = spec.config_ids()
    modal0 = modal_transform(spec.system(ids[0]))
    undamped = None
    if set(methods) & {"rbm", "adaptive"}:
        undamped = undamped_factor(modal0, spec.solver())
    jobs = [(spec, cid, methods, modal0, undamped) for cid in ids]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_config_job, jobs))
    else:
        chunks = [_run_config_job(job) for job in jobs]
    results = [row for chunk in chunks for row in chunk]
    if csv_path is not None:
        write_results_csv(results, csv_path)
    return results


# ---------------------------------------------------------------------------
# CSV


def csv_header(ell):
    return (["config_id", "j", "k", "method"] + [f"g_opt_{i + 1}" for i in range(ell)]
            + ["J_opt", "rel_gain_err", "wall_time_s", "basis_r", "basis_re", "restarts",
               "status", "error"])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(results, path):
    """Write campaign rows; floats use their shortest round-trip repr."""
    ell = max((len(r.g_opt) for r in results), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(ell))
    for r in results:
        g = list(r.g_opt) + [None] * (ell - len(r.g_opt))
        w.writerow([r.config_id, r.j, r.k, r.method] + [_fmt(x) for x in g]
                   + [_fmt(r.J_opt), _fmt(r.rel_gain_err), _fmt(r.wall_time_s),
                      _fmt(r.basis_r), _fmt(r.basis_re), _fmt(r.restarts), r.status, r.error])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _opt(cast, s):
    return None if s == "" else cast(s)


def read_results_csv(path_or_text):
    """Parse a campaign CSV (path or text) back into :class:`ConfigResult` rows."""
    text = path_or_text
    if isinstance(path_or_text, Path) or "\n" not in str(path_or_text):
        text = Path(path_or_text).read_text(encoding="utf-8")
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        gkeys = sorted((key for key in row if key.startswith("g_opt_")),
                       key=lambda s: int(s.rsplit("_", 1)[1]))
        g = tuple(float(row[key]) for key in gkeys if row[key] != "")
        out.append(ConfigResult(
            int(row["config_id"]), int(row["j"]), int(row["k"]), row["method"], g,
            float(row["J_opt"]), _opt(float, row["rel_gain_err"]),
            _opt(float, row["wall_time_s"]), _opt(int, row["basis_r"]),
            _opt(int, row["basis_re"]), _opt(int, row["restarts"]), row["status"],
            row.get("error", "")))
    return out

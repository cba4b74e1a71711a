"""Box-constrained minimisation of the squared energy response.

All drivers minimise ``J(g)^2`` (same minimiser as ``J``) with a bounded
Nelder-Mead simplex and report ``J = sqrt(J^2)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import StabilityError, StartFailure
from .lyap import GramianSolver
from .rbm import (ErrorEstimator, FactorCache, ReducedBasis, enrich,
                  initial_bases, offline_rbm, orth, ReducedModel, _indices_of, _sweep)
from .response import EnergyResponseValue, exact_energy_response, reduced_energy_response

log = logging.getLogger(__name__)

DEFAULT_G0 = 1000.0


class NelderMeadResult(NamedTuple):
    x: np.ndarray
    fun: float
    converged: bool
    nfev: int
    nit: int


def _bounds_array(bounds, dim):
    b = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if b.shape[0] != dim:
        raise ValueError(f"{b.shape[0]} bounds for {dim} variables")
    if np.any(b[:, 0] > b[:, 1]):
        raise ValueError("lower bound above upper bound")
    return b


def initial_simplex(x0, bounds):
    """``x0`` plus one vertex per coordinate, 5% of the box width (at least 1).

    A step that would leave the box is taken in the negative direction.
    """
    lo, hi = bounds[:, 0], bounds[:, 1]
    d = x0.shape[0]
    S = np.tile(x0, (d + 1, 1))
    for i in range(d):
        step = max(0.05 * (hi[i] - lo[i]), 1.0)
        S[i + 1, i] = x0[i] + step if x0[i] + step <= hi[i] else x0[i] - step
    return np.clip(S, lo, hi)


def nelder_mead_box(f, g0, bounds, tol=1e-4, max_evals=2000):
    """Minimise ``f`` over a box by the Nelder-Mead simplex method.

    Reflection, expansion, contraction and shrink use the coefficients
    1, 2, 0.5 and 0.5. Every trial point is clamped to the box before it is
    evaluated. The run stops when the simplex diameter (max-norm distance
    to the best vertex) and the spread of function values are both at most
    ``tol``, or after ``max_evals`` evaluations.

    ``f`` may return ``inf``; such vertices simply rank last.

    Returns
    -------
    NelderMeadResult
        ``(x, fun, converged, nfev, nit)``.

    Raises
    ------
    StartFailure
        If ``f`` is infinite on every vertex of the initial simplex.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    x0 = np.asarray(g0, dtype=float).ravel()
    b = _bounds_array(bounds, x0.shape[0])
    lo, hi = b[:, 0], b[:, 1]
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise ValueError(f"start point {x0.tolist()} outside the box")
    nfev = 0

    def evaluate(x):
        nonlocal nfev
        nfev += 1
        v = float(f(np.clip(x, lo, hi)))
        return np.inf if np.isnan(v) else v

    S = initial_simplex(x0, b)
    F = np.array([evaluate(x) for x in S])
    if not np.any(np.isfinite(F)):
        raise StartFailure(f"objective is infinite on the whole initial simplex at {x0.tolist()}")
    d = x0.shape[0]
    nit = 0
    converged = False
    while True:
        order = np.argsort(F, kind="stable")
        S, F = S[order], F[order]
        diam = np.max(np.abs(S[1:] - S[0])) if d else 0.0
        spread = F[-1] - F[0]
        if diam <= tol and np.isfinite(spread) and spread <= tol:
            converged = True
            break
        if nfev >= max_evals:
            break
        nit += 1
        c = S[:-1].mean(axis=0)
        xr = np.clip(c + (c - S[-1]), lo, hi)
        fr = evaluate(xr)
        if fr < F[0]:
            xe = np.clip(c + 2.0 * (c - S[-1]), lo, hi)
            fe = evaluate(xe)
            S[-1], F[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < F[-2]:
            S[-1], F[-1] = xr, fr
            continue
        if fr < F[-1]:
            xc = np.clip(c + 0.5 * (xr - c), lo, hi)
            fc = evaluate(xc)
            if fc <= fr:
                S[-1], F[-1] = xc, fc
                continue
        else:
            xc = np.clip(c + 0.5 * (S[-1] - c), lo, hi)
            fc = evaluate(xc)
            if fc < F[-1]:
                S[-1], F[-1] = xc, fc
                continue
        for i in range(1, d + 1):
            S[i] = np.clip(S[0] + 0.5 * (S[i] - S[0]), lo, hi)
            F[i] = evaluate(S[i])
    return NelderMeadResult(np.clip(S[0], lo, hi), float(F[0]), converged, nfev, nit)


# ---------------------------------------------------------------------------
# guarded reduced objective


@dataclass(frozen=True)
class GuardedObjectiveResult:
    """``value`` is the reduced squared response, or ``inf`` when ``conv`` is False."""

    value: float
    conv: bool
    delta: float = np.nan


class GuardFired(Exception):
    """Raised inside an optimisation to stop at the first blocking parameter."""

    def __init__(self, g, delta):
        super().__init__(f"error estimate {delta:.3e} above tolerance at g={g.tolist()}")
        self.g = g
        self.delta = delta


class GuardedObjective:
    """Reduced squared response that refuses parameters with ``Delta(g) > tol_f``.

    Parameters
    ----------
    estimator : ErrorEstimator
    tol_f : float
        Guard tolerance on the relative estimate; ``inf`` disables the guard
        (and the error equation is not solved at all).
    interrupt : bool
        Raise :class:`GuardFired` instead of returning ``inf``.
    """

    def __init__(self, estimator, tol_f, interrupt=False):
        self.estimator = estimator
        self.tol_f = float(tol_f)
        self.interrupt = interrupt
        self.blocking = None
        self.accepted = []
        self.nfev = 0

    def evaluate(self, g):
        g = np.array(g, dtype=float)
        self.nfev += 1
        if np.isinf(self.tol_f):
            try:
                _, sq = self.estimator.reduced(g)
            except StabilityError:
                return GuardedObjectiveResult(np.inf, False, np.inf)
            self.accepted.append((g, sq))
            return GuardedObjectiveResult(sq, True, np.nan)
        est = self.estimator.evaluate(g, residual=False)
        delta = est.value
        if not delta <= self.tol_f:
            if self.blocking is None:
                self.blocking = g
            if self.interrupt:
                raise GuardFired(g, delta)
            return GuardedObjectiveResult(np.inf, False, delta)
        value = max(est.trace_ref, 0.0)
        self.accepted.append((g, value))
        return GuardedObjectiveResult(value, True, delta)

    def __call__(self, g):
        return self.evaluate(g).value


def guarded_objective(modal, rb, g, tol_f, which="delta1"):
    """One guarded evaluation with the bases of ``rb``."""
    est = ErrorEstimator(modal, rb.V1, rb.V1err, which)
    return GuardedObjective(est, tol_f).evaluate(g)


# ---------------------------------------------------------------------------
# drivers


@dataclass
class OptimizationOutcome:
    """Result of one optimisation run.

    ``wall_times`` holds per-phase durations in seconds (``offline``,
    ``online``, ``total``); ``basis_sizes`` records ``(r, r_e)`` after every
    basis change; ``accepted`` lists ``(g, squared)`` for every guarded
    evaluation that passed (adaptive runs only).
    """

    method: str
    g_opt: np.ndarray
    J_opt: EnergyResponseValue
    converged: bool
    restarts: int = 0
    evals: int = 0
    basis_sizes: list = field(default_factory=list)
    wall_times: dict = field(default_factory=dict)
    message: str = ""
    basis: ReducedBasis = field(default=None, repr=False)
    accepted: list = field(default_factory=list, repr=False)

    @property
    def basis_r(self):
        return self.basis_sizes[-1][0] if self.basis_sizes else None

    @property
    def basis_re(self):
        return self.basis_sizes[-1][1] if self.basis_sizes else None


def _start(modal, g0):
    if g0 is None:
        g0 = np.full(modal.ell, DEFAULT_G0)
    g0 = np.asarray(g0, dtype=float).ravel()
    return np.clip(g0, modal.bounds[:, 0], modal.bounds[:, 1])


def optimize_exact(modal, g0=None, bounds=None, opt_tol=1e-4, solver=None, max_evals=2000):
    """Minimise the full-order squared response (reference path)."""
    solver = solver or GramianSolver()
    bounds = modal.bounds if bounds is None else np.asarray(bounds, dtype=float)
    g0 = _start(modal, g0)
    t0 = time.perf_counter()
    res = nelder_mead_box(lambda g: exact_energy_response(modal, g, solver).squared,
                          g0, bounds, opt_tol, max_evals)
    dt = time.perf_counter() - t0
    return OptimizationOutcome(
        "exact", res.x, EnergyResponseValue.from_squared(res.fun, "exact"), res.converged,
        evals=res.nfev, wall_times={"online": dt, "total": dt},
        message="" if res.converged else "evaluation budget exhausted")


def optimize_reduced(modal, rb, g0=None, opt_tol=1e-4, max_evals=2000):
    """Minimise the reduced squared response on a fixed basis (online phase)."""
    g0 = _start(modal, g0)
    t0 = time.perf_counter()
    rm = ReducedModel(modal, rb.V1)

    def objective(g):
        try:
            return reduced_energy_response(rm, g).squared
        except StabilityError:
            return np.inf

    res = nelder_mead_box(objective, g0, modal.bounds, opt_tol, max_evals)
    dt = time.perf_counter() - t0
    return OptimizationOutcome(
        "rbm", res.x, EnergyResponseValue.from_squared(res.fun, "reduced"), res.converged,
        evals=res.nfev, basis_sizes=[(rb.r, rb.r_err)], wall_times={"online": dt, "total": dt},
        message="" if res.converged else "evaluation budget exhausted", basis=rb)


def rbm_optimize(modal, D_test, g0=None, tol_f=1e-3, opt_tol=1e-4, solver=None,
                 undamped=None, basis_tol=1e-2, estimator="delta1", max_evals=2000,
                 workers=1, basis=None):
    """Offline phase on ``D_test`` followed by the reduced optimisation.

    ``undamped`` is the shared ``Z1(0)``; when supplied its cost is not
    counted in ``wall_times``.
    """
    t0 = time.perf_counter()
    factors = FactorCache(modal, solver, undamped)
    rb = offline_rbm(modal, D_test, tol_f=tol_f, estimator=estimator, factors=factors,
                     basis_tol=basis_tol, workers=workers, basis=basis)
    t_off = time.perf_counter() - t0
    out = optimize_reduced(modal, rb, g0, opt_tol, max_evals)
    out.wall_times = {"offline": t_off, "online": out.wall_times["online"],
                      "total": t_off + out.wall_times["online"]}
    return out


def adaptive_rbm_optimize(modal, g0=None, g0_rr=None, D_test=None, tol_f=1e-3, opt_tol=1e-4,
                          solver=None, undamped=None, basis_tol=1e-2, estimator="delta1",
                          max_restarts=30, max_evals=2000, workers=1):
    """Optimise while enriching the bases whenever the guard fires.

    Each run of the simplex stops at the first parameter whose estimate
    exceeds ``tol_f``. ``V1`` is enriched with ``Z1`` at that parameter.
    ``V1err`` is enriched with it and with ``Z1`` at the test parameter of
    largest error-equation residual. The simplex then restarts from the
    blocking parameter.
    """
    if D_test is None:
        raise ValueError("adaptive optimisation needs a test set for the residual search")
    D = np.atleast_2d(np.asarray(D_test, dtype=float))
    g0 = _start(modal, g0)
    if g0_rr is None:
        g0_rr = next(d for d in D if not np.allclose(d, g0))
    g0_rr = np.asarray(g0_rr, dtype=float)
    if np.allclose(g0, g0_rr):
        raise ValueError("g0_rr must differ from g0")
    t0 = time.perf_counter()
    factors = FactorCache(modal, solver, undamped)
    V1, V1err = initial_bases(factors, g0, g0_rr, basis_tol)
    rb = ReducedBasis(V1, V1err, [g0.copy()], [g0_rr.copy()], True)
    rr_used = _indices_of(D, g0_rr)
    sizes = [(rb.r, rb.r_err)]
    accepted = []
    start = g0
    evals = 0
    restarts = 0
    message = ""
    converged = False
    res = None
    est = ErrorEstimator(modal, rb.V1, rb.V1err, estimator)
    while True:
        obj = GuardedObjective(est, tol_f, interrupt=True)
        try:
            res = nelder_mead_box(obj, start, modal.bounds, opt_tol, max_evals)
        except GuardFired as fired:
            g_blk = fired.g
        else:
            converged = res.converged
            if not converged:
                message = "evaluation budget exhausted"
            break
        finally:
            evals += obj.nfev
            accepted.extend(obj.accepted)
        if restarts == max_restarts:
            message = f"restart cap {max_restarts} reached"
            start = g_blk
            break
        restarts += 1
        cand = [i for i in range(D.shape[0]) if i not in rr_used] or list(range(D.shape[0]))
        resid = [e.residual for e in _sweep(est, D, cand, True, workers)]
        i_rr = cand[int(np.argmax(resid))]
        rr_used.add(i_rr)
        r_before, re_before = rb.r, rb.r_err
        Zb = factors(g_blk)
        rb.V1 = enrich(rb.V1, Zb, basis_tol)
        rb.V1err = enrich(orth(rb.V1, rb.V1err), factors(D[i_rr]), basis_tol)
        rb.used_params.append(g_blk.copy())
        rb.rr_params.append(D[i_rr].copy())
        est = ErrorEstimator(modal, rb.V1, rb.V1err, estimator)
        # a truncated Z1(g_blk) may not clear the guard at g_blk: add more of it
        while not est.evaluate(g_blk, residual=False).value <= tol_f:
            grown = enrich(rb.V1, Zb, basis_tol)
            if grown.shape[1] == rb.r:
                break
            rb.V1 = grown
            rb.V1err = orth(rb.V1, rb.V1err)
            est = ErrorEstimator(modal, rb.V1, rb.V1err, estimator)
        sizes.append((rb.r, rb.r_err))
        log.info("adaptive restart %d at g=%s r=%d r_err=%d", restarts, g_blk.tolist(),
                 rb.r, rb.r_err)
        if rb.r == r_before and rb.r_err == re_before:
            message = f"bases cannot grow at blocking parameter {g_blk.tolist()}"
            break
        start = g_blk
    dt = time.perf_counter() - t0
    if res is not None and converged:
        g_opt, J = res.x, EnergyResponseValue.from_squared(res.fun, "reduced")
    else:
        g_opt = start if res is None else res.x
        J = EnergyResponseValue(np.nan, np.nan, "reduced")
    return OptimizationOutcome(
        "adaptive", g_opt, J, converged, restarts=restarts, evals=evals, basis_sizes=sizes,
        wall_times={"online": dt, "total": dt, "factor_solves": factors.solve_time},
        message=message, basis=rb, accepted=accepted)

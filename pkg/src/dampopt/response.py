"""Energy response ``J(g)``: the H2 norm of the damped system.

``J(g)^2 = tr(C P11(g) C^T)`` where ``P11`` is the position block of the
controllability Gramian.  Three evaluations are offered: full order, reduced
(through a :class:`~dampopt.rbm.ReducedModel`) and frequency-domain
quadrature, which serves as an independent check.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import AccuracyError
from .lyap import GramianSolver
from .model import assemble_operator

SOURCES = ("exact", "reduced", "quadrature")


@dataclass(frozen=True)
class EnergyResponseValue:
    """``value = sqrt(squared)``; ``source`` is exact, reduced or quadrature."""

    value: float
    squared: float
    source: str

    @classmethod
    def from_squared(cls, squared, source, scale=None):
        squared = float(squared)
        scale = abs(squared) if scale is None else abs(float(scale))
        if squared < 0:
            if squared < -1e-12 * max(scale, np.finfo(float).tiny):
                raise ValueError(f"negative squared response {squared:.3e}")
            squared = 0.0
        return cls(math.sqrt(squared), squared, source)


def _trace_output(Cm, P11):
    return float(np.sum((Cm @ P11) * Cm))


def exact_energy_response(modal, g, solver=None):
    """Full-order response.

    The dense route solves the 2n-dimensional Lyapunov equation directly;
    otherwise ``squared = ||Cm Z1||_F^2`` from the sign-function factor.
    """
    solver = solver or GramianSolver()
    op = assemble_operator(modal, g)
    rhs = modal.B_first
    if solver.use_dense(modal.n):
        P = solver.gramian(op, rhs)
        n = modal.n
        sq = _trace_output(modal.Cm, P[:n, :n])
        return EnergyResponseValue.from_squared(sq, "exact", np.sum(modal.Cm**2) * np.abs(P).max())
    Z1 = solver.factor(op, rhs).Z1
    return EnergyResponseValue.from_squared(float(np.sum((modal.Cm @ Z1) ** 2)), "exact")


def reduced_energy_response(rm, g):
    """``tr(Cm V1 P11_hat V1^T Cm^T)`` from the 2r-dimensional reduced equation."""
    from .rbm import solve_reduced_gramian

    P = solve_reduced_gramian(rm, g)
    r = rm.r
    return EnergyResponseValue.from_squared(_trace_output(rm.proj.Cy, P[:r, :r]), "reduced",
                                            np.abs(P).max() * np.sum(rm.proj.Cy**2))


# ---------------------------------------------------------------------------
# quadrature oracle


def transfer_function(modal, g, w):
    """``Cm (Omega^2 - w^2 I + i w D(g))^{-1} Bm`` at the real frequency ``w``."""
    gd = modal.damper_gains(g)
    om = modal.Omega
    Dg = np.diag(2.0 * modal.alpha * om) + (modal.Fm * gd) @ modal.Fm.T
    Kw = np.diag(om**2 - w * w) + 1j * w * Dg
    return modal.Cm @ np.linalg.solve(Kw, modal.Bm)


def _breakpoints(modal, g):
    op = assemble_operator(modal, g)
    lam = np.linalg.eigvals(op.to_dense())
    pts = {0.0}
    for lm in lam:
        c, h = abs(lm.imag), abs(lm.real)
        for k in (0.0, 1.0, 3.0, 10.0, 30.0):
            for sgn in (-1.0, 1.0):
                x = c + sgn * k * h
                if x > 0:
                    pts.add(x)
    pts.add(10.0 * float(modal.Omega.max()))
    pts = np.array(sorted(pts))
    return pts, float(pts[-1])


def quadrature_energy_response(modal, g, freq_grid=None, rtol=1e-6):
    """Integrate ``(1/pi) int_0^inf ||G(iw)||_F^2 dw`` adaptively.

    The finite part (at least ``[0, 10 max(Omega)]``) is split at every resonance
    ``Im(lambda)`` and at multiples of its half-width ``|Re(lambda)|`` (or at
    the user-supplied ``freq_grid``); the remainder is integrated on an
    infinite interval.  Raises :class:`AccuracyError` when the summed error
    estimates exceed ``1e-3`` of the result.
    """
    if not np.any(modal.Cm) or not np.any(modal.Bm):
        return EnergyResponseValue(0.0, 0.0, "quadrature")

    def f(w):
        return float(np.sum(np.abs(transfer_function(modal, g, w)) ** 2))

    if freq_grid is None:
        pts, top = _breakpoints(modal, g)
    else:
        pts = np.unique(np.concatenate([[0.0], np.asarray(freq_grid, dtype=float)]))
        top = float(pts[-1])
    total, err = 0.0, 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        for a, b in zip(pts[:-1], pts[1:]):
            val, e = integrate.quad(f, a, b, epsrel=rtol, epsabs=0.0, limit=200)
            total += val
            err += e
        val, e = integrate.quad(f, top, np.inf, epsrel=rtol, epsabs=0.0, limit=200)
    total += val
    err += e
    if not np.isfinite(total) or err > 1e-3 * abs(total):
        raise AccuracyError(f"quadrature error estimate {err:.3e} too large for value {total:.3e}")
    return EnergyResponseValue.from_squared(total / np.pi, "quadrature")

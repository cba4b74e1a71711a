"""Reduced basis method for the parametric Lyapunov equation.

The position Gramian is approximated as ``P11(g) ~ V1 P11_hat(g) V1^T`` where
``P_hat`` solves the Galerkin-projected equation on ``V = blkdiag(V1, V1)``.
A second basis ``V1err`` (containing ``V1``) carries a Galerkin
approximation of the error equation, giving the estimators

    delta1(g) = |tr(C E11(g) C^T)|,   delta2(g) = ||E11(g)||_F .

All per-parameter work happens on the projected spaces; the n-dimensional
products are cached once per basis in :class:`ModalProjection`.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, StabilityError
from .lyap import GramianSolver, solve_dense
from .model import assemble_operator

log = logging.getLogger(__name__)

ORTH_RTOL = 1e-10
ESTIMATORS = ("delta1", "delta2")


def orth(X, basis=None, rtol=ORTH_RTOL):
    """Orthonormal basis of ``span([basis, X])`` that keeps ``basis`` as is.

    New directions are what remains of ``X`` after two rounds of projection
    against ``basis``; singular values below ``rtol`` times ``||X||_2`` are
    treated as already contained.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if basis is None:
        basis = np.zeros((n, 0))
    if X.shape[1] == 0:
        return basis
    scale = np.linalg.norm(X, 2)
    if scale == 0:
        return basis
    R = X.copy()
    for _ in range(2):
        R -= basis @ (basis.T @ R)
    u, s, _ = np.linalg.svd(R, full_matrices=False)
    keep = s > rtol * scale
    if not np.any(keep):
        return basis
    new = u[:, keep]
    new -= basis @ (basis.T @ new)
    new, _ = np.linalg.qr(new)
    return np.hstack([basis, new])


def dominant_columns(Z, tol):
    """Leading left singular directions of ``Z`` scaled by their singular values.

    Columns with singular value below ``tol`` times the largest are dropped.
    """
    if Z.shape[1] == 0 or tol <= 0:
        return Z
    u, s, _ = np.linalg.svd(Z, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return Z[:, :0]
    keep = s > tol * s[0]
    return u[:, keep] * s[keep]


def enrich(basis, Z, tol, rtol=ORTH_RTOL):
    """Add the dominant directions of ``Z`` to ``basis``.

    When the dominant columns are already contained, the part of ``Z``
    outside the basis is truncated instead, so the basis grows whenever
    ``Z`` is not in its span (to ``rtol``).
    """
    new = orth(dominant_columns(Z, tol), basis, rtol)
    if new.shape[1] > basis.shape[1] or tol <= 0:
        return new
    R = Z - basis @ (basis.T @ Z)
    if np.linalg.norm(R, 2) <= rtol * np.linalg.norm(Z, 2):
        return new
    return orth(dominant_columns(R, tol), basis, rtol)


# ---------------------------------------------------------------------------
# projections


class ModalProjection:
    """Galerkin pieces of ``A(g)`` on ``W = blkdiag(Y, Y)``.

    Caches every n-dimensional product so that ``W^T A(g) W``,
    ``W^T A(g)^T A(g) W`` and ``B^T A(g) W`` cost ``O(s^2 l)`` per parameter.
    Columns of ``W`` are ordered ``[position block (s), velocity block (s)]``.
    """

    def __init__(self, modal, Y):
        Y = np.asarray(Y, dtype=float)
        om = modal.Omega
        self.alpha = modal.alpha
        self.groups = modal.groups
        self.s = Y.shape[1]
        Y1 = om[:, None] * Y
        Y2 = om[:, None] * Y1
        self.YY = Y.T @ Y
        self.O1 = Y.T @ Y1
        self.O2 = Y1.T @ Y1
        self.O3 = Y1.T @ Y2
        self.O4 = Y2.T @ Y2
        Fm = modal.Fm
        self.Fy = Y.T @ Fm
        self.FyO1 = Y1.T @ Fm
        self.FyO2 = Y2.T @ Fm
        self.FtF = Fm.T @ Fm
        Bm = modal.Bm
        self.By = Y.T @ Bm
        self.BO1 = Bm.T @ Y1
        self.BO2 = Bm.T @ Y2
        self.BtF = Bm.T @ Fm
        self.BtB = Bm.T @ Bm
        self.Cy = modal.Cm @ Y

    def gains(self, g):
        return np.asarray(g, dtype=float).ravel()[self.groups]

    def A(self, gd):
        s = self.s
        H = np.zeros((2 * s, 2 * s))
        H[:s, s:] = self.YY
        H[s:, :s] = -self.O2
        H[s:, s:] = -2.0 * self.alpha * self.O1 - (self.Fy * gd) @ self.Fy.T
        return H

    def AtA(self, gd):
        s, a = self.s, self.alpha
        FG = self.Fy * gd
        K = np.empty((2 * s, 2 * s))
        K[:s, :s] = self.O4
        tr = 2.0 * a * self.O3 + (self.FyO2 * gd) @ self.Fy.T
        K[:s, s:] = tr
        K[s:, :s] = tr.T
        cross = (self.FyO1 * gd) @ self.Fy.T
        K[s:, s:] = (self.YY + 4.0 * a * a * self.O2 + 2.0 * a * (cross + cross.T)
                     + FG @ self.FtF @ FG.T)
        return K

    def BtA(self, gd):
        s = self.s
        out = np.empty((self.BtB.shape[0], 2 * s))
        out[:, :s] = -self.BO2
        out[:, s:] = -(2.0 * self.alpha * self.BO1 + (self.BtF * gd) @ self.Fy.T)
        return out

    @property
    def Bw(self):
        return np.vstack([np.zeros_like(self.By), self.By])

    @property
    def gram(self):
        s = self.s
        G = np.zeros((2 * s, 2 * s))
        G[:s, :s] = self.YY
        G[s:, s:] = self.YY
        return G


@dataclass(eq=False)
class ReducedBasis:
    """Solution basis ``V1`` and error basis ``V1err`` with provenance."""

    V1: np.ndarray
    V1err: np.ndarray
    used_params: list = field(default_factory=list)
    rr_params: list = field(default_factory=list)
    includes_undamped: bool = False
    history: list = field(default_factory=list)
    converged: bool = False
    factor_time: float = 0.0

    @property
    def r(self):
        return self.V1.shape[1]

    @property
    def r_err(self):
        return self.V1err.shape[1]

    def save(self, path):
        """Checkpoint as ``.npz`` (float64 bases plus parameter provenance)."""
        np.savez(path, V1=self.V1, V1err=self.V1err, used_params=_param_table(self.used_params),
                 rr_params=_param_table(self.rr_params),
                 includes_undamped=np.array(self.includes_undamped))

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            return cls(data["V1"].copy(), data["V1err"].copy(),
                       [row.copy() for row in data["used_params"]],
                       [row.copy() for row in data["rr_params"]],
                       bool(data["includes_undamped"]))


def _param_table(params):
    if not params:
        return np.zeros((0, 0))
    return np.array([np.ravel(g) for g in params], dtype=float)


class ReducedModel:
    """Projected family ``A_hat(g) = V^T A(g) V`` for orthonormal ``V1``."""

    def __init__(self, modal, V1):
        V1 = np.asarray(V1, dtype=float)
        if V1.ndim != 2 or V1.shape[1] == 0:
            raise ValueError("reduced basis must have at least one column")
        self.modal = modal
        self.V1 = V1
        self.proj = ModalProjection(modal, V1)

    @property
    def r(self):
        return self.V1.shape[1]

    @property
    def B_hat(self):
        return self.proj.Bw

    @property
    def C_hat(self):
        return np.hstack([self.proj.Cy, np.zeros_like(self.proj.Cy)])

    def A_hat(self, g):
        return self.proj.A(self.proj.gains(g))


def project_reduced_model(modal, V1):
    return ReducedModel(modal, V1)


def solve_reduced_gramian(rm, g):
    """Reduced Gramian ``P_hat(g)`` (2r x 2r); raises StabilityError with ``g``."""
    try:
        return solve_dense(rm.A_hat(g), rm.B_hat @ rm.B_hat.T, cap=None)
    except StabilityError as exc:
        raise StabilityError(f"reduced operator unstable at g={np.asarray(g).tolist()}",
                             g=np.asarray(g)) from exc


# ---------------------------------------------------------------------------
# error estimation


@dataclass
class ErrorEstimate:
    """Error estimate at one parameter.

    ``delta1``/``delta2`` are absolute; the relative forms divide by the
    reduced squared response ``trace_ref`` and by ``norm_ref = ||P11_hat||_F``.
    ``which`` selects the estimator returned by :attr:`value`.
    """

    delta1: float
    delta2: float
    trace_ref: float = np.nan
    norm_ref: float = np.nan
    which: str = "delta1"
    residual: float = np.nan
    stable: bool = True
    P_hat: np.ndarray = field(default=None, repr=False)
    E_hat: np.ndarray = field(default=None, repr=False)

    @property
    def rel_delta1(self):
        return _ratio(self.delta1, self.trace_ref)

    @property
    def rel_delta2(self):
        return _ratio(self.delta2, self.norm_ref)

    @property
    def value(self):
        return self.rel_delta1 if self.which == "delta1" else self.rel_delta2

    @classmethod
    def failed(cls, which, trace_ref=np.nan):
        return cls(np.inf, np.inf, trace_ref, np.nan, which, np.inf, False)


def _ratio(a, b):
    if not np.isfinite(a):
        return np.inf
    if a == 0:
        return 0.0
    if not (b > 0):
        return np.inf
    return a / b


class ErrorEstimator:
    """Evaluates reduced response, estimators and error-equation residual.

    Everything is expressed on an orthonormal basis ``Q`` of
    ``span([V1err, V1])``; with ``Wq = blkdiag(Q, Q)`` the per-parameter work
    involves only matrices of size ``2 dim(Q)`` plus the damper count.
    """

    def __init__(self, modal, V1, V1err, which="delta1"):
        if which not in ESTIMATORS:
            raise ValueError(f"unknown estimator {which!r}")
        if V1err.shape[1] == 0 or V1.shape[1] == 0:
            raise ValueError("bases must be nonempty")
        self.modal = modal
        self.which = which
        self.V1 = V1
        self.V1err = V1err
        self.re, self.r = V1err.shape[1], V1.shape[1]
        Q = orth(np.hstack([V1err, V1]))
        self.Q = Q
        self.proj = ModalProjection(modal, Q)
        Te, Tv = Q.T @ V1err, Q.T @ V1
        self.Te2 = np.kron(np.eye(2), Te)
        self.Tv2 = np.kron(np.eye(2), Tv)
        self.G_ev = self.Te2.T @ self.Tv2
        Bq = self.proj.Bw
        self.Bq = Bq
        self.Be = self.Te2.T @ Bq
        self.Bv = self.Tv2.T @ Bq
        self.Ce = self.proj.Cy @ Te
        self.Cv = self.proj.Cy @ Tv
        self._outside_factor(modal, Q)

    def _outside_factor(self, modal, Q):
        # Components of A(g) Wq and B orthogonal to span(Wq):
        #   (I - Wq Wq^T) A(g) Wq = Ea - Eu diag(g) (U^T Wq),  (I - Wq Wq^T) B = Eb.
        # One thin QR of [Ea, Eu, Eb] turns their norms into small products.
        om, a = modal.Omega, modal.alpha
        n, s = Q.shape
        AW = np.zeros((2 * n, 2 * s))
        AW[:n, s:] = Q
        AW[n:, :s] = -(om**2)[:, None] * Q
        AW[n:, s:] = -2.0 * a * om[:, None] * Q
        U, Bf = modal.U, modal.B_first

        def outside(X):
            X = X.copy()
            X[:n] -= Q @ (Q.T @ X[:n])
            X[n:] -= Q @ (Q.T @ X[n:])
            return X

        L = np.hstack([outside(AW), outside(U), outside(Bf)])
        _, R = np.linalg.qr(L, mode="reduced")
        k1, k2 = 2 * s, 2 * s + U.shape[1]
        self.Ra, self.Ru, self.Rb = R[:, :k1], R[:, k1:k2], R[:, k2:]
        self.UtW = np.hstack([np.zeros((U.shape[1], s)), modal.Fm.T @ Q])
        self.bb_out = float(np.linalg.norm(self.Rb.T @ self.Rb))

    def _project(self, H, left, right):
        return left.T @ H @ right

    def reduced(self, g):
        """Reduced Gramian and squared response without the error equation."""
        H = self.proj.A(self.proj.gains(g))
        P = solve_dense(self._project(H, self.Tv2, self.Tv2), self.Bv @ self.Bv.T, cap=None)
        r = self.r
        return P, float(np.trace(self.Cv @ P[:r, :r] @ self.Cv.T))

    def evaluate(self, g, residual=True):
        gd = self.proj.gains(g)
        H = self.proj.A(gd)
        r, re = self.r, self.re
        try:
            P = solve_dense(self._project(H, self.Tv2, self.Tv2), self.Bv @ self.Bv.T, cap=None)
        except StabilityError:
            return ErrorEstimate.failed(self.which)
        trace_ref = float(np.trace(self.Cv @ P[:r, :r] @ self.Cv.T))
        H_ev = self._project(H, self.Te2, self.Tv2)
        R = self.Be @ self.Be.T + H_ev @ P @ self.G_ev.T
        R = R + (H_ev @ P @ self.G_ev.T).T
        try:
            E = solve_dense(self._project(H, self.Te2, self.Te2), R, cap=None)
        except StabilityError:
            return ErrorEstimate.failed(self.which, trace_ref)
        E11 = E[:re, :re]
        est = ErrorEstimate(
            delta1=abs(float(np.trace(self.Ce @ E11 @ self.Ce.T))),
            delta2=float(np.linalg.norm(E11)),
            trace_ref=trace_ref,
            norm_ref=float(np.linalg.norm(P[:r, :r])),
            which=self.which, P_hat=P, E_hat=E)
        if residual:
            est.residual = self._residual(gd, H, self._combined(P, E))
        return est

    def _combined(self, P, E):
        """``X = V_err E V_err^T + V P V^T`` in ``Wq`` coordinates."""
        X = self.Te2 @ E @ self.Te2.T + self.Tv2 @ P @ self.Tv2.T
        return 0.5 * (X + X.T)

    def _residual(self, gd, H, X):
        # ||R||^2 = ||inside||^2 + 2 ||cross||^2 + ||outside||^2 for
        # R = A X + X A^T + B B^T split along span(Wq) and its complement.
        inside = H @ X
        inside = inside + inside.T + self.Bq @ self.Bq.T
        cross = (self.Ra - (self.Ru * gd) @ self.UtW) @ X + self.Rb @ self.Bq.T
        val = np.sum(inside**2) + 2.0 * np.sum(cross**2) + self.bb_out**2
        return float(np.sqrt(val))

    def residual_expansion(self, g, est):
        """Residual norm by the expanded trace formula.

        ``||R||^2 = 2 tr(AXAX) + 2 tr(A^T A X^2) + 4 tr(B B^T A X) + tr((B^T B)^2)``
        with every product projected on ``Wq``. Algebraically equal to
        :attr:`ErrorEstimate.residual` but subject to cancellation when
        ``||R|| << ||A|| ||X||``.
        """
        gd = self.proj.gains(g)
        H = self.proj.A(gd)
        X = self._combined(est.P_hat, est.E_hat)
        HX = H @ X
        t1 = np.sum(HX * HX.T)
        t2 = np.sum((self.proj.AtA(gd) @ X) * X.T)
        t3 = np.sum((self.proj.BtA(gd) @ X) * self.Bq.T)
        t4 = np.sum(self.proj.BtB**2)
        return float(np.sqrt(max(2.0 * t1 + 2.0 * t2 + 4.0 * t3 + t4, 0.0)))


def estimate_error(modal, rb, rm=None, g=None, which="delta1"):
    """One-off estimate at ``g`` (builds the projection caches)."""
    return ErrorEstimator(modal, rb.V1, rb.V1err, which).evaluate(g, residual=False)


def error_residual_norm(modal, rb, rm=None, g=None):
    return ErrorEstimator(modal, rb.V1, rb.V1err).evaluate(g, residual=True).residual


# ---------------------------------------------------------------------------
# offline phase


class FactorCache:
    """Memoised ``Z1(g)`` of the full-order equation for one damper layout."""

    def __init__(self, modal, solver=None, undamped=None):
        self.modal = modal
        self.solver = solver or GramianSolver()
        self._cache = {}
        self.solve_time = 0.0
        self.n_solves = 0
        if undamped is not None:
            self._cache[self._key(np.zeros(modal.ell))] = undamped

    @staticmethod
    def _key(g):
        return tuple(np.round(np.asarray(g, dtype=float).ravel(), 12))

    def __call__(self, g):
        key = self._key(g)
        if key not in self._cache:
            t0 = time.perf_counter()
            op = assemble_operator(self.modal, g)
            self._cache[key] = self.solver.factor(op, self.modal.B_first).Z1
            self.solve_time += time.perf_counter() - t0
            self.n_solves += 1
        return self._cache[key]


def undamped_factor(modal, solver=None):
    """``Z1(0)``: depends only on the modes and inputs, shared across layouts."""
    solver = solver or GramianSolver()
    op = assemble_operator(modal, np.zeros(modal.ell))
    return solver.factor(op, modal.B_first).Z1


def _indices_of(D, g):
    hits = np.flatnonzero(np.all(np.isclose(D, np.asarray(g, dtype=float)[None, :],
                                            rtol=1e-12, atol=0), axis=1))
    return {int(i) for i in hits}


def _sweep(estimator, D, indices, residual, workers):
    def one(i):
        return estimator.evaluate(D[i], residual=residual)

    if workers and workers > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, indices))
    return [one(i) for i in indices]


def initial_bases(factors, g0, g0_rr, basis_tol, use_undamped=True):
    """``V1 = orth([Z1(0), Z1(g0)])`` and ``V1err = orth([V1, Z1(g0_rr)])``."""
    n = factors.modal.n
    V1 = np.zeros((n, 0))
    if use_undamped:
        V1 = orth(dominant_columns(factors(np.zeros(factors.modal.ell)), basis_tol), V1)
    V1 = enrich(V1, factors(g0), basis_tol)
    V1err = enrich(V1.copy(), factors(g0_rr), basis_tol)
    return V1, V1err


def default_rr_start(D, g0):
    """First test parameter different from ``g0`` scanning from the end."""
    for i in range(len(D) - 1, -1, -1):
        if not np.allclose(D[i], g0):
            return D[i].copy()
    raise ValueError("test set needs a parameter different from g0")


def offline_rbm(modal, D_test, tol_f=1e-3, estimator="delta1", solver=None, g0=None,
                g0_rr=None, undamped=None, basis_tol=1e-2, max_iter=None, workers=1,
                factors=None, use_undamped=True, basis=None, strict=True):
    """Greedy construction of ``V1`` and ``V1err`` (offline phase).

    Parameters
    ----------
    modal : ModalRealization
    D_test : array_like, shape (N, ell)
        Test parameters; ``N >= 2``.
    tol_f : float
        Stop once the largest relative estimate over the unused test
        parameters is at most ``tol_f``.
    estimator : {"delta1", "delta2"}
    solver : GramianSolver, optional
        Used for every full-order factor ``Z1(g)``.
    g0, g0_rr : array_like, optional
        Start parameters (default: first test parameter and the last one
        different from it).
    undamped : ndarray, optional
        Precomputed ``Z1(0)``.
    basis_tol : float
        Relative singular-value cut applied to each ``Z1(g)`` before it
        enters a basis.
    factors : FactorCache, optional
        Shared cache of full-order solves.
    basis : ReducedBasis, optional
        Resume from an existing basis (for example a checkpoint) instead of
        the start parameters.
    strict : bool
        Raise :class:`ConvergenceError` when ``max_iter`` enrichments do not
        suffice; otherwise return the basis with ``converged=False``.
    """
    D = np.atleast_2d(np.asarray(D_test, dtype=float))
    if D.shape[0] < 2:
        raise ValueError("the test set needs at least two parameters")
    if not tol_f > 0:
        raise ValueError("tol_f must be positive")
    n = modal.n
    if factors is None:
        factors = FactorCache(modal, solver, undamped)
    g0 = D[0].copy() if g0 is None else np.asarray(g0, dtype=float)
    g0_rr = default_rr_start(D, g0) if g0_rr is None else np.asarray(g0_rr, dtype=float)
    if np.allclose(g0, g0_rr):
        raise ValueError("g0_rr must differ from g0")
    max_iter = n if max_iter is None else max_iter

    if basis is None:
        V1, V1err = initial_bases(factors, g0, g0_rr, basis_tol, use_undamped)
        rb = ReducedBasis(V1, V1err, [g0.copy()], [g0_rr.copy()], use_undamped)
    else:
        rb = ReducedBasis(basis.V1.copy(), basis.V1err.copy(), list(basis.used_params),
                          list(basis.rr_params), basis.includes_undamped)
    used = set().union(*(_indices_of(D, g) for g in rb.used_params))
    rr_used = set().union(*(_indices_of(D, g) for g in rb.rr_params))

    for it in range(max_iter + 1):
        cand = [i for i in range(D.shape[0]) if i not in used]
        if not cand:
            rb.history.append(_hist(it, 0.0, None, None, rb))
            rb.converged = True
            break
        est = ErrorEstimator(modal, rb.V1, rb.V1err, estimator)
        results = _sweep(est, D, cand, True, workers)
        deltas = np.array([e.value for e in results])
        k = int(np.argmax(deltas))
        dmax = float(deltas[k])
        g_next = cand[k]
        rr_cand = [(i, e.residual) for i, e in zip(cand, results) if i not in rr_used]
        if not rr_cand:
            rr_cand = [(i, e.residual) for i, e in zip(cand, results)]
        res = np.array([v for _, v in rr_cand])
        g_rr = rr_cand[int(np.argmax(res))][0]
        rb.history.append(_hist(it, dmax, D[g_next], D[g_rr], rb))
        log.info("offline rbm it=%d r=%d r_err=%d delta_max=%.3e", it, rb.r, rb.r_err, dmax)
        if dmax <= tol_f:
            rb.converged = True
            break
        if it == max_iter:
            if not strict:
                break
            raise ConvergenceError(f"offline phase not converged after {max_iter} enrichments "
                                   f"(delta_max={dmax:.3e})")
        r_before = rb.r
        rb.V1 = enrich(rb.V1, factors(D[g_next]), basis_tol)
        used.add(g_next)
        rb.used_params.append(D[g_next].copy())
        rr_used.add(g_rr)
        rb.rr_params.append(D[g_rr].copy())
        rb.V1err = enrich(orth(rb.V1, rb.V1err), factors(D[g_rr]), basis_tol)
        if rb.r == r_before and rb.r >= n:
            raise ConvergenceError(f"basis reached n={n} with delta_max={dmax:.3e} > tol_f")
    rb.factor_time = factors.solve_time
    return rb


def _hist(it, dmax, g, g_rr, rb):
    return {"iteration": it, "delta_max": dmax,
            "g": None if g is None else np.asarray(g).tolist(),
            "g_rr": None if g_rr is None else np.asarray(g_rr).tolist(),
            "r": rb.r, "r_err": rb.r_err}

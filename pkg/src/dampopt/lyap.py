"""Lyapunov solvers for ``A P + P A^T = -B B^T``.

Two routes are provided:

* :func:`solve_dense` -- Bartels-Stewart (real Schur form plus a
  quasi-triangular Sylvester back substitution).  Used as ground truth and for
  the small reduced equations.
* :func:`sign_solve` -- the Newton iteration for the matrix sign function on
  the embedded matrix ``[[A^T, 0], [B B^T, -A]]``, written for the modal
  structure ``A = At - U G V^T``.  ``At`` stays a set of 2x2 mode blocks,
  inverses go through Sherman-Morrison-Woodbury, and the right-hand side
  factor is column-compressed after every step.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as spla
from scipy.linalg import lapack

from .errors import CapacityError, DivergenceError, NumericalBreakdown, StabilityError

log = logging.getLogger(__name__)

DENSE_CAP = 2000


@dataclass(frozen=True, eq=False)
class LowRankFactor:
    """Tall factor ``Z`` (2n x q) with ``P ~ Z Z^T``."""

    Z: np.ndarray
    n: int
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim != 2 or Z.shape[0] != 2 * self.n:
            raise ValueError(f"factor must have {2 * self.n} rows, got shape {Z.shape}")
        if not np.all(np.isfinite(Z)):
            raise DivergenceError("low-rank factor has non-finite entries")
        object.__setattr__(self, "Z", Z)

    @property
    def Z1(self):
        return self.Z[: self.n]

    @property
    def Z2(self):
        return self.Z[self.n:]

    @property
    def rank(self):
        return self.Z.shape[1]

    def gramian(self):
        return self.Z @ self.Z.T

    def save(self, path):
        """Row-major float64 dump behind a small ``<qqq`` header (debugging aid)."""
        rows, cols = self.Z.shape
        with open(path, "wb") as fh:
            fh.write(b"LRF1")
            fh.write(struct.pack("<qqq", self.n, rows, cols))
            fh.write(np.ascontiguousarray(self.Z, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        if raw[:4] != b"LRF1":
            raise ValueError("not a low-rank factor dump")
        n, rows, cols = struct.unpack("<qqq", raw[4:28])
        Z = np.frombuffer(raw[28:], dtype="<f8").reshape(rows, cols).copy()
        return cls(Z, int(n))


# ---------------------------------------------------------------------------
# dense Bartels-Stewart


def _schur_real_parts(T):
    """Real parts of the eigenvalues of a real quasi-triangular matrix."""
    n = T.shape[0]
    re = np.empty(n)
    i = 0
    while i < n:
        if i + 1 < n and T[i + 1, i] != 0.0:
            re[i] = re[i + 1] = 0.5 * (T[i, i] + T[i + 1, i + 1])
            i += 2
        else:
            re[i] = T[i, i]
            i += 1
    return re


def solve_dense(A, Q, cap=DENSE_CAP):
    """Solve ``A P + P A^T + Q = 0`` for stable ``A`` and symmetric ``Q``.

    Raises :class:`StabilityError` if ``A`` has an eigenvalue with
    nonnegative real part and :class:`CapacityError` above ``cap`` (pass
    ``cap=None`` to lift the limit).
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    N = A.shape[0]
    if A.shape != (N, N) or Q.shape != (N, N):
        raise ValueError(f"shape mismatch: A {A.shape}, Q {Q.shape}")
    if cap is not None and N > cap:
        raise CapacityError(f"dense Lyapunov dimension {N} exceeds cap {cap}")
    if N == 0:
        return np.zeros((0, 0))
    if not np.all(np.isfinite(A)):
        raise StabilityError("state matrix has non-finite entries")
    T, S = spla.schur(A, output="real")
    re = _schur_real_parts(T)
    if np.any(re >= 0):
        raise StabilityError(f"matrix is not Hurwitz (max real part {re.max():.3e})")
    rhs = -(S.T @ Q @ S)
    Y, scale, info = lapack.dtrsyl(T, T, rhs, tranb="T")
    if info < 0:
        raise ValueError(f"dtrsyl argument error {info}")
    P = S @ (Y / scale) @ S.T
    return 0.5 * (P + P.T)


def dense_factor(P, n, trunc_tol=1e-8):
    """Low-rank factor of a PSD matrix via its eigendecomposition.

    Eigenvalues below ``trunc_tol**2`` times the largest are dropped, which
    matches a relative singular-value cut of ``trunc_tol`` on the factor.
    """
    lam, Q = spla.eigh(0.5 * (P + P.T))
    top = lam[-1] if lam.size else 0.0
    if top <= 0:
        return LowRankFactor(np.zeros((P.shape[0], 0)), n)
    keep = lam > (trunc_tol**2) * top
    keep &= lam > 0
    lam, Q = lam[keep][::-1], Q[:, keep][:, ::-1]
    return LowRankFactor(Q * np.sqrt(lam), n)


# ---------------------------------------------------------------------------
# structured sign-function iteration


def _lowrank_fro2(blocks, U, G, V):
    """``||X - U G V^T||_F^2`` with ``X`` given as mode blocks."""
    total = blocks.fro2()
    if U.shape[1]:
        XtU = blocks.apply_T(U)
        cross = 2.0 * np.sum((V.T @ XtU) * G.T)
        low = np.sum(((U.T @ U) @ G) * (G @ (V.T @ V)))
        scale = total + abs(cross) + abs(low)
        total += low - cross
        if total <= _CANCEL_FLOOR * scale:
            # the expansion has lost all accuracy; sum column chunks directly
            total = _lowrank_fro2_direct(blocks, U, G, V)
    return max(total, 0.0)


_CANCEL_FLOOR = 1e4 * np.finfo(float).eps


def _lowrank_fro2_direct(blocks, U, G, V, chunk=256):
    dim = U.shape[0]
    UG = U @ G
    total = 0.0
    for j0 in range(0, dim, chunk):
        E = np.zeros((dim, min(chunk, dim - j0)))
        E[np.arange(j0, j0 + E.shape[1]), np.arange(E.shape[1])] = 1.0
        total += float(np.sum((blocks.apply(E) - UG @ V[j0:j0 + E.shape[1]].T) ** 2))
    return total


def compress_columns(X, rtol, q_max=None):
    """Replace ``X`` by ``X'`` with ``X' X'^T ~ X X^T`` and fewer columns.

    Thin QR followed by an SVD of the triangular factor; singular values below
    ``rtol`` times the largest are dropped.
    """
    if X.shape[1] == 0:
        return X
    Qx, R = np.linalg.qr(X)
    u, s, _ = np.linalg.svd(R, full_matrices=False)
    if s[0] == 0:
        return X[:, :0]
    keep = s > max(rtol, 10 * np.finfo(float).eps) * s[0]
    r = int(np.count_nonzero(keep))
    if q_max is not None and r > q_max:
        warnings.warn(f"low-rank factor truncated from {r} to q_max={q_max} columns",
                      RuntimeWarning, stacklevel=3)
        r = q_max
    return Qx @ (u[:, :r] * s[:r])


def _compress_correction(U, G, V, rtol):
    """Recompress ``U G V^T``; returns ``(U, G, Ginv, V)`` with diagonal ``G``."""
    if U.shape[1] == 0:
        return U, G, G, V
    Qu, Ru = np.linalg.qr(U)
    Qv, Rv = np.linalg.qr(V)
    X, s, Yt = np.linalg.svd(Ru @ G @ Rv.T, full_matrices=False)
    if s[0] == 0:
        e = np.zeros((0, 0))
        return U[:, :0], e, e, V[:, :0]
    keep = s > max(rtol, 10 * np.finfo(float).eps) * s[0]
    s = s[keep]
    return Qu @ X[:, keep], np.diag(s), np.diag(1.0 / s), Qv @ Yt[keep].T


@dataclass
class SignIterationState:
    """Iterate of the structured sign iteration (kept for inspection/tests)."""

    tilde: object  # ModeBlocks
    U: np.ndarray
    V: np.ndarray
    G: np.ndarray
    Ginv: np.ndarray
    B: np.ndarray
    c: float = 1.0
    k: int = 0

    def dense_A(self):
        return self.tilde.to_dense() - self.U @ self.G @ self.V.T


def sign_solve(op, rhs, tol=1e-6, iter_max=10, trunc_tol=1e-8, q_max=None, callback=None):
    """Low-rank Gramian factor of ``A P + P A^T = -rhs rhs^T`` by the sign method.

    Parameters
    ----------
    op : StructuredStateOperator
        Stable operator ``At - U G U^T``.
    rhs : ndarray, shape (2n, m)
    tol : float
        Stop once ``||A_k + I||_F^2 <= tol``.
    iter_max : int
        Maximum number of Newton steps.
    trunc_tol : float
        Relative singular-value cut used when compressing the right-hand side
        factor and the low-rank part of ``A_k``.  ``0`` keeps everything that
        is numerically nonzero.
    q_max : int, optional
        Hard cap on the number of factor columns (default ``40*m``).
    callback : callable, optional
        Called with the :class:`SignIterationState` before every step.

    Returns
    -------
    LowRankFactor
        ``Z`` with ``Z Z^T ~ P``; ``info`` holds ``iterations``, ``converged``
        and the history of ``||A_k + I||_F``.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.ndim == 1:
        rhs = rhs[:, None]
    n = op.n
    if rhs.shape[0] != 2 * n:
        raise ValueError(f"rhs must have {2 * n} rows, got {rhs.shape[0]}")
    if tol <= 0 or iter_max < 1:
        raise ValueError("tol must be positive and iter_max >= 1")
    if q_max is None:
        q_max = max(40 * rhs.shape[1], 1)

    keep = op.gains != 0
    U = op.U[:, keep]
    gk = op.gains[keep]
    st = SignIterationState(op.tilde.copy(), U, U.copy(), np.diag(gk), np.diag(1.0 / gk),
                            rhs.copy())
    history = []
    converged = False
    for k in range(iter_max + 1):
        st.k = k
        err2 = _lowrank_fro2(st.tilde.shift(1.0), st.U, st.G, st.V)
        history.append(np.sqrt(err2))
        if not np.isfinite(err2) or not st.tilde.all_finite():
            raise DivergenceError("sign iteration produced non-finite values", iteration=k)
        if err2 <= tol:
            converged = True
            break
        if k == iter_max:
            break
        if callback is not None:
            callback(st)
        _sign_step(st, trunc_tol, q_max)

    if not converged:
        log.warning("sign_solve: ||A_k + I||_F = %.3e after %d iterations (tol %.1e on the square)",
                    history[-1], st.k, tol)
    Z = st.B / np.sqrt(2.0)
    info = {"iterations": st.k, "converged": converged, "residual_history": history}
    log.debug("sign_solve: %d iterations, converged=%s, rank=%d", st.k, converged, Z.shape[1])
    return LowRankFactor(Z, n, info)


def _move_singular_blocks(st):
    """Shift (near-)singular mode blocks and compensate in the low-rank part.

    ``At + S - (U G V^T + S)`` leaves ``A_k`` unchanged; with ``S`` supported
    on the offending modes this only adds two columns per mode.
    """
    t = st.tilde
    scale = t.a**2 + t.b**2 + t.c**2 + t.d**2
    bad = np.flatnonzero(np.abs(t.det()) <= 1e-10 * scale + np.finfo(float).tiny)
    if bad.size == 0:
        return
    n = t.n
    sigma = np.sqrt(np.maximum(scale[bad], 1.0))
    t.a[bad] += sigma
    t.d[bad] += sigma
    E = np.zeros((2 * n, 2 * bad.size))
    E[bad, np.arange(bad.size)] = 1.0
    E[n + bad, bad.size + np.arange(bad.size)] = 1.0
    sig2 = np.concatenate([sigma, sigma])
    st.U = np.hstack([st.U, E])
    st.V = np.hstack([st.V, E])
    st.G = spla.block_diag(st.G, np.diag(sig2))
    st.Ginv = spla.block_diag(st.Ginv, np.diag(1.0 / sig2))
    log.debug("sign_solve: moved %d singular mode blocks at step %d", bad.size, st.k)


def _sign_step(st, trunc_tol, q_max):
    k = st.k
    _move_singular_blocks(st)
    try:
        inv_blocks = st.tilde.inverse()
    except np.linalg.LinAlgError as exc:
        raise NumericalBreakdown("singular mode block", iteration=k) from exc
    q = st.U.shape[1]
    AiU = inv_blocks.apply(st.U)
    AiTV = inv_blocks.apply_T(st.V)
    if q:
        # capacitance G^{-1} - V^T At^{-1} U, scaled by G so that tiny retained
        # singular values of the correction do not spoil its conditioning
        VAiU = st.V.T @ AiU
        cap_s = np.eye(q) - st.G @ VAiU
        try:
            lu = spla.lu_factor(cap_s, check_finite=True)
        except (ValueError, spla.LinAlgError) as exc:
            raise NumericalBreakdown("non-finite capacitance matrix", iteration=k) from exc
        if np.any(np.diag(lu[0]) == 0) or np.linalg.cond(cap_s) > 1e14:
            raise NumericalBreakdown(f"singular capacitance matrix at step {k}", iteration=k)
        Sinv = spla.lu_solve(lu, st.G)
        cap = st.Ginv - VAiU
    else:
        cap = Sinv = np.zeros((0, 0))

    norm_A = np.sqrt(_lowrank_fro2(st.tilde, st.U, st.G, st.V))
    # A^{-1} = At^{-1} + At^{-1} U S^{-1} V^T At^{-1}
    norm_Ainv = np.sqrt(_lowrank_fro2(inv_blocks, AiU, -Sinv, AiTV))
    if not (norm_A > 0 and np.isfinite(norm_Ainv) and norm_Ainv > 0):
        raise DivergenceError("degenerate scaling factor", iteration=k)
    c = np.sqrt(norm_Ainv / norm_A)

    AinvB = inv_blocks.apply(st.B)
    if q:
        AinvB += AiU @ (Sinv @ (AiTV.T @ st.B))
    B = np.hstack([np.sqrt(c) * st.B, AinvB / np.sqrt(c)]) / np.sqrt(2.0)
    st.B = compress_columns(B, trunc_tol, q_max)

    st.tilde = st.tilde.combine(0.5 * c, inv_blocks, 0.5 / c)
    if q:
        st.U = np.hstack([st.U, AiU])
        st.V = np.hstack([st.V, AiTV])
        st.G = 0.5 * spla.block_diag(c * st.G, -Sinv / c)
        st.Ginv = spla.block_diag(2.0 * st.Ginv / c, -2.0 * c * cap)
        st.U, st.G, st.Ginv, st.V = _compress_correction(st.U, st.G, st.V, trunc_tol)
    st.c = c
    if not np.all(np.isfinite(st.B)):
        raise DivergenceError("sign iteration produced non-finite values", iteration=k)


# ---------------------------------------------------------------------------
# residual


def lyapunov_residual(op, Ztilde, rhs):
    """``||B B^T + A Z Z^T + Z Z^T A^T||_F`` without forming 2n x 2n matrices.

    The residual equals ``L J L^T`` with ``L = [B, A Z, Z]`` and a fixed
    permutation-like ``J``; a thin QR of ``L`` reduces it to a small matrix.
    """
    Z = Ztilde.Z if isinstance(Ztilde, LowRankFactor) else np.asarray(Ztilde, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.ndim == 1:
        rhs = rhs[:, None]
    if Z.shape[0] != op.dim or rhs.shape[0] != op.dim:
        raise ValueError("shape mismatch between operator, factor and right-hand side")
    m, q = rhs.shape[1], Z.shape[1]
    L = np.hstack([rhs, op.matvec(Z), Z])
    if L.shape[1] == 0:
        return 0.0
    _, R = np.linalg.qr(L)
    J = np.zeros((m + 2 * q, m + 2 * q))
    J[:m, :m] = np.eye(m)
    J[m:m + q, m + q:] = np.eye(q)
    J[m + q:, m:m + q] = np.eye(q)
    return float(np.linalg.norm(R @ J @ R.T))


# ---------------------------------------------------------------------------
# solver dispatch


@dataclass(frozen=True)
class GramianSolver:
    """Settings for computing Gramian factors of the full-order equation.

    ``method`` is ``"sign"``, ``"dense"`` or ``"auto"`` (dense when
    ``2n <= dense_cap``).
    """

    method: str = "auto"
    tol: float = 1e-6
    iter_max: int = 10
    trunc_tol: float = 1e-8
    q_max: int = None
    dense_cap: int = DENSE_CAP

    def use_dense(self, n):
        if self.method == "dense":
            return True
        if self.method == "auto":
            return 2 * n <= self.dense_cap
        if self.method == "sign":
            return False
        raise ValueError(f"unknown Gramian method {self.method!r}")

    def gramian(self, op, rhs):
        """Dense Gramian ``P`` (dense route only)."""
        Q = rhs @ rhs.T
        return solve_dense(op.to_dense(), Q, cap=max(self.dense_cap, 2 * op.n)
                           if self.method == "dense" else self.dense_cap)

    def factor(self, op, rhs):
        if self.use_dense(op.n):
            return dense_factor(self.gramian(op, rhs), op.n, self.trunc_tol)
        return sign_solve(op, rhs, tol=self.tol, iter_max=self.iter_max,
                          trunc_tol=self.trunc_tol, q_max=self.q_max)

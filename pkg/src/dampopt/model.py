"""Second-order vibrational systems and their modal first-order form.

A system ``M x'' + D(g) x' + K x = B u, y = C x`` with internal damping
``D_int = 2 alpha M^(1/2) (M^(-1/2) K M^(-1/2))^(1/2) M^(1/2)`` and external
dampers ``F G(g) F^T`` is diagonalised by the modal matrix ``Phi``.  In modal
coordinates the first-order state matrix is

    A(g) = At - U G(g) U^T,   At = [[0, I], [-Omega^2, -2 alpha Omega]],

with ``U = [0; Phi^T F]``.  ``At`` is stored per mode (n independent 2x2
blocks), never as a dense 2n x 2n matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as spla

from .errors import ConstructionError, EigenSolverError

#: Above this dimension SPD checks fall back to Cholesky instead of eigvalsh.
SPD_EIG_CAP = 2500
#: Dense materialisation of 2n x 2n operators is refused above this size.
DENSE_MATERIALIZE_CAP = 4000

SYSTEM_FORMAT = "dampopt-system/1"


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _check_spd(name, A, cap=SPD_EIG_CAP):
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConstructionError(f"{name} must be square, got shape {A.shape}")
    scale = max(np.abs(A).max(), 1.0)
    if np.abs(A - A.T).max() > 1e-12 * scale:
        raise ConstructionError(f"{name} is not symmetric")
    if A.shape[0] <= cap:
        lam_min = spla.eigvalsh(A, subset_by_index=[0, 0])[0]
        if not lam_min > 0:
            raise ConstructionError(
                f"{name} is not positive definite (smallest eigenvalue {lam_min:.3e})")
    else:
        try:
            spla.cholesky(A, lower=True)
        except spla.LinAlgError as exc:
            raise ConstructionError(f"{name} is not positive definite") from exc


def _sym_sqrt_pair(M):
    """Return (M^(1/2), M^(-1/2)) for SPD ``M`` (diagonal fast path)."""
    if np.count_nonzero(M - np.diag(np.diag(M))) == 0:
        d = np.diag(M)
        if np.any(d <= 0):
            raise ConstructionError("M is not positive definite")
        s = np.sqrt(d)
        return np.diag(s), np.diag(1.0 / s)
    lam, Q = spla.eigh(M)
    if np.any(lam <= 0):
        raise ConstructionError("M is not positive definite")
    s = np.sqrt(lam)
    return (Q * s) @ Q.T, (Q / s) @ Q.T


def build_internal_damping(M, K, alpha):
    """Internal damping as ``2*alpha`` times the critical damping.

    Computed through the symmetric eigendecomposition of
    ``M^(-1/2) K M^(-1/2)``; the result is symmetric positive semidefinite.
    """
    M = np.asarray(M, dtype=float)
    K = np.asarray(K, dtype=float)
    _check_spd("M", M)
    _check_spd("K", K)
    Mh, Mmh = _sym_sqrt_pair(M)
    S = Mmh @ K @ Mmh
    S = 0.5 * (S + S.T)
    lam, Q = spla.eigh(S)
    if np.any(lam <= 0):
        raise ConstructionError("K is not positive definite")
    root = (Q * np.sqrt(lam)) @ Q.T
    D = 2.0 * alpha * (Mh @ root @ Mh)
    return 0.5 * (D + D.T)


@dataclass(frozen=True, eq=False)
class SecondOrderSystem:
    """Vibrational model ``M x'' + (D_int + F G(g) F^T) x' + K x = B u``.

    ``groups[i]`` is the gain index driving damper column ``F[:, i]``; several
    dampers may share one gain.  ``bounds`` is an ``(ell, 2)`` array of gain
    intervals.
    """

    M: np.ndarray
    K: np.ndarray
    alpha: float
    B: np.ndarray
    C: np.ndarray
    F: np.ndarray
    bounds: np.ndarray
    groups: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        M = _frozen(self.M)
        K = _frozen(self.K)
        n = M.shape[0]
        B = _frozen(np.atleast_2d(self.B).reshape(n, -1) if np.size(self.B) else np.zeros((n, 0)))
        C = _frozen(np.asarray(self.C, dtype=float).reshape(-1, n))
        F = _frozen(np.asarray(self.F, dtype=float).reshape(n, -1))
        bounds = _frozen(np.asarray(self.bounds, dtype=float).reshape(-1, 2))
        if self.groups is None:
            groups = np.arange(F.shape[1])
        else:
            groups = np.asarray(self.groups, dtype=int).ravel()
        groups = _frozen(groups, dtype=int)

        _check_spd("M", M)
        _check_spd("K", K)
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConstructionError(f"alpha must be nonnegative, got {self.alpha}")
        if groups.shape[0] != F.shape[1]:
            raise ConstructionError("groups must have one entry per damper column of F")
        ell = bounds.shape[0]
        if F.shape[1] and (groups.min() < 0 or groups.max() >= ell):
            raise ConstructionError("groups refer to gain indices outside the bounds")
        if ell > n:
            raise ConstructionError(f"number of gains {ell} exceeds n={n}")
        if np.any(bounds[:, 0] <= 0) or np.any(bounds[:, 1] < bounds[:, 0]):
            raise ConstructionError("bounds must satisfy 0 < g_lo <= g_hi")

        for name, val in (("M", M), ("K", K), ("B", B), ("C", C), ("F", F),
                          ("bounds", bounds), ("groups", groups)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def n(self):
        return self.M.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]

    @property
    def ell(self):
        """Number of independent gains."""
        return self.bounds.shape[0]

    @property
    def n_dampers(self):
        return self.F.shape[1]

    def damper_gains(self, g):
        """Expand the gain vector to one value per damper column."""
        g = np.asarray(g, dtype=float).ravel()
        if g.shape[0] != self.ell:
            raise ConstructionError(f"expected {self.ell} gains, got {g.shape[0]}")
        return g[self.groups]

    def internal_damping(self):
        return build_internal_damping(self.M, self.K, self.alpha)

    def damping(self, g):
        gd = self.damper_gains(g)
        return self.internal_damping() + (self.F * gd) @ self.F.T

    def clamp(self, g):
        return np.clip(np.asarray(g, dtype=float), self.bounds[:, 0], self.bounds[:, 1])

    def with_dampers(self, F, groups=None, bounds=None, name=None):
        return SecondOrderSystem(
            self.M, self.K, self.alpha, self.B, self.C, F,
            self.bounds if bounds is None else bounds,
            groups=groups, name=self.name if name is None else name)


def first_order_dense(sys, g):
    """Untransformed first-order realisation ``(A, B, C)`` (oracle use only)."""
    n = sys.n
    Minv = np.linalg.inv(sys.M)
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -Minv @ sys.K
    A[n:, n:] = -Minv @ sys.damping(g)
    Bf = np.vstack([np.zeros((n, sys.m)), Minv @ sys.B])
    Cf = np.hstack([sys.C, np.zeros((sys.p, n))])
    return A, Bf, Cf


# ---------------------------------------------------------------------------
# per-mode 2x2 block algebra


class ModeBlocks:
    """``n`` independent 2x2 blocks ``[[a_i, b_i], [c_i, d_i]]``.

    Block ``i`` acts on the coordinate pair ``(i, n+i)`` of a 2n vector, so a
    ModeBlocks object represents a 2n x 2n matrix whose four n x n quadrants
    are diagonal.
    """

    __slots__ = ("a", "b", "c", "d")

    def __init__(self, a, b, c, d):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.d = np.asarray(d, dtype=float)

    @classmethod
    def companion(cls, omega, alpha):
        omega = np.asarray(omega, dtype=float)
        return cls(np.zeros_like(omega), np.ones_like(omega), -omega**2, -2.0 * alpha * omega)

    @property
    def n(self):
        return self.a.shape[0]

    def copy(self):
        return ModeBlocks(self.a.copy(), self.b.copy(), self.c.copy(), self.d.copy())

    def _split(self, X):
        X = np.asarray(X, dtype=float)
        n = self.n
        if X.shape[0] != 2 * n:
            raise ValueError(f"expected leading dimension {2 * n}, got {X.shape[0]}")
        if X.ndim == 1:
            return X[:n], X[n:], lambda t, b: np.concatenate([t, b])
        return X[:n], X[n:], lambda t, b: np.vstack([t, b])

    @staticmethod
    def _col(v, X):
        return v if X.ndim == 1 else v[:, None]

    def apply(self, X):
        top, bot, join = self._split(X)
        a, b, c, d = (self._col(v, top) for v in (self.a, self.b, self.c, self.d))
        return join(a * top + b * bot, c * top + d * bot)

    def apply_T(self, X):
        top, bot, join = self._split(X)
        a, b, c, d = (self._col(v, top) for v in (self.a, self.b, self.c, self.d))
        return join(a * top + c * bot, b * top + d * bot)

    def det(self):
        return self.a * self.d - self.b * self.c

    def inverse(self):
        det = self.det()
        if np.any(det == 0) or not np.all(np.isfinite(det)):
            raise np.linalg.LinAlgError("singular 2x2 mode block")
        return ModeBlocks(self.d / det, -self.b / det, -self.c / det, self.a / det)

    def solve(self, X):
        return self.inverse().apply(X)

    def solve_T(self, X):
        return self.inverse().apply_T(X)

    def fro2(self):
        return float(np.sum(self.a**2 + self.b**2 + self.c**2 + self.d**2))

    def combine(self, s, other, t):
        """Return ``s*self + t*other``."""
        return ModeBlocks(s * self.a + t * other.a, s * self.b + t * other.b,
                          s * self.c + t * other.c, s * self.d + t * other.d)

    def shift(self, sigma):
        """Return ``self + sigma*I``."""
        return ModeBlocks(self.a + sigma, self.b, self.c, self.d + sigma)

    def to_dense(self):
        n = self.n
        out = np.zeros((2 * n, 2 * n))
        i = np.arange(n)
        out[i, i] = self.a
        out[i, n + i] = self.b
        out[n + i, i] = self.c
        out[n + i, n + i] = self.d
        return out

    def interleaved_blocks(self):
        """Stack of the n blocks as an ``(n, 2, 2)`` array."""
        return np.stack([np.stack([self.a, self.b], -1), np.stack([self.c, self.d], -1)], -2)

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in (self.a, self.b, self.c, self.d))


# ---------------------------------------------------------------------------
# modal realisation


@dataclass(frozen=True, eq=False)
class ModalRealization:
    Phi: np.ndarray
    Omega: np.ndarray
    Bm: np.ndarray
    Cm: np.ndarray
    Fm: np.ndarray
    alpha: float
    groups: np.ndarray
    bounds: np.ndarray

    @property
    def n(self):
        return self.Omega.shape[0]

    @property
    def m(self):
        return self.Bm.shape[1]

    @property
    def p(self):
        return self.Cm.shape[0]

    @property
    def ell(self):
        return self.bounds.shape[0]

    @property
    def U(self):
        """Damper factor ``[0; Fm]`` of size 2n x n_dampers."""
        return np.vstack([np.zeros_like(self.Fm), self.Fm])

    @property
    def B_first(self):
        """Input matrix ``[0; Bm]`` of the first-order system."""
        return np.vstack([np.zeros_like(self.Bm), self.Bm])

    @property
    def C_first(self):
        return np.hstack([self.Cm, np.zeros_like(self.Cm)])

    def damper_gains(self, g):
        g = np.asarray(g, dtype=float).ravel()
        if g.shape[0] != self.ell:
            raise ConstructionError(f"expected {self.ell} gains, got {g.shape[0]}")
        return g[self.groups]

    def tilde_blocks(self):
        return ModeBlocks.companion(self.Omega, self.alpha)

    def with_dampers(self, F, groups=None, bounds=None):
        """Same modes and input/output maps with a different damper layout."""
        F = np.asarray(F, dtype=float).reshape(self.n, -1)
        groups = np.arange(F.shape[1]) if groups is None else np.asarray(groups, dtype=int)
        return ModalRealization(self.Phi, self.Omega, self.Bm, self.Cm,
                                _frozen(self.Phi.T @ F), self.alpha, _frozen(groups, int),
                                self.bounds if bounds is None else _frozen(bounds))

    def with_io(self, Bm=None, Cm=None):
        return ModalRealization(self.Phi, self.Omega,
                                self.Bm if Bm is None else _frozen(Bm),
                                self.Cm if Cm is None else _frozen(Cm),
                                self.Fm, self.alpha, self.groups, self.bounds)


def modal_transform(sys):
    """Diagonalise ``M`` and ``K`` simultaneously.

    ``Phi = M^(-1/2) Q`` where ``Q diag(Omega^2) Q^T = M^(-1/2) K M^(-1/2)``.
    Frequencies are ascending and each column of ``Phi`` has its
    largest-magnitude entry positive.
    """
    _, Mmh = _sym_sqrt_pair(sys.M)
    S = Mmh @ sys.K @ Mmh
    S = 0.5 * (S + S.T)
    try:
        lam, Q = spla.eigh(S)
    except spla.LinAlgError as exc:
        raise EigenSolverError(f"eigensolver failed: {exc}") from exc
    bad = np.flatnonzero(~(lam > 0))
    if bad.size:
        raise EigenSolverError(f"nonpositive eigenvalue at mode {bad[0]}", mode=int(bad[0]))
    Phi = Mmh @ Q
    pivot = np.argmax(np.abs(Phi), axis=0)
    signs = np.sign(Phi[pivot, np.arange(Phi.shape[1])])
    signs[signs == 0] = 1.0
    Phi = Phi * signs
    return ModalRealization(
        Phi=_frozen(Phi), Omega=_frozen(np.sqrt(lam)), Bm=_frozen(Phi.T @ sys.B),
        Cm=_frozen(sys.C @ Phi), Fm=_frozen(Phi.T @ sys.F), alpha=sys.alpha,
        groups=sys.groups, bounds=sys.bounds)


# ---------------------------------------------------------------------------
# structured state operator


class StructuredStateOperator:
    """``A(g) = At - U G U^T`` with ``At`` held as per-mode 2x2 blocks."""

    def __init__(self, omega, alpha, Fm, gains):
        self.omega = np.asarray(omega, dtype=float)
        self.alpha = float(alpha)
        self.Fm = np.asarray(Fm, dtype=float).reshape(self.omega.shape[0], -1)
        self.gains = np.asarray(gains, dtype=float).ravel()
        if self.gains.shape[0] != self.Fm.shape[1]:
            raise ConstructionError(
                f"{self.gains.shape[0]} gains for {self.Fm.shape[1]} damper columns")
        self.tilde = ModeBlocks.companion(self.omega, self.alpha)

    @property
    def n(self):
        return self.omega.shape[0]

    @property
    def dim(self):
        return 2 * self.n

    @property
    def U(self):
        return np.vstack([np.zeros_like(self.Fm), self.Fm])

    def matvec(self, X):
        X = np.asarray(X, dtype=float)
        out = self.tilde.apply(X)
        corr = (self.Fm * self.gains) @ (self.Fm.T @ X[self.n:])
        out[self.n:] -= corr
        return out

    def rmatvec(self, X):
        # A is not symmetric, but U G U^T is, so only the block part transposes.
        X = np.asarray(X, dtype=float)
        out = self.tilde.apply_T(X)
        out[self.n:] -= (self.Fm * self.gains) @ (self.Fm.T @ X[self.n:])
        return out

    def tilde_solve(self, X):
        return self.tilde.solve(X)

    def tilde_solve_T(self, X):
        return self.tilde.solve_T(X)

    def solve(self, X):
        """``A(g)^{-1} X`` by Sherman-Morrison-Woodbury on the damper block."""
        X = np.asarray(X, dtype=float)
        Y = self.tilde.solve(X)
        keep = self.gains != 0
        if not np.any(keep):
            return Y
        U = self.U[:, keep]
        AiU = self.tilde.solve(U)
        cap = np.diag(1.0 / self.gains[keep]) - U.T @ AiU
        return Y + AiU @ np.linalg.solve(cap, U.T @ Y)

    def to_dense(self, cap=DENSE_MATERIALIZE_CAP):
        if self.dim > cap:
            from .errors import CapacityError
            raise CapacityError(f"dense materialisation of size {self.dim} exceeds cap {cap}")
        A = self.tilde.to_dense()
        A[self.n:, self.n:] -= (self.Fm * self.gains) @ self.Fm.T
        return A


def assemble_operator(modal, g):
    """Structured ``A(g)`` for the gain vector ``g``."""
    gd = modal.damper_gains(g)
    return StructuredStateOperator(modal.Omega, modal.alpha, modal.Fm, gd)


# ---------------------------------------------------------------------------
# serialisation


def _triplets(A):
    A = np.asarray(A, dtype=float)
    r, c = np.nonzero(A)
    return {"shape": list(A.shape), "rows": r.tolist(), "cols": c.tolist(),
            "vals": A[r, c].tolist()}


def _from_triplets(d):
    A = np.zeros(tuple(d["shape"]))
    A[np.asarray(d["rows"], dtype=int), np.asarray(d["cols"], dtype=int)] = d["vals"]
    return A


def system_to_dict(sys):
    doc = {"format": SYSTEM_FORMAT, "name": sys.name, "n": sys.n, "alpha": sys.alpha}
    if np.count_nonzero(sys.M - np.diag(np.diag(sys.M))) == 0:
        doc["masses"] = np.diag(sys.M).tolist()
    else:
        doc["M"] = _triplets(sys.M)
    doc["K"] = _triplets(np.triu(sys.K))
    doc["B"] = _triplets(sys.B)
    doc["C"] = _triplets(sys.C)
    doc["F"] = _triplets(sys.F)
    doc["groups"] = sys.groups.tolist()
    doc["bounds"] = sys.bounds.tolist()
    return doc


def system_from_dict(doc):
    if doc.get("format") != SYSTEM_FORMAT:
        raise ConstructionError(f"unsupported system format {doc.get('format')!r}")
    n = int(doc["n"])
    M = np.diag(doc["masses"]) if "masses" in doc else _from_triplets(doc["M"])
    Ku = _from_triplets(doc["K"])
    K = Ku + np.triu(Ku, 1).T
    if M.shape != (n, n) or K.shape != (n, n):
        raise ConstructionError("matrix shapes do not match n")
    return SecondOrderSystem(M, K, doc["alpha"], _from_triplets(doc["B"]),
                             _from_triplets(doc["C"]), _from_triplets(doc["F"]),
                             np.asarray(doc["bounds"], dtype=float),
                             groups=doc.get("groups"), name=doc.get("name", ""))


def save_system(sys, path):
    Path(path).write_text(json.dumps(system_to_dict(sys), indent=1))


def load_system(path):
    return system_from_dict(json.loads(Path(path).read_text()))

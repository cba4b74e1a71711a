"""Small consistency checks run by ``dampopt verify``.

Each check builds random small systems and compares two independent
computations of the same quantity.
"""

from __future__ import annotations

import numpy as np

from .lyap import GramianSolver, sign_solve, solve_dense
from .model import SecondOrderSystem, assemble_operator, modal_transform


def random_system(rng, n, ell=2, m=2, p=2, gain_range=(1e2, 1e4), alpha=0.02):
    """Random well-conditioned system with diagonal masses and SPD stiffness.

    Each gain drives one grounded damper at a random mass.
    """
    M = np.diag(rng.uniform(1.0, 3.0, n))
    X = rng.standard_normal((n, n))
    K = X @ X.T / n + np.eye(n)
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    F = np.zeros((n, ell))
    F[rng.choice(n, size=ell, replace=ell > n), np.arange(ell)] = 1.0
    bounds = [gain_range] * ell
    return SecondOrderSystem(M, K, alpha, B, C, F, bounds)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


def check_modal(rng):
    worst = 0.0
    for _ in range(5):
        s = random_system(rng, int(rng.integers(2, 12)))
        mr = modal_transform(s)
        Phi = mr.Phi
        worst = max(worst,
                    np.linalg.norm(Phi.T @ s.M @ Phi - np.eye(s.n)),
                    np.linalg.norm(Phi.T @ s.K @ Phi - np.diag(mr.Omega**2)) / np.linalg.norm(s.K))
    return worst <= 1e-9, f"max identity defect {worst:.2e}"


def check_sign_vs_dense(rng):
    worst = 0.0
    for _ in range(5):
        s = random_system(rng, int(rng.integers(2, 12)), ell=int(rng.integers(1, 4)))
        mr = modal_transform(s)
        g = rng.uniform(*s.bounds[0], size=s.ell)
        op = assemble_operator(mr, g)
        B = mr.B_first
        P = solve_dense(op.to_dense(), B @ B.T)
        Z = sign_solve(op, B, tol=1e-12, iter_max=60).Z
        worst = max(worst, _rel(Z @ Z.T, P))
    return worst <= 1e-6, f"max relative Gramian difference {worst:.2e}"


def check_response_vs_quadrature(rng):
    from .response import exact_energy_response, quadrature_energy_response

    worst = 0.0
    for _ in range(3):
        s = random_system(rng, int(rng.integers(2, 8)), alpha=0.05)
        mr = modal_transform(s)
        g = rng.uniform(*s.bounds[0], size=s.ell)
        a = exact_energy_response(mr, g, GramianSolver("dense")).squared
        b = quadrature_energy_response(mr, g).squared
        worst = max(worst, abs(a - b) / a)
    return worst <= 1e-3, f"max relative difference {worst:.2e}"


def check_residual_formula(rng):
    from .rbm import ErrorEstimator, orth

    worst = 0.0
    for _ in range(5):
        n = int(rng.integers(4, 9))
        s = random_system(rng, n)
        mr = modal_transform(s)
        V1 = orth(rng.standard_normal((n, 2)))
        Ve = orth(rng.standard_normal((n, 2)), V1.copy())
        g = rng.uniform(*s.bounds[0], size=s.ell)
        est = ErrorEstimator(mr, V1, Ve).evaluate(g)
        A = assemble_operator(mr, g).to_dense()
        W = np.kron(np.eye(2), V1)
        We = np.kron(np.eye(2), Ve)
        X = We @ est.E_hat @ We.T + W @ est.P_hat @ W.T
        Bf = mr.B_first
        dense = np.linalg.norm(A @ X + X @ A.T + Bf @ Bf.T)
        # scale by ||BB^T|| too: a basis spanning everything has a roundoff-level residual
        worst = max(worst, abs(est.residual - dense) / max(dense, np.linalg.norm(Bf.T @ Bf)))
    return worst <= 1e-8, f"max relative difference {worst:.2e}"


CHECKS = {
    "modal identities": check_modal,
    "sign iteration vs Bartels-Stewart": check_sign_vs_dense,
    "energy response vs quadrature": check_response_vs_quadrature,
    "error residual formula": check_residual_formula,
}


def run_checks(seed=0):
    """Yield ``(name, passed, detail)`` for every check."""
    rng = np.random.default_rng(seed)
    for name, fn in CHECKS.items():
        try:
            passed, detail = fn(rng)
        except Exception as exc:  # a crash is a failed check, not a crash of verify
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        yield name, bool(passed), detail

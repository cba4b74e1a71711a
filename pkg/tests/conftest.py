import numpy as np
import pytest
import scipy.linalg as spla

from dampopt.checks import random_system
from dampopt.model import modal_transform


def dense_gramian(A, B):
    """Independent oracle: scipy's Bartels-Stewart for A P + P A^T = -B B^T."""
    P = spla.solve_continuous_lyapunov(A, -B @ B.T)
    return 0.5 * (P + P.T)


def modal_first_order(modal, g):
    """Explicitly assembled modal first-order matrices (A, B, C)."""
    n = modal.n
    gd = modal.damper_gains(g)
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -np.diag(modal.Omega**2)
    A[n:, n:] = -2 * modal.alpha * np.diag(modal.Omega) - modal.Fm @ np.diag(gd) @ modal.Fm.T
    B = np.vstack([np.zeros_like(modal.Bm), modal.Bm])
    C = np.hstack([modal.Cm, np.zeros_like(modal.Cm)])
    return A, B, C


def exact_squared(modal, g):
    A, B, C = modal_first_order(modal, g)
    P = dense_gramian(A, B)
    return float(np.trace(C @ P @ C.T))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_modal(rng):
    return modal_transform(random_system(rng, 8, ell=2, m=2, p=3))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icl_lab import linalg
from conftest import random_spd


def gauss_solve(A, b):
    """Dense Gaussian elimination with partial pivoting (oracle)."""
    A = A.astype(float).copy()
    b = b.astype(float).copy()
    n = len(b)
    for k in range(n):
        p = k + np.argmax(np.abs(A[k:, k]))
        A[[k, p]], b[[k, p]] = A[[p, k]], b[[p, k]]
        for i in range(k + 1, n):
            f = A[i, k] / A[k, k]
            A[i, k:] -= f * A[k, k:]
            b[i] -= f * b[k]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - A[i, i + 1:] @ x[i + 1:]) / A[i, i]
    return x


def test_cholesky_identity():
    assert np.allclose(linalg.cholesky_solve(np.eye(3), np.array([1.0, 2, 3])), [1, 2, 3], rtol=0, atol=1e-15)


def test_cholesky_diagonal():
    x = linalg.cholesky_solve(np.diag([2.0, 4.0]), np.array([2.0, 4.0]))
    assert np.allclose(x, [1, 1], rtol=0, atol=1e-15)


def test_cholesky_matches_elimination(rng):
    S = random_spd(rng, 5)
    b = rng.standard_normal(5)
    x = linalg.cholesky_solve(S, b)
    ref = gauss_solve(S, b)
    assert np.max(np.abs(x - ref)) <= 1e-10 * max(1, np.max(np.abs(ref)))
    assert np.linalg.norm(S @ x - b) <= 1e-8 * np.linalg.norm(b)


def test_cholesky_jitter_applied(rng):
    S = random_spd(rng, 4)
    b = rng.standard_normal(4)
    x = linalg.cholesky_solve(S, b, jitter=0.3)
    assert np.allclose((S + 0.3 * np.eye(4)) @ x, b, atol=1e-12)


def test_cholesky_escalates_on_semidefinite():
    v = np.array([1.0, 1.0, 0.0])
    S = np.outer(v, v) + np.diag([0.0, 0.0, 1.0])  # rank 2
    x = linalg.cholesky_solve(S, np.array([1.0, 1.0, 1.0]))
    assert np.all(np.isfinite(x))


def test_cholesky_raises_on_indefinite():
    with pytest.raises(linalg.NotPositiveDefinite):
        linalg.cholesky_solve(np.diag([1.0, -1.0]), np.ones(2))


def test_rejects_asymmetric():
    with pytest.raises(ValueError):
        linalg.cholesky_solve(np.array([[1.0, 2.0], [0.0, 1.0]]), np.ones(2))


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_cholesky_inverts_matvec(d, seed):
    rng = np.random.default_rng(seed)
    S = random_spd(rng, d)
    x = rng.standard_normal(d)
    back = linalg.cholesky_solve(S, S @ x)
    assert np.linalg.norm(back - x) <= 1e-8 * max(np.linalg.norm(x), 1e-300)


def test_eig_range_diag():
    assert linalg.sym_eig_range(np.diag([1.0, 2.0, 5.0])) == pytest.approx((1.0, 5.0), rel=1e-12)
    assert linalg.sym_eig_range(np.eye(4)) == pytest.approx((1.0, 1.0), rel=1e-12)


@pytest.mark.parametrize("d", [2, 3])
def test_eig_range_vs_char_poly(rng, d):
    S = random_spd(rng, d)
    if d == 2:
        tr, det = np.trace(S), np.linalg.det(S)
        disc = np.sqrt(tr * tr / 4 - det)
        roots = np.array([tr / 2 - disc, tr / 2 + disc])
    else:
        # monic characteristic polynomial from the invariants
        c2 = -np.trace(S)
        c1 = 0.5 * (np.trace(S) ** 2 - np.trace(S @ S))
        c0 = -np.linalg.det(S)
        roots = np.sort(np.roots([1.0, c2, c1, c0]).real)
    lo, hi = linalg.sym_eig_range(S)
    assert lo == pytest.approx(roots[0], rel=1e-6)
    assert hi == pytest.approx(roots[-1], rel=1e-6)


def test_eig_range_vs_power_iteration(rng):
    S = random_spd(rng, 6)
    v = np.ones(6)
    for _ in range(5000):
        v = S @ v
        v /= np.linalg.norm(v)
    top = v @ S @ v
    # inverse iteration through the hand-written solver
    v = np.ones(6)
    for _ in range(5000):
        v = linalg.cholesky_solve(S, v)
        v /= np.linalg.norm(v)
    bottom = v @ S @ v
    lo, hi = linalg.sym_eig_range(S)
    assert hi == pytest.approx(top, rel=1e-6)
    assert lo == pytest.approx(bottom, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(d=st.integers(1, 7), c=st.floats(-50, 50), seed=st.integers(0, 2**31))
def test_eig_range_shift(d, c, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, d))
    S = A + A.T
    lo, hi = linalg.sym_eig_range(S)
    lo_c, hi_c = linalg.sym_eig_range(S + c * np.eye(d))
    scale = max(abs(lo), abs(hi), abs(c), 1.0)
    assert abs(lo_c - (lo + c)) <= 1e-10 * scale
    assert abs(hi_c - (hi + c)) <= 1e-10 * scale


def test_jacobi_matches_numpy_d64(rng):
    S = random_spd(rng, 64)
    eig = linalg.jacobi_eigenvalues(S)
    assert np.allclose(eig, np.linalg.eigvalsh(S), rtol=1e-10, atol=1e-10)


def test_no_convergence_reported(rng):
    S = random_spd(rng, 6)
    with pytest.raises(linalg.NoConvergence):
        linalg.jacobi_eigenvalues(S, max_sweeps=1)


def test_batched_ridge_matches_single(rng):
    S = np.stack([random_spd(rng, 4) for _ in range(5)])
    a = rng.standard_normal((5, 4))
    s2 = rng.uniform(0, 3, 5)
    batched = linalg.batched_ridge_solve(S, a, s2)
    for b in range(5):
        single = linalg.cholesky_solve(S[b], a[b], jitter=s2[b])
        assert np.allclose(batched[b], single, rtol=1e-10, atol=1e-12)

"""Small dense linear algebra in double precision.

Everything here targets matrices of dimension d <= ~64. The single-system
routines are written out by hand; the batched helpers at the bottom lean on
``numpy.linalg`` because evaluation sweeps solve 10^5 systems at once.
"""

from __future__ import annotations

import math

import numpy as np

JITTER_CEILING = 1e-4
SYMMETRY_RTOL = 1e-10


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Cholesky failed even after escalating the diagonal jitter."""


class NoConvergence(RuntimeError):
    """Jacobi sweeps did not drive the off-diagonal mass to zero."""


class NonFinite(FloatingPointError):
    """A computation produced NaN or Inf."""


def check_finite(a, what="array"):
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"{what} contains NaN or Inf")
    return a


def check_symmetric(S, rtol=SYMMETRY_RTOL):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    check_finite(S, "matrix")
    scale = max(np.max(np.abs(S)), 1.0)
    if np.max(np.abs(S - S.T)) > rtol * scale:
        raise ValueError("matrix is not symmetric")
    return S


def _cholesky_factor(S):
    """Lower-triangular L with L L^T = S, or None if a pivot is not positive."""
    d = S.shape[0]
    L = np.zeros_like(S)
    for j in range(d):
        pivot = S[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > 0.0:
            return None
        L[j, j] = math.sqrt(pivot)
        L[j + 1:, j] = (S[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def _forward_sub(L, b):
    x = np.empty_like(b)
    for i in range(len(b)):
        x[i] = (b[i] - L[i, :i] @ x[:i]) / L[i, i]
    return x


def _back_sub(U, b):
    n = len(b)
    x = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - U[i, i + 1:] @ x[i + 1:]) / U[i, i]
    return x


def cholesky_solve(S, b, jitter=0.0):
    """Solve ``(S + jitter*I) x = b`` for symmetric positive definite ``S``.

    If the factorization breaks down, the jitter is raised (starting at the
    caller's value, or 1e-12 when that is zero) by factors of ten up to
    ``JITTER_CEILING`` before giving up with :class:`NotPositiveDefinite`.
    """
    S = check_symmetric(S)
    b = np.asarray(b, dtype=np.float64)
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    d = S.shape[0]
    eye = np.eye(d)
    current = jitter
    while True:
        L = _cholesky_factor(S + current * eye)
        if L is not None:
            return check_finite(_back_sub(L.T, _forward_sub(L, b)), "solution")
        current = 1e-12 if current == 0.0 else current * 10.0
        if current > JITTER_CEILING * (1 + 1e-9):
            raise NotPositiveDefinite(
                f"factorization failed with jitter up to {JITTER_CEILING:g}")


def jacobi_eigenvalues(S, tol=1e-14, max_sweeps=100):
    """All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps visit the pairs (p, q), p < q, in row order, so results are
    reproducible bit for bit.
    """
    A = check_symmetric(S).copy()
    d = A.shape[0]
    if d == 1:
        return A.diagonal().copy()
    norm = np.linalg.norm(A)
    if norm == 0.0:
        return np.zeros(d)
    for _ in range(max_sweeps):
        off = math.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off <= tol * norm:
            return np.sort(A.diagonal())
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                h = A[q, q] - A[p, p]
                g = 100.0 * abs(apq)
                if abs(A[p, p]) + g == abs(A[p, p]) and abs(A[q, q]) + g == abs(A[q, q]):
                    A[p, q] = A[q, p] = 0.0
                    continue
                if abs(h) + g == abs(h):
                    t = apq / h  # small-angle limit, avoids overflow in theta
                else:
                    theta = h / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows and columns p, q
                Ap = A[:, p].copy()
                Aq = A[:, q].copy()
                A[:, p] = c * Ap - s * Aq
                A[:, q] = s * Ap + c * Aq
                Ap = A[p, :].copy()
                Aq = A[q, :].copy()
                A[p, :] = c * Ap - s * Aq
                A[q, :] = s * Ap + c * Aq
                A[p, q] = A[q, p] = 0.0
    raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")


def sym_eig_range(S):
    """Return ``(min_eig, max_eig)`` of a symmetric matrix."""
    eig = jacobi_eigenvalues(S)
    return float(eig[0]), float(eig[-1])


# Batched helpers. Inputs carry a leading batch axis.

def batched_ridge_solve(Sigma, alpha, sigma2):
    """Solve ``(Sigma_b + sigma2_b I) w_b = alpha_b`` for every b in the batch."""
    Sigma = np.asarray(Sigma, dtype=np.float64)
    d = Sigma.shape[-1]
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), Sigma.shape[:-2])
    A = Sigma + sigma2[..., None, None] * np.eye(d)
    try:
        return np.linalg.solve(A, alpha[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def batched_eigh(Sigma):
    """Eigen-decomposition of a stack of symmetric matrices (ascending)."""
    return np.linalg.eigh(Sigma)

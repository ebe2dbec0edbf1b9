"""Dense linear-algebra and integration kernels used by every other module.

Matrices are plain ``numpy.ndarray`` in row-major order. Everything here is a
pure function; nothing keeps state between calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolation,
    IntegrationFault,
    NoSolutionError,
    NumericError,
    RankDeficiencyError,
)

SYMMETRY_TOL = 1e-10
EIG_RESIDUAL_TOL = 1e-9


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step RK4 settings. Steps above 10 ms are rejected."""

    step: float = 1e-3
    method: str = "rk4"

    def __post_init__(self):
        if not (0.0 < self.step <= 0.01):
            raise ContractViolation(f"integrator step must be in (0, 0.01], got {self.step}")
        if self.method != "rk4":
            raise ContractViolation(f"unknown integration method {self.method!r}")


def rk4_step(deriv, state, t, dt):
    """Advance ``state`` by one classical 4th-order Runge-Kutta step.

    ``deriv(state, t)`` must return an array of the same shape. Raises
    :class:`IntegrationFault` if any stage evaluates to a non-finite value.
    """
    if dt <= 0.0:
        raise ContractViolation(f"dt must be positive, got {dt}")
    x = np.asarray(state, dtype=float)
    k1 = np.asarray(deriv(x, t), dtype=float)
    k2 = np.asarray(deriv(x + 0.5 * dt * k1, t + 0.5 * dt), dtype=float)
    k3 = np.asarray(deriv(x + 0.5 * dt * k2, t + 0.5 * dt), dtype=float)
    k4 = np.asarray(deriv(x + dt * k3, t + dt), dtype=float)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationFault(f"non-finite derivative during RK4 step at t={t}", t=t)
    return out


def _check_symmetry(M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M))) if M.size else 1.0)
    skew = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if skew > SYMMETRY_TOL * scale:
        raise ContractViolation(f"matrix asymmetry {skew:.3e} exceeds tolerance")
    return 0.5 * (M + M.T)


def jacobi_eigh(M):
    """All eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi.

    Returns ``(w, V)`` with eigenvalues ascending and ``V[:, i]`` the
    eigenvector for ``w[i]``. Sized for the small (<= 20x20) matrices this
    package produces; raises on asymmetric input.
    """
    A = _check_symmetry(M).copy()
    n = A.shape[0]
    V = np.eye(n)
    if n == 1:
        return A[0, :].copy(), V
    norm = np.linalg.norm(A)
    if norm == 0.0:
        return np.zeros(n), V
    tol = 1e-15 * norm
    for _ in range(100):  # sweeps; quadratic convergence ends this early
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-18 * norm:
                    continue
                # symmetric Schur 2x2 rotation annihilating A[p, q]
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    tval = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    tval = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + tval * tval)
                s = tval * c
                rot_p = A[:, p].copy()
                rot_q = A[:, q].copy()
                A[:, p] = c * rot_p - s * rot_q
                A[:, q] = s * rot_p + c * rot_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = 0.0
                A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def sym_eig_min(M):
    """Smallest eigenvalue of a symmetric matrix (cyclic Jacobi)."""
    w, _ = jacobi_eigh(M)
    return float(w[0])


def sym_eig_range(M):
    """(smallest, largest) eigenvalue of a symmetric matrix."""
    w, _ = jacobi_eigh(M)
    return float(w[0]), float(w[-1])


def char_poly(A):
    """Characteristic polynomial coefficients of ``A`` (monic, descending).

    Faddeev-LeVerrier recursion; exact up to round-off for the small systems
    used here. Returns ``c`` with ``det(sI - A) = s^n + c[1] s^{n-1} + ...``.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    coeffs = np.zeros(n + 1)
    coeffs[0] = 1.0
    Mk = np.zeros_like(A)
    ident = np.eye(n)
    for k in range(1, n + 1):
        Mk = A @ Mk + coeffs[k - 1] * ident
        coeffs[k] = -np.trace(A @ Mk) / k
    return coeffs


def is_hurwitz(A, margin=0.0):
    """Check that every eigenvalue of ``A`` has real part < -margin.

    Uses a Routh-Hurwitz table on the characteristic polynomial, so no
    complex eigensolver is needed. Rows with a zero leading entry (poles on
    the imaginary axis or symmetric pole pairs) count as not Hurwitz.
    """
    A = np.asarray(A, dtype=float)
    if margin != 0.0:
        A = A + margin * np.eye(A.shape[0])
    coeffs = char_poly(A)
    n = len(coeffs) - 1
    if n == 0:
        return True
    if np.any(coeffs <= 0.0):
        # a Hurwitz polynomial has all-positive coefficients
        return False
    width = len(coeffs[0::2])
    row0 = np.zeros(width)
    row0[: len(coeffs[0::2])] = coeffs[0::2]
    row1 = np.zeros(width)
    row1[: len(coeffs[1::2])] = coeffs[1::2]
    rows = [row0, row1]
    for _ in range(n - 1):
        top, bot = rows[-2], rows[-1]
        if abs(bot[0]) < 1e-300:
            return False
        new = np.zeros(width)
        for j in range(width - 1):
            new[j] = (bot[0] * top[j + 1] - top[0] * bot[j + 1]) / bot[0]
        rows.append(new)
    first_col = np.array([r[0] for r in rows])
    return bool(np.all(first_col > 0.0))


def solve_lyapunov(Acl, S):
    """Solve ``Acl' P + P Acl = -S`` for symmetric positive definite P.

    ``Acl`` must be Hurwitz and ``S`` symmetric positive definite. Solved by
    Kronecker vectorization and a dense LU solve; fine for n <= 10.
    """
    Acl = np.asarray(Acl, dtype=float)
    S = _check_symmetry(S)
    n = Acl.shape[0]
    if S.shape != (n, n):
        raise ContractViolation(f"shape mismatch: Acl {Acl.shape} vs S {S.shape}")
    if sym_eig_min(S) <= 0.0:
        raise ContractViolation("S must be positive definite")
    if not is_hurwitz(Acl):
        raise NoSolutionError("Acl is not Hurwitz; Lyapunov equation has no SPD solution")
    ident = np.eye(n)
    K = np.kron(ident, Acl.T) + np.kron(Acl.T, ident)
    try:
        vec_p = np.linalg.solve(K, -S.reshape(n * n))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular Kronecker system: {exc}") from exc
    P = vec_p.reshape(n, n)
    P = 0.5 * (P + P.T)
    residual = np.linalg.norm(Acl.T @ P + P @ Acl + S)
    if residual > EIG_RESIDUAL_TOL * max(1.0, np.linalg.norm(S)):
        raise NumericError(f"Lyapunov residual {residual:.3e} out of tolerance")
    return P


def _poly_from_roots(roots):
    coeffs = np.array([1.0])
    for r in roots:
        coeffs = np.convolve(coeffs, np.array([1.0, -float(r)]))
    return coeffs


def _poly_of_matrix(coeffs, A):
    n = A.shape[0]
    out = np.zeros((n, n))
    for c in coeffs:
        out = out @ A + c * np.eye(n)
    return out


def place_observer_gain(A, C, poles):
    """Observer gain K so that ``A - K C`` has the requested real poles.

    Ackermann's formula applied to the dual system ``(A', C')``. Raises
    :class:`RankDeficiencyError` if ``(A, C)`` is unobservable, and verifies
    the placement by comparing characteristic polynomial coefficients.
    """
    A = np.asarray(A, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    if C.shape != (1, n):
        raise ContractViolation(f"expected a single-output C of shape (1, {n}), got {C.shape}")
    if len(poles) != n:
        raise ContractViolation(f"expected {n} poles, got {len(poles)}")
    Ad = A.T
    Bd = C.T
    target = _poly_from_roots(poles)
    pA = _poly_of_matrix(target, Ad)
    scale_p = max(1.0, float(np.max(np.abs(Ad))) ** n)
    if np.max(np.abs(pA)) <= 1e-12 * scale_p:
        # A already has the requested characteristic polynomial (Cayley-Hamilton)
        return np.zeros((n, 1))
    ctrl = np.hstack([np.linalg.matrix_power(Ad, k) @ Bd for k in range(n)])
    if np.linalg.matrix_rank(ctrl) < n:
        raise RankDeficiencyError("(A, C) is unobservable; cannot place observer poles")
    e_last = np.zeros(n)
    e_last[-1] = 1.0
    try:
        k_row = e_last @ np.linalg.solve(ctrl, pA)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"ill-conditioned observability matrix: {exc}") from exc
    K = k_row.reshape(n, 1)
    achieved = char_poly(A - K @ C)
    scale = max(1.0, float(np.max(np.abs(target))))
    if np.max(np.abs(achieved - target)) > 1e-8 * scale:
        raise NumericError("pole placement verification failed: characteristic polynomial mismatch")
    return K

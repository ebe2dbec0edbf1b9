"""Robust-CBF quadratic program: standard-form build and active-set solver.

The program projects a desired input onto the set where the worst-case
barrier rate stays nonnegative:

    min 1/2 ||u - u_des||^2
    s.t. F + sum_i min{Gminus_i u_i, Gplus_i u_i} >= 0

The concave-min constraint is rewritten with auxiliary variables z_i and
solved as a small dense QP by primal active-set iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

CONSTRAINT_SLACK_TOL = 1e-9
KKT_TOL = 1e-8


@dataclass(frozen=True)
class SafetyQP:
    """One safety-filter instance. Channel signs must be definite."""

    desired: np.ndarray
    F: float
    Gminus: np.ndarray
    Gplus: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "desired", np.atleast_1d(np.asarray(self.desired, dtype=float)))
        object.__setattr__(self, "Gminus", np.atleast_1d(np.asarray(self.Gminus, dtype=float)))
        object.__setattr__(self, "Gplus", np.atleast_1d(np.asarray(self.Gplus, dtype=float)))
        m = self.desired.size
        if self.Gminus.size != m or self.Gplus.size != m:
            raise ContractViolation("desired, Gminus, Gplus must share length")
        if np.any(self.Gminus > self.Gplus):
            raise ContractViolation("need Gminus <= Gplus per channel")
        if np.any(np.sign(self.Gminus) != np.sign(self.Gplus)) or np.any(self.Gminus == 0.0) or np.any(self.Gplus == 0.0):
            raise ContractViolation("channel bounds must be nonzero and share sign")

    @property
    def m(self) -> int:
        return self.desired.size


@dataclass(frozen=True)
class QPSolution:
    u: np.ndarray
    z: np.ndarray
    active_set: tuple
    status: str
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))


def constraint_value(qp: SafetyQP, u) -> float:
    """Value of the min-form safety constraint at ``u`` (feasible iff >= 0)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(qp.F + np.sum(np.minimum(qp.Gminus * u, qp.Gplus * u)))


def build_standard_form(qp: SafetyQP):
    """Stacked-matrix form over the decision vector (u, z).

    Returns ``(H, c, Aineq, b)`` where the objective is
    ``1/2 x' H x + c' x`` and the constraints read ``Aineq x >= b``. Rows
    come in per-channel pairs (lower gain, upper gain) followed by the
    single coupling row ``sum_i z_i >= -F``; shape is (2m+1) x 2m.
    """
    m = qp.m
    H = np.zeros((2 * m, 2 * m))
    H[:m, :m] = np.eye(m)
    c = np.concatenate([-qp.desired, np.zeros(m)])
    A = np.zeros((2 * m + 1, 2 * m))
    b = np.zeros(2 * m + 1)
    for i in range(m):
        A[2 * i, i] = qp.Gminus[i]
        A[2 * i, m + i] = -1.0
        A[2 * i + 1, i] = qp.Gplus[i]
        A[2 * i + 1, m + i] = -1.0
    A[2 * m, m:] = 1.0
    b[2 * m] = -qp.F
    return H, c, A, b


def _feasible_start(qp: SafetyQP):
    """Project the desired input to the constraint boundary.

    Moves along the steepest ascent direction of the constraint function
    (the active piece slopes). Single-input programs cross the piecewise
    boundary in closed form; larger ones bisect along the ascent ray.
    """
    u0 = qp.desired.copy()
    if qp.m == 1:
        # c(u) = F + Gminus*u for u >= 0 and F + Gplus*u for u <= 0; walk in
        # the sign direction and take the first zero crossing past u0
        sign = 1.0 if qp.Gplus[0] > 0.0 else -1.0
        d0, u00 = qp.desired[0], None
        cands = []
        r_pos = -qp.F / qp.Gminus[0]  # zero of the u >= 0 piece
        r_neg = -qp.F / qp.Gplus[0]  # zero of the u <= 0 piece
        if sign > 0.0:
            if r_pos >= max(d0, 0.0):
                cands.append(r_pos)
            if d0 < 0.0 and d0 <= r_neg <= 0.0:
                cands.append(r_neg)
        else:
            if r_neg <= min(d0, 0.0):
                cands.append(r_neg)
            if d0 > 0.0 and 0.0 <= r_pos <= d0:
                cands.append(r_pos)
        if not cands:
            return None
        u00 = min(cands, key=lambda v: abs(v - d0))
        return np.array([u00])
    slopes = np.where(u0 >= 0.0, qp.Gminus, qp.Gplus)

    def cval(t):
        return constraint_value(qp, u0 + t * slopes)

    hi = 1.0
    for _ in range(200):
        if cval(hi) >= 0.0:
            break
        hi *= 2.0
    else:
        return None
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cval(mid) >= 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-16 * max(1.0, hi):
            break
    return u0 + hi * slopes


def solve_safety_qp(qp: SafetyQP) -> QPSolution:
    """Unique minimizer of the safety QP via primal active-set iteration.

    If the desired input already satisfies the min-form constraint it is
    returned unchanged. Otherwise the solver starts from the desired input
    projected onto the constraint boundary and iterates on the standard
    form; KKT residual at the reported solution is <= 1e-8.
    """
    m = qp.m
    if constraint_value(qp, qp.desired) >= 0.0:
        z = np.minimum(qp.Gminus * qp.desired, qp.Gplus * qp.desired)
        return QPSolution(
            u=qp.desired.copy(), z=z, active_set=(), status="optimal",
            multipliers=np.zeros(0),
        )
    H, c, A, b = build_standard_form(qp)
    u0 = _feasible_start(qp)
    if u0 is None:
        return QPSolution(
            u=qp.desired.copy(), z=np.zeros(m), active_set=(), status="infeasible",
        )
    z0 = np.minimum(qp.Gminus * u0, qp.Gplus * u0)
    x = np.concatenate([u0, z0])
    # duplicate rows of an equal-gains channel act as one constraint
    dup = {2 * i + 1 for i in range(m) if qp.Gminus[i] == qp.Gplus[i]}
    work: list[int] = []
    resid = A @ x - b
    for j in range(2 * m + 1):
        if j in dup:
            continue
        if abs(resid[j]) <= 1e-11 * max(1.0, abs(b[j])):
            work.append(j)
    grad_scale = max(1.0, float(np.max(np.abs(qp.desired))) if m else 1.0)
    max_iter = 100 * m
    lam = np.zeros(0)
    for _ in range(max_iter):
        k = len(work)
        dim = 2 * m + k
        kkt = np.zeros((dim, dim))
        kkt[: 2 * m, : 2 * m] = H
        rhs = np.zeros(dim)
        rhs[: 2 * m] = -(H @ x + c)
        if k:
            Aw = A[work]
            kkt[: 2 * m, 2 * m :] = -Aw.T
            kkt[2 * m :, : 2 * m] = Aw
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        d = sol[: 2 * m]
        lam = sol[2 * m :]
        if np.max(np.abs(d)) <= 1e-11 * grad_scale:
            if k == 0 or np.min(lam) >= -1e-10:
                break
            drop = work[int(np.argmin(lam))]
            work.remove(drop)
            continue
        alpha = 1.0
        blocker = -1
        for j in range(2 * m + 1):
            if j in work or j in dup:
                continue
            ad = A[j] @ d
            if ad < -1e-14:
                t = (b[j] - A[j] @ x) / ad
                if t < alpha:
                    alpha = t
                    blocker = j
        x = x + alpha * d
        if blocker >= 0:
            work.append(blocker)
    else:
        return QPSolution(
            u=x[:m], z=x[m:], active_set=tuple(sorted(work)), status="degenerate",
            multipliers=lam,
        )
    u = x[:m]
    z = x[m:]
    if constraint_value(qp, u) < -CONSTRAINT_SLACK_TOL:
        return QPSolution(
            u=u, z=z, active_set=tuple(sorted(work)), status="degenerate",
            multipliers=lam,
        )
    return QPSolution(
        u=u, z=z, active_set=tuple(sorted(work)), status="optimal", multipliers=lam
    )


def kkt_residual(qp: SafetyQP, sol: QPSolution) -> float:
    """Max KKT violation (stationarity, feasibility, complementarity, dual sign)."""
    H, c, A, b = build_standard_form(qp)
    x = np.concatenate([sol.u, sol.z])
    g = H @ x + c
    slack = A @ x - b
    if sol.active_set:
        Aw = A[list(sol.active_set)]
        lam, *_ = np.linalg.lstsq(Aw.T, g, rcond=None)
    else:
        lam = np.zeros(0)
    stationarity = float(np.max(np.abs(g - (Aw.T @ lam if sol.active_set else 0.0))))
    primal = float(max(0.0, -np.min(slack)))
    dual = float(max(0.0, -np.min(lam))) if lam.size else 0.0
    comp = float(np.max(np.abs(lam * slack[list(sol.active_set)]))) if lam.size else 0.0
    return max(stationarity, primal, dual, comp)


def scalar_oracle(qp: SafetyQP, lo=-5.0, hi=5.0, resolution=1e-4):
    """Brute-force minimizer over a 1-D grid; test oracle only.

    Returns the best feasible grid point or None when no grid point is
    feasible.
    """
    if qp.m != 1:
        raise ContractViolation("scalar_oracle only handles single-input programs")
    count = int(round((hi - lo) / resolution)) + 1
    grid = np.linspace(lo, hi, count)
    feas = qp.F + np.minimum(qp.Gminus[0] * grid, qp.Gplus[0] * grid) >= 0.0
    if not np.any(feas):
        return None
    candidates = grid[feas]
    return float(candidates[np.argmin((candidates - qp.desired[0]) ** 2)])

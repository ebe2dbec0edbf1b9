"""Actor-critic adaptive optimal control.

Value and policy live on a shared feature basis: the critic weights score
the value surface, the actor weights feed the feedback policy, and both are
driven by the Bellman residual evaluated at a fixed set of extrapolation
points (simulated experience instead of probing noise).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import numerics
from .errors import LearningFault

GAMMA_MIN_DEFAULT = 1e-6
GAMMA_MAX_DEFAULT = 1e4


@dataclass(frozen=True)
class BasisSpec:
    """Feature basis for value approximation; sigma(0) must vanish."""

    L: int
    sigma: Callable[[np.ndarray], np.ndarray]
    sigma_jac: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"


def quadratic_basis_2d() -> BasisSpec:
    """The monomial basis [x1^2, x1*x2, x2^2] used by both benchmark studies."""
    return BasisSpec(
        L=3,
        sigma=lambda x: np.array([x[0] ** 2, x[0] * x[1], x[1] ** 2]),
        sigma_jac=lambda x: np.array(
            [[2.0 * x[0], 0.0], [x[1], x[0]], [0.0, 2.0 * x[1]]]
        ),
        name="quadratic_2d",
    )


@dataclass(frozen=True)
class CriticGains:
    kc: float
    ka1: float
    ka2: float
    nu: float
    beta: float

    def __post_init__(self):
        if self.nu <= 0.0:
            raise ValueError("normalization gain nu must be positive")


@dataclass(frozen=True)
class CriticState:
    """Actor/critic weights plus the least-squares gain matrix.

    ``extrap_points`` is the fixed (N, n) array of states where the Bellman
    residual is extrapolated each step.
    """

    Wc: np.ndarray
    Wa: np.ndarray
    Gamma: np.ndarray
    gains: CriticGains
    Wbar: float = 10.0
    proj_band: float = 0.1
    extrap_points: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    gamma_min: float = GAMMA_MIN_DEFAULT
    gamma_max: float = GAMMA_MAX_DEFAULT


def extrapolation_grid(half_width=1.0, points_per_axis=10) -> np.ndarray:
    """Uniform grid over the square of the given half-width, origin centered."""
    axis = np.linspace(-half_width, half_width, points_per_axis)
    g0, g1 = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack([g0.ravel(), g1.ravel()])


def radial_clamp(value, radius):
    """Rescale ``value`` onto the ball of the given radius if it overshot.

    Discrete integration can step past the projection band when gain*dt is
    large; this restores the hard bound without touching well-resolved
    trajectories (it is a no-op inside the ball).
    """
    value = np.asarray(value, dtype=float)
    norm = float(np.sqrt(np.sum(value * value)))
    if norm <= radius or norm == 0.0:
        return value
    return value * (radius / norm)


def smooth_proj(value, rhs, radius, band=0.1):
    """Smooth radial projection of an update direction onto a norm ball.

    Leaves ``rhs`` unchanged while ``value`` is inside the ball or the update
    points inward; across the band [radius, (1+band)*radius] the outward
    radial component is scaled smoothly to zero, so the norm cannot grow past
    the outer edge. Works for vectors and matrices (Frobenius geometry).
    """
    value = np.asarray(value, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    r2 = float(np.sum(value * value))
    rad2 = radius * radius
    if r2 <= rad2:
        return rhs
    inner = float(np.sum(value * rhs))
    if inner <= 0.0:
        return rhs
    outer2 = ((1.0 + band) * radius) ** 2
    scale = min(1.0, (r2 - rad2) / (outer2 - rad2))
    return rhs - scale * (inner / r2) * value


def approx_value(basis: BasisSpec, Wc, x) -> float:
    """Critic value estimate: inner product of weights and features."""
    return float(np.asarray(Wc, dtype=float) @ basis.sigma(np.asarray(x, dtype=float)))


def approx_policy(basis: BasisSpec, plant, cost, Wa, x) -> np.ndarray:
    """Feedback policy -1/2 R^-1 g(x)' dsigma(x)' Wa; also the desired input."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(plant.effectiveness(x), dtype=float).reshape(plant.n, plant.m)
    jac = basis.sigma_jac(x)
    Rinv = np.linalg.inv(cost.control_penalty)
    return -0.5 * Rinv @ g.T @ jac.T @ np.asarray(Wa, dtype=float)


def bellman_error(basis: BasisSpec, plant, cost, Wc, Wa, x, nu=1.0, drift=None):
    """Bellman residual, regressor and normalizer at one state.

    ``drift`` overrides the plant drift (pass the identified drift when the
    model is treated as unknown). Returns ``(delta, omega, rho)`` with
    ``rho = 1 + nu * omega'omega``.
    """
    x = np.asarray(x, dtype=float)
    f = np.asarray((drift or plant.drift)(x), dtype=float).reshape(plant.n)
    u = approx_policy(basis, plant, cost, Wa, x)
    g = np.asarray(plant.effectiveness(x), dtype=float).reshape(plant.n, plant.m)
    jac = basis.sigma_jac(x)
    omega = jac @ (f + g @ u)
    rho = 1.0 + nu * float(omega @ omega)
    delta = float(np.asarray(Wc) @ omega) + cost.state_cost(x) + float(u @ cost.control_penalty @ u)
    return delta, omega, rho


class ExtrapolationData:
    """Per-grid quantities that stay fixed while weights evolve.

    The drift at the grid is the only state-dependent piece; it is supplied
    per evaluation so the identified-model and true-model routes share the
    same kernel.
    """

    def __init__(self, basis: BasisSpec, plant, cost, points: np.ndarray):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        self.points = points
        N, n = points.shape
        m = plant.m
        self.N = N
        self.jac = np.stack([basis.sigma_jac(p) for p in points])  # (N, L, n)
        self.g = np.stack(
            [np.asarray(plant.effectiveness(p), dtype=float).reshape(n, m) for p in points]
        )
        self.Rinv = np.linalg.inv(cost.control_penalty)
        self.R = np.asarray(cost.control_penalty, dtype=float)
        # policy matrix: u_k = pol[k] @ Wa
        self.pol = -0.5 * np.einsum("ij,nkj,nlk->nil", self.Rinv, self.g, self.jac)
        GR = np.einsum("nim,mo,njo->nij", self.g, self.Rinv, self.g)
        self.Gsig = np.einsum("nli,nij,nkj->nlk", self.jac, GR, self.jac)
        self.Gsig_t = np.ascontiguousarray(np.transpose(self.Gsig, (0, 2, 1)))
        self.Q = np.array([cost.state_cost(p) for p in points])

    def regressors(self, Wc, Wa, drift_values, nu):
        """omega, rho, delta arrays for the current weights."""
        u = np.einsum("nil,l->ni", self.pol, Wa)
        v = drift_values + np.einsum("nim,nm->ni", self.g, u)
        omega = np.einsum("nli,ni->nl", self.jac, v)
        rho = 1.0 + nu * np.einsum("nl,nl->n", omega, omega)
        delta = omega @ Wc + self.Q + np.einsum("ni,ij,nj->n", u, self.R, u)
        return omega, rho, delta

    def rates(self, Wc, Wa, Gamma, gains: CriticGains, drift_values):
        """Right-hand sides of the three weight ODEs (projection included)."""
        omega, rho, delta = self.regressors(Wc, Wa, drift_values, gains.nu)
        N = self.N
        wn = omega / rho[:, None]
        dWc = -(gains.kc / N) * (Gamma @ (omega.T @ (delta / rho)))
        reg = wn.T @ wn
        dGamma = gains.beta * Gamma - (gains.kc / N) * (Gamma @ reg @ Gamma)
        gw = self.Gsig_t @ Wa  # (N, L)
        coeff = (omega @ Wc) / rho
        actor_term = (gains.kc / (4.0 * N)) * (gw.T @ coeff)
        return dWc, dGamma, actor_term


def critic_rates(state: CriticState, data: ExtrapolationData, drift_values):
    """(dWc, dGamma, dWa) under the update laws, actor projection applied."""
    dWc, dGamma, actor_term = data.rates(
        state.Wc, state.Wa, state.Gamma, state.gains, drift_values
    )
    fa = -state.gains.ka1 * (state.Wa - state.Wc) + actor_term - state.gains.ka2 * state.Wa
    dWa = smooth_proj(state.Wa, fa, state.Wbar, state.proj_band)
    return dWc, dGamma, dWa


def update_step(state: CriticState, basis: BasisSpec, plant, cost, dt, drift=None) -> CriticState:
    """One RK4 step of the coupled (Wc, Gamma, Wa) weight dynamics.

    ``drift`` evaluates the drift used in the extrapolated regressors; when
    omitted, the plant's true drift is used. Gamma integration is paused for
    the step if it would leave the configured eigenvalue corridor, and the
    result is symmetrized to kill round-off drift.
    """
    data = ExtrapolationData(basis, plant, cost, state.extrap_points)
    drift_fn = drift or plant.drift
    drift_values = np.stack(
        [np.asarray(drift_fn(p), dtype=float).reshape(-1) for p in data.points]
    )
    L = state.Wc.size

    def packed_rates(vec, _t):
        Wc = vec[:L]
        Wa = vec[L : 2 * L]
        Gamma = vec[2 * L :].reshape(L, L)
        probe = replace(state, Wc=Wc, Wa=Wa, Gamma=Gamma)
        dWc, dGamma, dWa = critic_rates(probe, data, drift_values)
        return np.concatenate([dWc, dWa, dGamma.ravel()])

    vec0 = np.concatenate([state.Wc, state.Wa, state.Gamma.ravel()])
    vec1 = numerics.rk4_step(packed_rates, vec0, 0.0, dt)
    if not np.all(np.isfinite(vec1)):
        raise LearningFault("non-finite critic update", snapshot=state)
    Wc = vec1[:L]
    Wa = radial_clamp(vec1[L : 2 * L], state.Wbar * (1.0 + state.proj_band))
    Gamma = vec1[2 * L :].reshape(L, L)
    Gamma = 0.5 * (Gamma + Gamma.T)
    lo, hi = numerics.sym_eig_range(Gamma)
    if lo < state.gamma_min or hi > state.gamma_max:
        Gamma = state.Gamma  # pause the gain update at the corridor edge
    return replace(state, Wc=Wc, Wa=Wa, Gamma=Gamma)


def rank_monitor(state: CriticState, basis: BasisSpec, plant, cost, drift=None) -> float:
    """Smallest eigenvalue of the averaged normalized-regressor Gram matrix."""
    data = ExtrapolationData(basis, plant, cost, state.extrap_points)
    drift_fn = drift or plant.drift
    drift_values = np.stack(
        [np.asarray(drift_fn(p), dtype=float).reshape(-1) for p in data.points]
    )
    omega, rho, _ = data.regressors(state.Wc, state.Wa, drift_values, state.gains.nu)
    wn = omega / rho[:, None]
    gram = (wn.T @ wn) / data.N
    return numerics.sym_eig_min(gram)

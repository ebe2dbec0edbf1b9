"""DNN-based Luenberger state observer with ICL outer-layer adaptation.

The inner layers form a frozen feature map (retrained in batches by the
trainer module); the outer-layer weight matrix adapts continuously from
integral history-stack data. Drift estimate: ``A x + theta' phi(features)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import numerics
from .critic import radial_clamp, smooth_proj
from .errors import ConfigError, ContractViolation, ObserverFault


def _elliot_sym(s):
    return s / (1.0 + np.abs(s))


def _elliot_sym_deriv(s):
    return 1.0 / (1.0 + np.abs(s)) ** 2


def _log_sigmoid(s):
    return 1.0 / (1.0 + np.exp(-s))


def _log_sigmoid_deriv(s):
    v = _log_sigmoid(s)
    return v * (1.0 - v)


def _tanh_sigmoid(s):
    return np.tanh(s)


def _tanh_sigmoid_deriv(s):
    return 1.0 - np.tanh(s) ** 2


ACTIVATIONS = {
    "elliot_sym": (_elliot_sym, _elliot_sym_deriv),
    "log_sigmoid": (_log_sigmoid, _log_sigmoid_deriv),
    "tanh_sigmoid": (_tanh_sigmoid, _tanh_sigmoid_deriv),
}


@dataclass(frozen=True)
class DnnSpec:
    """Frozen inner layers of the observer network.

    ``weights[j]`` has shape (width_in + 1, width_out); the last row is the
    bias. ``bias_features`` appends a constant-one slot to the feature
    vector, so the outer layer can absorb constant drift offsets.
    """

    activations: tuple
    weights: tuple
    bias_features: bool = True

    def __post_init__(self):
        if len(self.activations) != len(self.weights):
            raise ConfigError("one activation tag per layer required")
        for tag in self.activations:
            if tag not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {tag!r}")
        for j in range(1, len(self.weights)):
            if self.weights[j].shape[0] != self.weights[j - 1].shape[1] + 1:
                raise ConfigError("layer width mismatch between consecutive weights")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0] - 1

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1] + (1 if self.bias_features else 0)

    @property
    def widths(self) -> tuple:
        return tuple(w.shape[1] for w in self.weights)

    def to_document(self) -> str:
        doc = {
            "input_dim": self.input_dim,
            "widths": list(self.widths),
            "activations": list(self.activations),
            "bias_features": self.bias_features,
            "weights": [w.ravel().tolist() for w in self.weights],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_document(cls, text: str) -> "DnnSpec":
        doc = json.loads(text)
        widths = [doc["input_dim"]] + list(doc["widths"])
        weights = []
        for j, flat in enumerate(doc["weights"]):
            shape = (widths[j] + 1, widths[j + 1])
            weights.append(np.array(flat, dtype=float).reshape(shape))
        return cls(
            activations=tuple(doc["activations"]),
            weights=tuple(weights),
            bias_features=bool(doc["bias_features"]),
        )


def make_dnn(input_dim, hidden_widths, activations, rng, bias_features=True) -> DnnSpec:
    """Random inner weights, scaled by fan-in so features vary over O(1) states."""
    widths = [input_dim] + list(hidden_widths)
    weights = []
    for j in range(len(hidden_widths)):
        fan_in = widths[j] + 1
        weights.append(rng.standard_normal((fan_in, widths[j + 1])) / np.sqrt(fan_in))
    return DnnSpec(activations=tuple(activations), weights=tuple(weights), bias_features=bias_features)


def dnn_features(dnn: DnnSpec, x) -> np.ndarray:
    """Forward pass through the frozen layers; returns the feature vector.

    Accepts a single state (n,) or a batch (B, n); batch in, batch out.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = x[None, :] if single else x
    for tag, W in zip(dnn.activations, dnn.weights):
        # linear part plus the bias row, without materializing the augmented input
        a = ACTIVATIONS[tag][0](a @ W[:-1] + W[-1])
    if dnn.bias_features:
        out = np.empty((a.shape[0], a.shape[1] + 1))
        out[:, :-1] = a
        out[:, -1] = 1.0
        a = out
    return a[0] if single else a


@dataclass(frozen=True)
class ObserverGains:
    k_theta: float
    kappa: float
    gamma: np.ndarray  # (p, p) SPD adaptation gain


@dataclass(frozen=True)
class ObserverState:
    """Estimate, outer-layer weights and the fixed observer matrices."""

    xhat: np.ndarray
    theta_hat: np.ndarray  # (p, n)
    A: np.ndarray
    K: np.ndarray  # (n, q)
    C: np.ndarray  # (q, n)
    P: np.ndarray
    dnn: DnnSpec
    gains: ObserverGains
    theta_bar: float = 50.0
    proj_band: float = 0.1


def make_observer(
    xhat0,
    A,
    C,
    dnn: DnnSpec,
    gains: ObserverGains,
    poles=None,
    K=None,
    S=None,
    theta_hat0=None,
    theta_bar=50.0,
    proj_band=0.1,
) -> ObserverState:
    """Build an observer state, verifying ``A - K C`` is Hurwitz.

    Either ``poles`` (gain computed by placement) or an explicit ``K``
    override must be supplied. ``P`` solves the closed-loop Lyapunov
    equation against ``S`` (identity by default).
    """
    A = np.asarray(A, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    if K is None:
        if poles is None:
            raise ConfigError("provide observer poles or an explicit gain K")
        K = numerics.place_observer_gain(A, C, list(poles))
    K = np.asarray(K, dtype=float).reshape(n, C.shape[0])
    Acl = A - K @ C
    if not numerics.is_hurwitz(Acl):
        raise ContractViolation("A - K C is not Hurwitz")
    S = np.eye(n) if S is None else np.asarray(S, dtype=float)
    P = numerics.solve_lyapunov(Acl, S)
    p = dnn.feature_dim
    theta0 = np.zeros((p, n)) if theta_hat0 is None else np.asarray(theta_hat0, dtype=float)
    if theta0.shape != (p, n):
        raise ConfigError(f"theta_hat must be ({p}, {n}), got {theta0.shape}")
    if gains.gamma.shape != (p, p):
        raise ConfigError(f"gamma must be ({p}, {p}), got {gains.gamma.shape}")
    return ObserverState(
        xhat=np.asarray(xhat0, dtype=float).reshape(n),
        theta_hat=theta0,
        A=A,
        K=K,
        C=C,
        P=P,
        dnn=dnn,
        gains=gains,
        theta_bar=theta_bar,
        proj_band=proj_band,
    )


def estimated_drift(obs: ObserverState, xhat) -> np.ndarray:
    """Identified drift ``A xhat + theta' phi(features(xhat))``."""
    xhat = np.asarray(xhat, dtype=float)
    return obs.A @ xhat + obs.theta_hat.T @ dnn_features(obs.dnn, xhat)


def observer_rhs(obs: ObserverState, xhat, u, y, effectiveness):
    """Right-hand side of the observer ODE at the given inputs."""
    xhat = np.asarray(xhat, dtype=float)
    g = np.asarray(effectiveness(xhat), dtype=float).reshape(xhat.size, -1)
    innov = np.atleast_1d(y) - obs.C @ xhat
    return estimated_drift(obs, xhat) + g @ np.atleast_1d(u) + obs.K @ innov


def observer_step(obs: ObserverState, u, y, effectiveness, dt) -> ObserverState:
    """One RK4 step of the estimate; outer weights held fixed within the step."""
    xhat1 = numerics.rk4_step(
        lambda s, t: observer_rhs(obs, s, u, y, effectiveness), obs.xhat, 0.0, dt
    )
    if not np.all(np.isfinite(xhat1)):
        raise ObserverFault("non-finite observer state")
    return replace(obs, xhat=xhat1)


def icl_rates(theta_hat, Y, Xdiff, Gu, gains: ObserverGains, theta_bar, proj_band):
    """Projected outer-layer update direction from stacked ICL data."""
    resid = Xdiff - Gu - Y @ theta_hat  # (M, n)
    denom = 1.0 + gains.kappa * np.einsum("mp,mp->m", Y, Y)
    raw = gains.k_theta * gains.gamma @ (Y.T @ (resid / denom[:, None]))
    return smooth_proj(theta_hat, raw, theta_bar, proj_band)


def icl_update(obs: ObserverState, stack, dt) -> ObserverState:
    """One RK4 step of the outer-layer weights under the ICL law.

    ``stack`` must expose ``stacked()`` returning (Y, Xdiff, Gu) arrays; an
    empty stack leaves the weights unchanged.
    """
    Y, Xdiff, Gu = stack.stacked()
    if Y.shape[0] == 0:
        return obs
    shape = obs.theta_hat.shape

    def rates(vec, _t):
        theta = vec.reshape(shape)
        return icl_rates(theta, Y, Xdiff, Gu, obs.gains, obs.theta_bar, obs.proj_band).ravel()

    theta1 = numerics.rk4_step(rates, obs.theta_hat.ravel(), 0.0, dt).reshape(shape)
    theta1 = radial_clamp(theta1, obs.theta_bar * (1.0 + obs.proj_band))
    return replace(obs, theta_hat=theta1)

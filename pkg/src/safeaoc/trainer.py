"""Levenberg-Marquardt batch training of the observer's inner layers.

The outer-layer weights stay frozen during a batch; the inner layers are fit
so the frozen outer map reproduces the drift-attributable residual logged
along the observer trajectory. Weight swaps happen only between integration
steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyDataError
from .observer import ACTIVATIONS, DnnSpec


@dataclass(frozen=True)
class TrainSet:
    """Input/target pairs plus a deterministic stride split."""

    inputs: np.ndarray  # (N, n)
    targets: np.ndarray  # (N, n)
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray


@dataclass(frozen=True)
class LmConfig:
    max_epochs: int = 10000
    target_mse: float = 5e-3
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    val_patience: int = 50
    damping_max: float = 1e12

    def __post_init__(self):
        if self.target_mse <= 0.0:
            raise ValueError("target_mse must be positive")
        if self.damping_up <= 1.0 or not (0.0 < self.damping_down < 1.0):
            raise ValueError("damping factors must satisfy up > 1 and 0 < down < 1")


@dataclass(frozen=True)
class TrainResult:
    dnn: DnnSpec
    status: str  # reached_target | epoch_budget | patience | stalled | no_op
    epochs: int
    train_mse: float
    val_mse: float


def build_trainset(times, xhat, xhat_dot, u, y, obs, effectiveness,
                   fractions=(0.7, 0.15, 0.15), seed=0) -> TrainSet:
    """Training pairs from logged observer samples.

    Targets are the drift residual attributable to the feature network:
    ``xhat_dot - A xhat - g(xhat) u - K (y - C xhat)``. The split walks
    residues of a length-20 stride pattern, phase-shifted by the seed, so a
    fixed seed reproduces the same 70/15/15 partition.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise EmptyDataError("empty observer log")
    if np.any(np.diff(times) <= 0.0):
        raise EmptyDataError("observer log must be strictly time ordered")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    xhat = np.atleast_2d(np.asarray(xhat, dtype=float))
    xhat_dot = np.atleast_2d(np.asarray(xhat_dot, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    N = times.size
    targets = np.empty_like(xhat)
    for j in range(N):
        g = np.asarray(effectiveness(xhat[j]), dtype=float).reshape(xhat.shape[1], -1)
        innov = y[j] - obs.C @ xhat[j]
        targets[j] = xhat_dot[j] - obs.A @ xhat[j] - g @ u[j] - obs.K @ innov
    stride = 20
    lim_train = int(round(fractions[0] * stride))
    lim_val = lim_train + int(round(fractions[1] * stride))
    residues = (np.arange(N) + int(seed)) % stride
    return TrainSet(
        inputs=xhat,
        targets=targets,
        train_idx=np.flatnonzero(residues < lim_train),
        val_idx=np.flatnonzero((residues >= lim_train) & (residues < lim_val)),
        test_idx=np.flatnonzero(residues >= lim_val),
    )


def _shapes(dnn: DnnSpec):
    return [w.shape for w in dnn.weights]


def _flatten(weights):
    return np.concatenate([w.ravel() for w in weights])


def _unflatten(vec, shapes):
    out = []
    pos = 0
    for shape in shapes:
        size = shape[0] * shape[1]
        out.append(vec[pos : pos + size].reshape(shape))
        pos += size
    return tuple(out)


def forward_and_jacobian(dnn: DnnSpec, theta, X, need_jacobian=True):
    """Network outputs theta' phi(features(X)) and their inner-weight Jacobian.

    Returns ``(outputs (B, n), J (B*n, n_params))``; rows of J are ordered
    sample-major then output-component. ``J`` is None when not requested.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    theta = np.asarray(theta, dtype=float)
    B = X.shape[0]
    acts, derivs, augs, zs = [], [], [], []
    a = X
    for tag, W in zip(dnn.activations, dnn.weights):
        aug = np.concatenate([a, np.ones((B, 1))], axis=1)
        z = aug @ W
        fn, dfn = ACTIVATIONS[tag]
        a = fn(z)
        augs.append(aug)
        zs.append(z)
        acts.append(a)
        derivs.append(dfn(z))
    feats = np.concatenate([a, np.ones((B, 1))], axis=1) if dnn.bias_features else a
    outputs = feats @ theta
    if not need_jacobian:
        return outputs, None
    n_out = theta.shape[1]
    k = len(dnn.weights)
    width_last = dnn.weights[-1].shape[1]
    shapes = _shapes(dnn)
    sizes = [s[0] * s[1] for s in shapes]
    total = sum(sizes)
    J = np.empty((B * n_out, total))
    for o in range(n_out):
        seed = theta[:width_last, o]
        G = derivs[-1] * seed[None, :]
        blocks = [None] * k
        for j in range(k - 1, -1, -1):
            blocks[j] = np.einsum("bi,bj->bij", augs[j], G)
            if j > 0:
                G = (G @ dnn.weights[j][:-1, :].T) * derivs[j - 1]
        flat = np.concatenate([blk.reshape(B, -1) for blk in blocks], axis=1)
        J[o::n_out] = flat
    return outputs, J


def _mse(outputs, targets):
    return float(np.mean(np.sum((outputs - targets) ** 2, axis=1)))


def lm_train(dnn: DnnSpec, theta_frozen, tset: TrainSet, cfg: LmConfig) -> TrainResult:
    """Fit the inner layers by damped Gauss-Newton steps on the train split.

    A step is accepted only if it lowers the training MSE (damping shrinks);
    otherwise the damping grows and the step is retried. Stops on the MSE
    target, the epoch budget, validation patience, or a damping blow-up
    (the best weights so far are returned in every case).
    """
    shapes = _shapes(dnn)
    w = _flatten(dnn.weights)
    theta = np.asarray(theta_frozen, dtype=float)
    Xtr = tset.inputs[tset.train_idx]
    Ttr = tset.targets[tset.train_idx]
    Xval = tset.inputs[tset.val_idx]
    Tval = tset.targets[tset.val_idx]

    def rebuild(vec):
        return DnnSpec(
            activations=dnn.activations,
            weights=_unflatten(vec, shapes),
            bias_features=dnn.bias_features,
        )

    def train_mse(vec):
        out, _ = forward_and_jacobian(rebuild(vec), theta, Xtr, need_jacobian=False)
        return _mse(out, Ttr)

    def val_mse(vec):
        if Xval.shape[0] == 0:
            return np.inf
        out, _ = forward_and_jacobian(rebuild(vec), theta, Xval, need_jacobian=False)
        return _mse(out, Tval)

    if cfg.max_epochs == 0:
        return TrainResult(dnn=dnn, status="no_op", epochs=0,
                           train_mse=train_mse(w), val_mse=val_mse(w))
    mse = train_mse(w)
    best_w, best_mse = w.copy(), mse
    best_val = val_mse(w)
    lam = cfg.damping_init
    bad_val = 0
    status = "epoch_budget"
    epochs = 0
    n_params = w.size
    for epochs in range(1, cfg.max_epochs + 1):
        if mse <= cfg.target_mse:
            status = "reached_target"
            epochs -= 1
            break
        out, J = forward_and_jacobian(rebuild(w), theta, Xtr)
        err = (out - Ttr).reshape(-1)
        JtJ = J.T @ J
        Jte = J.T @ err
        stepped = False
        while lam <= cfg.damping_max:
            try:
                delta = np.linalg.solve(JtJ + lam * np.eye(n_params), -Jte)
            except np.linalg.LinAlgError:
                lam *= cfg.damping_up
                continue
            cand = w + delta
            cand_mse = train_mse(cand)
            if np.isfinite(cand_mse) and cand_mse < mse:
                w, mse = cand, cand_mse
                lam = max(lam * cfg.damping_down, 1e-15)
                stepped = True
                break
            lam *= cfg.damping_up
        if not stepped:
            status = "stalled"
            break
        if mse < best_mse:
            best_w, best_mse = w.copy(), mse
        vm = val_mse(w)
        if vm < best_val - 1e-15:
            best_val = vm
            bad_val = 0
        else:
            bad_val += 1
            if Xval.shape[0] > 0 and bad_val > cfg.val_patience:
                status = "patience"
                break
    if mse <= cfg.target_mse and status == "epoch_budget":
        status = "reached_target"
    final_w = best_w if status == "stalled" else w
    final_mse = best_mse if status == "stalled" else mse
    return TrainResult(
        dnn=rebuild(final_w),
        status=status,
        epochs=epochs,
        train_mse=final_mse,
        val_mse=val_mse(final_w),
    )


def swap_schedule(now, period, dt=1e-3) -> bool:
    """True exactly at positive integer multiples of the period (half-step slack)."""
    if period <= 0.0:
        raise ValueError("period must be positive")
    k = round(now / period)
    if k < 1:
        return False
    return abs(now - k * period) <= 0.5 * dt + 1e-12

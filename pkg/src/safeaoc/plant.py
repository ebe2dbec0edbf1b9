"""Control-affine system definitions, benchmark dynamics, and safe-set geometry."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

SIGN_CLAMP_FLOOR = 1e-9


@dataclass(frozen=True)
class PlantModel:
    """Control-affine system ``x' = drift(x) + effectiveness(x) u, y = C x``.

    ``g_bar`` records the bound on ``||effectiveness||`` over the working set.
    Models are immutable after construction.
    """

    n: int
    m: int
    q: int
    drift: Callable[[np.ndarray], np.ndarray]
    effectiveness: Callable[[np.ndarray], np.ndarray]
    output_matrix: np.ndarray
    g_bar: float
    name: str = "custom"


@dataclass(frozen=True)
class SafetySpec:
    """Barrier geometry plus the robustification data.

    ``barrier`` maps a state to the scalar h whose zero superlevel set is the
    safe region; ``classk_gain`` is the slope c of the linear class-K function
    ``alpha(s) = c*s``. ``eps`` is the estimation-error radius the bounds are
    widened against and the ``lip_*`` constants are the assumed Lipschitz
    constants of the barrier-rate terms over that ball.
    """

    barrier: Callable[[np.ndarray], float]
    barrier_grad: Callable[[np.ndarray], np.ndarray]
    classk_gain: float = 1.0
    eps: float = 0.0
    lip_F: float = 0.0
    lip_G: Sequence[float] = field(default_factory=lambda: (0.0,))
    name: str = "custom"

    def __post_init__(self):
        if self.eps < 0.0:
            raise ConfigError("robustification radius eps must be >= 0")
        if self.classk_gain <= 0.0:
            raise ConfigError("class-K gain must be positive")
        if self.lip_F < 0.0 or any(l < 0.0 for l in self.lip_G):
            raise ConfigError("Lipschitz constants must be >= 0")


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``r(x, u) = state_cost(x) + u' R u`` with SPD R."""

    state_cost: Callable[[np.ndarray], float]
    control_penalty: np.ndarray


@dataclass(frozen=True)
class RobustBounds:
    """Worst-case barrier-rate bounds around a state estimate.

    ``degenerate[i]`` flags channels whose nominal gain sat below the
    sign-clamp floor, i.e. the robust band straddled zero and was clamped.
    """

    F: float
    Gminus: np.ndarray
    Gplus: np.ndarray
    degenerate: np.ndarray


def eval_barrier(spec: SafetySpec, x) -> tuple[float, np.ndarray]:
    """Barrier value and its row gradient at ``x``."""
    x = np.asarray(x, dtype=float)
    return float(spec.barrier(x)), np.asarray(spec.barrier_grad(x), dtype=float).reshape(-1)


def robust_bounds(spec: SafetySpec, plant: PlantModel, xhat, drift=None) -> RobustBounds:
    """Lower/upper bounds F, G-, G+ used by the robust safety filter.

    ``drift`` overrides the plant's drift evaluation (pass the observer's
    identified drift in model-unknown runs). Each channel band is widened by
    ``lip_G[i] * eps`` and then sign-clamped so both ends share the nominal
    sign; a band that straddles zero gets its crossing side shrunk to the
    clamp floor and the channel is flagged degenerate.
    """
    xhat = np.asarray(xhat, dtype=float)
    h, grad = eval_barrier(spec, xhat)
    f = np.asarray((drift or plant.drift)(xhat), dtype=float).reshape(plant.n)
    g = np.asarray(plant.effectiveness(xhat), dtype=float).reshape(plant.n, plant.m)
    nominal_F = float(grad @ f) + spec.classk_gain * h
    F = nominal_F - spec.lip_F * spec.eps
    channel = (grad @ g).reshape(-1)
    lip = np.asarray(spec.lip_G, dtype=float)
    if lip.size == 1 and channel.size > 1:
        lip = np.full(channel.size, lip[0])
    gminus = channel - lip * spec.eps
    gplus = channel + lip * spec.eps
    degenerate = np.abs(channel) < SIGN_CLAMP_FLOOR
    for i in range(channel.size):
        if channel[i] >= 0.0:
            if gminus[i] < SIGN_CLAMP_FLOOR:
                gminus[i] = SIGN_CLAMP_FLOOR
            if gplus[i] < gminus[i]:
                gplus[i] = gminus[i]
        else:
            if gplus[i] > -SIGN_CLAMP_FLOOR:
                gplus[i] = -SIGN_CLAMP_FLOOR
            if gminus[i] > gplus[i]:
                gminus[i] = gplus[i]
    return RobustBounds(F=F, Gminus=gminus, Gplus=gplus, degenerate=degenerate)


def _convex_set_system() -> tuple[PlantModel, SafetySpec, CostSpec]:
    def drift(x):
        return np.array([-0.6 * x[0] - x[1], x[0] ** 3])

    def effectiveness(x):
        return np.array([[0.0], [x[1]]])

    plant = PlantModel(
        n=2,
        m=1,
        q=1,
        drift=drift,
        effectiveness=effectiveness,
        output_matrix=np.array([[1.0, 0.0]]),
        g_bar=3.0,
        name="convex_set",
    )
    safety = SafetySpec(
        barrier=lambda x: -x[1] ** 2 - x[0] + 1.0,
        barrier_grad=lambda x: np.array([-1.0, -2.0 * x[1]]),
        classk_gain=1.0,
        eps=0.7,
        lip_F=0.2,
        lip_G=(0.2,),
        name="convex_set",
    )
    cost = CostSpec(state_cost=lambda x: float(x @ x), control_penalty=np.array([[1.0]]))
    return plant, safety, cost


OBSTACLE_CENTER = np.array([-0.7, 1.2])
OBSTACLE_RADIUS = 0.35


def _obstacle_system() -> tuple[PlantModel, SafetySpec, CostSpec]:
    def drift(x):
        return np.array(
            [
                -x[0] - x[1],
                -0.5 * x[0] - 0.5 * x[1] * (1.0 - x[0] ** 2) - x[0] ** 2 * x[1],
            ]
        )

    def effectiveness(x):
        return np.array([[0.0], [np.cos(2.0 * x[0]) + 2.0]])

    def barrier(x):
        return float(np.linalg.norm(x - OBSTACLE_CENTER) - OBSTACLE_RADIUS)

    def barrier_grad(x):
        d = x - OBSTACLE_CENTER
        dist = np.linalg.norm(d)
        if dist < 1e-12:
            return np.zeros(2)
        return d / dist

    plant = PlantModel(
        n=2,
        m=1,
        q=1,
        drift=drift,
        effectiveness=effectiveness,
        output_matrix=np.array([[1.0, 0.0]]),
        g_bar=3.0,
        name="obstacle",
    )
    safety = SafetySpec(
        barrier=barrier,
        barrier_grad=barrier_grad,
        classk_gain=1.0,
        eps=0.5,
        lip_F=0.1,
        lip_G=(0.1,),
        name="obstacle",
    )
    cost = CostSpec(state_cost=lambda x: float(x @ x), control_penalty=np.array([[1.0]]))
    return plant, safety, cost


BENCHMARKS = {
    "convex_set": _convex_set_system,
    "obstacle": _obstacle_system,
}


def benchmark_system(benchmark_id: str) -> tuple[PlantModel, SafetySpec, CostSpec]:
    """Plant, safety geometry and cost for one of the two built-in studies."""
    try:
        factory = BENCHMARKS[benchmark_id]
    except KeyError:
        raise ConfigError(
            f"unknown benchmark {benchmark_id!r}; expected one of {sorted(BENCHMARKS)}"
        ) from None
    return factory()

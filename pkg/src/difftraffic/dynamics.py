"""Single-lane IDM car-following dynamics on open and ring roads.

The state is kept as two flat arrays (positions and velocities) ordered from
the front of the platoon backwards, so vehicle ``i`` follows vehicle ``i - 1``
(and vehicle 0 follows vehicle ``N - 1`` on a ring).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from scipy.optimize import brentq


class CollisionError(ValueError):
    """Raised when a vehicle overlaps its leader."""


@dataclass(frozen=True)
class IdmParams:
    v0: float = 30.0
    T: float = 1.0
    a: float = 1.0
    b: float = 1.5
    delta_exp: float = 4.0
    s0: float = 2.0
    l: float = 5.0

    def __post_init__(self):
        checks = {
            "v0": self.v0 > 0,
            "T": self.T >= 0,
            "a": self.a > 0,
            "b": self.b > 0,
            "delta_exp": self.delta_exp > 0,
            "s0": self.s0 > 0,
            "l": self.l > 0,
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid IDM parameters: {', '.join(bad)}")

    @property
    def sqrt_ab(self) -> float:
        return float(np.sqrt(self.a * self.b))


@dataclass(frozen=True)
class StepConfig:
    dt: float = 0.1
    alpha_min: float = -1.0
    alpha_max: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.alpha_min < self.alpha_max:
            raise ValueError("alpha_min must be below alpha_max")


@dataclass(frozen=True)
class OpenRoad:
    pass


@dataclass(frozen=True)
class Ring:
    length: float

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("ring length must be positive")


Topology = Union[OpenRoad, Ring]


@dataclass(frozen=True)
class VehicleState:
    x: float
    v: float


@dataclass(frozen=True, eq=False)
class TrafficState:
    """Positions ``x`` and velocities ``v`` of a platoon, front vehicle first."""

    x: np.ndarray
    v: np.ndarray
    topology: Topology = field(default_factory=OpenRoad)
    controlled_index: Optional[int] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).copy()
        v = np.asarray(self.v, dtype=float).copy()
        if x.ndim != 1 or x.shape != v.shape:
            raise ValueError("x and v must be 1-D arrays of equal length")
        if x.size == 0:
            raise ValueError("a traffic state needs at least one vehicle")
        x.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)
        if self.controlled_index is not None and not 0 <= self.controlled_index < x.size:
            raise ValueError("controlled_index out of range")

    @classmethod
    def from_vehicles(cls, vehicles, topology: Topology = OpenRoad(), controlled_index=None):
        return cls(
            np.array([veh.x for veh in vehicles]),
            np.array([veh.v for veh in vehicles]),
            topology,
            controlled_index,
        )

    @classmethod
    def from_flat(cls, flat, topology: Topology = OpenRoad(), controlled_index=None):
        """Build from the interleaved layout ``[x_1, v_1, ..., x_N, v_N]``."""
        flat = np.asarray(flat, dtype=float)
        return cls(flat[0::2], flat[1::2], topology, controlled_index)

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def is_ring(self) -> bool:
        return isinstance(self.topology, Ring)

    @property
    def vehicles(self) -> list[VehicleState]:
        return [VehicleState(float(xi), float(vi)) for xi, vi in zip(self.x, self.v)]

    def flat(self) -> np.ndarray:
        out = np.empty(2 * self.n)
        out[0::2] = self.x
        out[1::2] = self.v
        return out

    def with_arrays(self, x, v) -> "TrafficState":
        return replace(self, x=x, v=v)

    def __eq__(self, other):
        if not isinstance(other, TrafficState):
            return NotImplemented
        return (
            self.topology == other.topology
            and self.controlled_index == other.controlled_index
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.v, other.v)
        )

    def validate(self, params: IdmParams) -> None:
        if self.is_ring:
            if np.any(self.x < 0) or np.any(self.x >= self.topology.length):
                raise ValueError("ring positions must lie in [0, L)")
        if np.any(self.v < 0):
            raise ValueError("velocities must be non-negative")
        gaps = headways(self, params)
        if np.any(gaps <= 0):
            raise CollisionError("vehicles overlap")
        if self.is_ring and not ring_order_ok(self, params):
            raise ValueError("vehicle order is inconsistent with the leader relation")


def ring_order_ok(state: "TrafficState", params: "IdmParams") -> bool:
    """True when the gaps wind around the ring exactly once."""
    total = float(np.sum(headways(state, params) + params.l))
    return bool(np.isclose(total, state.topology.length, rtol=0.0, atol=1e-6 * state.topology.length))


def leader_indices(n: int, ring: bool) -> np.ndarray:
    """Index of each vehicle's leader; -1 marks the open-road front vehicle."""
    lead = np.arange(n) - 1
    if ring:
        lead[0] = n - 1
    return lead


def _shift(arr: np.ndarray) -> np.ndarray:
    # np.roll(arr, 1) for 1-D arrays, without its generic overhead
    return np.concatenate((arr[-1:], arr[:-1]))


def headways(state: TrafficState, params: IdmParams) -> np.ndarray:
    """Bumper-to-bumper gaps for every vehicle (``inf`` for an open-road leader)."""
    x = state.x
    if state.is_ring:
        L = state.topology.length
        if state.n == 1:
            return np.array([L - params.l])
        diff = np.mod(_shift(x) - x, L)
        return diff - params.l
    gaps = np.empty_like(x)
    gaps[0] = np.inf
    gaps[1:] = x[:-1] - x[1:] - params.l
    return gaps


def leader_velocities(state: TrafficState) -> np.ndarray:
    """Leader velocity per vehicle; the open-road front vehicle gets its own."""
    vl = _shift(state.v)
    if not state.is_ring:
        vl[0] = state.v[0]
    return vl


def headway(state: TrafficState, i: int, params: IdmParams) -> float:
    if not 0 <= i < state.n:
        raise IndexError(f"vehicle index {i} out of range")
    if not state.is_ring and i == 0:
        raise ValueError("the leading vehicle on an open road has no headway")
    gap = float(headways(state, params)[i])
    if gap <= 0:
        raise CollisionError(f"vehicle {i} overlaps its leader (gap={gap})")
    return gap


def desired_gap(v, v_leader, params: IdmParams):
    return params.s0 + v * params.T + v * (v - v_leader) / (2.0 * params.sqrt_ab)


def idm_acceleration(v, v_leader, s, params: IdmParams):
    """IDM acceleration; ``s = inf`` gives the free-road term only.

    Works elementwise on arrays as well as scalars.
    """
    v = np.asarray(v, dtype=float)
    v_leader = np.asarray(v_leader, dtype=float)
    s = np.asarray(s, dtype=float)
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(v_leader))) or np.any(np.isnan(s)):
        raise ValueError("non-finite input to idm_acceleration")
    free = 1.0 - (v / params.v0) ** params.delta_exp
    with np.errstate(divide="ignore", invalid="ignore"):
        interaction = np.where(np.isinf(s), 0.0, (desired_gap(v, v_leader, params) / s) ** 2)
    out = params.a * (free - interaction)
    return float(out) if out.ndim == 0 else out


def idm_accelerations(state: TrafficState, params: IdmParams) -> np.ndarray:
    return idm_acceleration(state.v, leader_velocities(state), headways(state, params), params)


@dataclass(frozen=True, eq=False)
class StepResult:
    state: TrafficState
    accelerations: np.ndarray
    clipped: np.ndarray
    collision: bool


def step(
    state: TrafficState,
    params: IdmParams,
    cfg: StepConfig,
    action: Optional[float] = None,
    overrides: Optional[np.ndarray] = None,
) -> StepResult:
    """Advance one explicit-Euler step.

    ``overrides`` is an optional per-vehicle array of forced accelerations,
    NaN where the vehicle drives normally. The controlled vehicle uses the
    clamped ``action`` unless it is itself overridden.
    """
    accel = idm_accelerations(state, params)
    if action is not None:
        if state.controlled_index is None:
            raise ValueError("action given but state has no controlled vehicle")
        if not np.isfinite(action):
            raise ValueError("action must be finite")
        accel[state.controlled_index] = min(max(action, cfg.alpha_min), cfg.alpha_max)
    if overrides is not None:
        mask = ~np.isnan(overrides)
        accel[mask] = overrides[mask]

    x_next = state.x + state.v * cfg.dt
    v_raw = state.v + accel * cfg.dt
    clipped = v_raw < 0.0
    v_next = np.where(clipped, 0.0, v_raw)
    if state.is_ring:
        x_next = np.mod(x_next, state.topology.length)
        # mod can round up to exactly L for tiny negative inputs
        x_next[x_next >= state.topology.length] = 0.0

    nxt = state.with_arrays(x_next, v_next)
    collision = bool(np.any(headways(nxt, params) <= 0.0))
    return StepResult(nxt, accel, clipped, collision)


def equilibrium_velocity(gap: float, params: IdmParams) -> float:
    """Velocity at which a vehicle following an equal-speed leader at ``gap`` has zero IDM acceleration."""
    if not gap > params.s0:
        raise ValueError(f"no equilibrium: gap {gap} does not exceed s0={params.s0}")

    def residual(v):
        return idm_acceleration(v, v, gap, params)

    return brentq(residual, 0.0, params.v0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def equilibrium_state(
    n: int, params: IdmParams, topology: Ring, controlled_index: Optional[int] = None
) -> TrafficState:
    """Evenly spaced ring platoon moving at the IDM equilibrium speed."""
    if not isinstance(topology, Ring):
        raise TypeError("equilibrium_state needs a Ring topology")
    if n < 1:
        raise ValueError("need at least one vehicle")
    L = topology.length
    spacing = L / n
    if spacing <= params.l + params.s0:
        raise ValueError(f"infeasible spacing: L/n={spacing} <= l + s0={params.l + params.s0}")
    v_eq = equilibrium_velocity(spacing - params.l, params)
    x = np.mod(-spacing * np.arange(n), L)
    x[x >= L] = 0.0
    return TrafficState(x, np.full(n, v_eq), topology, controlled_index)

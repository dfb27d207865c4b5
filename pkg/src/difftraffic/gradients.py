"""Analytical Jacobians of the IDM step map and a finite-difference oracle.

Jacobians are stored as per-vehicle 2x2 blocks: ``diag[i]`` holds the partials
of vehicle ``i``'s (position, velocity) derivative with respect to its own
state, ``sub[i]`` those with respect to its leader's state. Dense matrices use
the interleaved layout ``[x_1, v_1, ..., x_N, v_N]``.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .dynamics import (
    IdmParams,
    OpenRoad,
    Ring,
    StepConfig,
    Topology,
    TrafficState,
    desired_gap,
    headways,
    leader_indices,
    leader_velocities,
    step,
)


@dataclass(frozen=True, eq=False)
class BlockJacobian:
    diag: np.ndarray  # (N, 2, 2)
    sub: np.ndarray  # (N, 2, 2); rows with leader == -1 are unused
    leader: np.ndarray  # (N,)

    @property
    def n(self) -> int:
        return self.diag.shape[0]

    def dense(self) -> np.ndarray:
        n = self.n
        out = np.zeros((2 * n, 2 * n))
        rows = 2 * np.arange(n)
        for r in range(2):
            for c in range(2):
                np.add.at(out, (rows + r, rows + c), self.diag[:, r, c])
        has = self.leader >= 0
        lrows = rows[has]
        lcols = 2 * self.leader[has]
        for r in range(2):
            for c in range(2):
                np.add.at(out, (lrows + r, lcols + c), self.sub[has, r, c])
        return out

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        """``J @ vec`` in O(N) without materializing the matrix."""
        pairs = np.asarray(vec, dtype=float).reshape(self.n, 2)
        out = np.einsum("nij,nj->ni", self.diag, pairs)
        has = self.leader >= 0
        out[has] += np.einsum("nij,nj->ni", self.sub[has], pairs[self.leader[has]])
        return out.reshape(-1)


DynamicsJacobian = BlockJacobian


@dataclass(frozen=True, eq=False)
class ActionSensitivity:
    d_next_state_d_action: np.ndarray
    d_reward_d_action: float


def _as_mask(flags, n, name):
    if flags is None:
        return np.zeros(n, dtype=bool)
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != (n,):
        raise ValueError(f"{name} has shape {flags.shape}, expected ({n},)")
    return flags


def dynamics_jacobian(
    state: TrafficState,
    params: IdmParams,
    zeroed=None,
    exogenous=None,
) -> BlockJacobian:
    """Partials of the continuous dynamics (x_dot, v_dot) with respect to the state.

    ``zeroed`` marks vehicles whose blocks are forced to zero (velocity clipped
    or acceleration overridden this step). ``exogenous`` marks vehicles whose
    acceleration is an external input (the controlled vehicle under an action),
    so their v_dot row does not depend on the state.
    """
    n = state.n
    zeroed = _as_mask(zeroed, n, "zeroed")
    exogenous = _as_mask(exogenous, n, "exogenous")
    a, T, v0, d = params.a, params.T, params.v0, params.delta_exp

    s = headways(state, params)
    if np.any(s <= 0):
        raise ValueError("non-positive headway; Jacobian undefined")
    v = state.v
    vl = leader_velocities(state)
    lead = leader_indices(n, state.is_ring)
    follower = lead >= 0

    diag = np.zeros((n, 2, 2))
    sub = np.zeros((n, 2, 2))
    diag[:, 0, 1] = 1.0

    dg_dv_free = -a * d * v ** (d - 1.0) / v0**d
    diag[:, 1, 1] = dg_dv_free

    sf = s[follower]
    vf = v[follower]
    s_star = desired_gap(vf, vl[follower], params)
    dv = vf - vl[follower]
    two_sqrt_ab = 2.0 * params.sqrt_ab
    diag[follower, 1, 0] = -2.0 * a * s_star**2 / sf**3
    diag[follower, 1, 1] += -2.0 * a / sf**2 * (T + (dv + vf) / two_sqrt_ab) * s_star
    sub[follower, 1, 0] = 2.0 * a * s_star**2 / sf**3
    sub[follower, 1, 1] = 2.0 * a * s_star * vf / (sf**2 * two_sqrt_ab)

    diag[exogenous, 1, :] = 0.0
    sub[exogenous, 1, :] = 0.0
    diag[zeroed] = 0.0
    sub[zeroed] = 0.0
    return BlockJacobian(diag, sub, lead)


def step_jacobian(
    state: TrafficState,
    params: IdmParams,
    cfg: StepConfig,
    clip_flags,
    exogenous=None,
) -> BlockJacobian:
    """Jacobian of the explicit-Euler step map, ``I + dt * J`` with clipped velocity rows zeroed."""
    clip_flags = np.asarray(clip_flags, dtype=bool)
    if clip_flags.shape != (state.n,):
        raise ValueError(f"clip_flags has shape {clip_flags.shape}, expected ({state.n},)")
    jac = dynamics_jacobian(state, params, exogenous=exogenous)
    diag = cfg.dt * jac.diag
    diag[:, 0, 0] += 1.0
    diag[:, 1, 1] += 1.0
    sub = cfg.dt * jac.sub
    diag[clip_flags, 1, :] = 0.0
    sub[clip_flags, 1, :] = 0.0
    return BlockJacobian(diag, sub, jac.leader)


def _wrap_position_diffs(diff: np.ndarray, state: TrafficState) -> np.ndarray:
    if state.is_ring:
        L = state.topology.length
        pos = diff[0::2]
        diff[0::2] = pos - L * np.round(pos / L)
    return diff


def finite_difference_jacobian(
    state: TrafficState,
    params: IdmParams,
    cfg: StepConfig,
    h: float = 1e-5,
    action: Optional[float] = None,
    overrides: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central-difference Jacobian of :func:`step`, one column per state entry."""
    if not h > 0:
        raise ValueError("h must be positive")
    flat = state.flat()
    scale = max(1.0, float(np.max(np.abs(flat))))
    if h < 1e3 * np.finfo(float).eps * scale:
        warnings.warn(f"h={h} is too small for state magnitude {scale}; differences may underflow")
    out = np.empty((flat.size, flat.size))
    for k in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[k] += h
        minus[k] -= h
        sp = step(state.__class__.from_flat(plus, state.topology, state.controlled_index),
                  params, cfg, action, overrides).state.flat()
        sm = step(state.__class__.from_flat(minus, state.topology, state.controlled_index),
                  params, cfg, action, overrides).state.flat()
        out[:, k] = _wrap_position_diffs(sp - sm, state) / (2.0 * h)
    return out


def action_sensitivity(
    state: TrafficState,
    params: IdmParams,
    cfg: StepConfig,
    action: float,
    reward_grad_state: np.ndarray,
    reward_grad_action: float = 0.0,
) -> ActionSensitivity:
    """Sensitivity of the next state and reward to the controlled vehicle's action.

    Under explicit Euler only the controlled vehicle's next velocity responds,
    with slope ``dt``. ``reward_grad_action`` carries any direct dependence of
    the reward on the action (fuel and jerk terms) and is added to the
    chain-rule term.
    """
    c = state.controlled_index
    if c is None:
        raise ValueError("state has no controlled vehicle")
    result = step(state, params, cfg, action)
    ds = np.zeros(2 * state.n)
    if result.clipped[c]:
        return ActionSensitivity(ds, 0.0)
    ds[2 * c + 1] = cfg.dt
    dr = float(np.dot(reward_grad_state, ds)) + reward_grad_action
    return ActionSensitivity(ds, dr)


def random_interior_state(
    rng: np.random.Generator,
    n: int,
    topology_kind: str,
    params: IdmParams,
    cfg: StepConfig,
    gap_range=(3.0, 30.0),
    v_range=(1.0, 25.0),
    margin: float = 1e-3,
) -> TrafficState:
    """Random valid state whose post-step velocities stay clear of the clip kink."""
    while True:
        gaps = rng.uniform(*gap_range, size=n)
        offsets = np.concatenate([[0.0], np.cumsum(gaps[1:] + params.l)])
        x = 1000.0 - offsets
        topology: Topology = OpenRoad()
        if topology_kind == "ring":
            L = float(np.sum(gaps + params.l))
            topology = Ring(L)
            x = np.mod(x, L)
        v = rng.uniform(*v_range, size=n)
        state = TrafficState(x, v, topology)
        res = step(state, params, cfg)
        v_raw = state.v + res.accelerations * cfg.dt
        if np.all(np.abs(v_raw) > margin):
            return state


@dataclass
class BenchmarkReport:
    n: int
    iters: int
    analytical_s: float
    fd_s: float
    speedup: float

    def as_row(self) -> dict:
        return asdict(self)


BENCH_FIELDS = ["n", "iters", "analytical_s", "fd_s", "speedup"]


def jacobian_benchmark(
    n: int,
    iters: int,
    seed: int = 0,
    params: Optional[IdmParams] = None,
    cfg: Optional[StepConfig] = None,
    h: float = 1e-5,
) -> BenchmarkReport:
    """Time analytical step Jacobians against the finite-difference oracle on one seeded state stream."""
    if n < 2:
        raise ValueError("benchmark needs n >= 2")
    if iters < 1:
        raise ValueError("benchmark needs iters >= 1")
    params = params or IdmParams()
    cfg = cfg or StepConfig()
    rng = np.random.default_rng(seed)
    states = [random_interior_state(rng, n, "open", params, cfg) for _ in range(iters)]
    no_clip = np.zeros(n, dtype=bool)

    t0 = time.perf_counter()
    for st in states:
        step_jacobian(st, params, cfg, no_clip)
    analytical = time.perf_counter() - t0

    t0 = time.perf_counter()
    for st in states:
        finite_difference_jacobian(st, params, cfg, h)
    fd = time.perf_counter() - t0
    return BenchmarkReport(n, iters, analytical, fd, fd / analytical if analytical > 0 else float("inf"))


def write_benchmark_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.as_row())

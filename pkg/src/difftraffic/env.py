"""Episodic ring-road and figure-eight environments with gradient-carrying experience."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import (
    IdmParams,
    Ring,
    StepConfig,
    TrafficState,
    equilibrium_state,
    equilibrium_velocity,
    headways,
    ring_order_ok,
    step,
)
from .rewards import (
    FuelModel,
    RewardWeights,
    fuel_rate,
    r_comb,
    reward_components,
    reward_grad_accel,
    reward_grad_state,
)

COLLISION_PENALTY = -50.0
TRACE_FIELDS = ["step", "vehicle", "x", "v", "accel", "fuel_rate", "overridden"]


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "ring"
    length: float = 160.0
    n_vehicles: int = 14
    controlled_index: int = 0
    idm: IdmParams = field(default_factory=IdmParams)
    step: StepConfig = field(default_factory=StepConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)
    fuel: FuelModel = field(default_factory=FuelModel)
    horizon: int = 1500
    init: str = "uniform"
    init_sigma: float = 1.0
    warmup: int = 50
    # figure-eight crossing geometry
    yield_window: float = 20.0
    yield_zone: float = 2.0
    yield_decel: float = 3.0
    # add the reward's direct action dependence (jerk, fuel) to dr_da
    grad_direct_terms: bool = False

    def __post_init__(self):
        if self.kind not in ("ring", "figure_eight"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.init not in ("equilibrium", "uniform"):
            raise ValueError(f"unknown initial condition {self.init!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_vehicles < 1:
            raise ValueError("need at least one vehicle")
        if not 0 <= self.controlled_index < self.n_vehicles:
            raise ValueError("controlled_index out of range")
        if self.warmup < 0 or self.init_sigma < 0:
            raise ValueError("warmup and init_sigma must be non-negative")
        if self.length / self.n_vehicles <= self.idm.l + self.idm.s0:
            raise ValueError(
                f"infeasible spacing: L/N={self.length / self.n_vehicles:.3f} <= l + s0={self.idm.l + self.idm.s0}"
            )

    @classmethod
    def figure_eight(cls, **kw) -> "ScenarioConfig":
        kw.setdefault("length", 240.0)
        kw.setdefault("n_vehicles", 14)
        return cls(kind="figure_eight", **kw)


@dataclass(eq=False)
class ExperienceUnit:
    s: np.ndarray
    a: float
    r: float
    s_next: np.ndarray
    dr_da: float
    ds_da: np.ndarray
    done: bool
    flagged: bool
    info: dict = field(default_factory=dict)


def crossing_points(config: ScenarioConfig) -> tuple[float, float]:
    """Track coordinates that map to the single physical crossing of the figure eight."""
    return 0.25 * config.length, 0.75 * config.length


def figure_eight_yield(state: TrafficState, config: ScenarioConfig) -> np.ndarray:
    """Per-vehicle override accelerations; NaN where the vehicle is not forced to yield."""
    L = config.length
    out = np.full(state.n, np.nan)
    p_a, p_b = crossing_points(config)
    v = np.maximum(state.v, 0.1)

    def arm(p):
        ahead = np.mod(p - state.x, L)
        behind = np.mod(state.x - p, L)
        occupying = behind < config.idm.l + config.yield_zone
        approaching = (~occupying) & (ahead > 0) & (ahead <= config.yield_window)
        t = np.where(occupying, 0.0, ahead / v)
        return approaching, occupying, t

    appr_a, occ_a, t_a = arm(p_a)
    appr_b, occ_b, t_b = arm(p_b)
    idx = np.arange(state.n)
    for appr, t_self, other_mask, t_other in (
        (appr_a, t_a, appr_b | occ_b, t_b),
        (appr_b, t_b, appr_a | occ_a, t_a),
    ):
        others = idx[other_mask]
        if others.size == 0:
            continue
        for i in idx[appr]:
            t_i = t_self[i]
            t_j = t_other[others]
            if np.any(t_j < t_i) or np.any((t_j == t_i) & (i < others)):
                out[i] = -config.yield_decel
    return out


class TrafficEnv:
    """Single controlled vehicle among IDM drivers on a closed track."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.state: Optional[TrafficState] = None
        self.t = 0
        self.done = True
        self.a_prev = 0.0
        self._obs = None
        self.trace: Optional[list] = None

    @property
    def obs_dim(self) -> int:
        return 2 * self.config.n_vehicles

    @property
    def order(self) -> np.ndarray:
        n = self.config.n_vehicles
        return (self.config.controlled_index + np.arange(n)) % n

    def observe(self, state: TrafficState) -> np.ndarray:
        cfg = self.config
        order = self.order
        c = cfg.controlled_index
        obs = np.empty(2 * cfg.n_vehicles)
        obs[0::2] = np.mod(state.x[order] - state.x[c], cfg.length) / cfg.length
        obs[1::2] = state.v[order] / cfg.idm.v0
        return obs

    def initial_state(self, rng: np.random.Generator) -> TrafficState:
        cfg = self.config
        ring = Ring(cfg.length)
        if cfg.init == "equilibrium":
            return equilibrium_state(cfg.n_vehicles, cfg.idm, ring, cfg.controlled_index)
        spacing = cfg.length / cfg.n_vehicles
        v_eq = equilibrium_velocity(spacing - cfg.idm.l, cfg.idm)
        base = -spacing * np.arange(cfg.n_vehicles)
        for _ in range(1000):
            x = np.mod(base + rng.normal(0.0, cfg.init_sigma, cfg.n_vehicles), cfg.length)
            x[x >= cfg.length] = 0.0
            st = TrafficState(x, np.full(cfg.n_vehicles, v_eq), ring, cfg.controlled_index)
            if np.all(headways(st, cfg.idm) > cfg.idm.s0) and ring_order_ok(st, cfg.idm):
                return st
        raise ValueError("could not place vehicles without overlap; reduce init_sigma")

    def _overrides(self, state):
        if self.config.kind == "figure_eight":
            return figure_eight_yield(state, self.config)
        return None

    def reset(self, seed=None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        state = self.initial_state(rng)
        for _ in range(self.config.warmup):
            res = step(state, self.config.idm, self.config.step, None, self._overrides(state))
            if res.collision:
                raise RuntimeError("collision during warmup")
            state = res.state
        self.state = state
        self.t = 0
        self.done = False
        self.a_prev = 0.0
        self._obs = self.observe(state)
        return self._obs.copy()

    def step(self, action: Optional[float]):
        """Advance one step; ``action=None`` lets the controlled vehicle drive by IDM."""
        if self.done or self.state is None:
            raise RuntimeError("episode finished; call reset()")
        cfg = self.config
        c = cfg.controlled_index
        if action is not None:
            action = float(action)
            if not np.isfinite(action):
                raise ValueError("action must be finite")
            action = min(max(action, cfg.step.alpha_min), cfg.step.alpha_max)
        overrides = self._overrides(self.state)
        res = step(self.state, cfg.idm, cfg.step, action, overrides)
        nxt = res.state
        acc = res.accelerations
        a_t = float(acc[c])
        g = fuel_rate(nxt.v, acc, cfg.fuel)
        reward = r_comb(nxt, acc, a_t, self.a_prev, cfg.weights, cfg.fuel, g)
        comps = reward_components(nxt, acc, a_t, self.a_prev, cfg.fuel, g)

        overridden = overrides is not None and not np.isnan(overrides[c])
        flagged = bool(res.clipped[c] or overridden or action is None)
        ds_da = np.zeros(self.obs_dim)
        dr_da = 0.0
        if not flagged:
            grad_s = reward_grad_state(nxt, acc, cfg.weights, cfg.fuel)
            # only the controlled vehicle's next velocity responds (slope dt)
            dr_da = float(grad_s[2 * c + 1] * cfg.step.dt)
            if cfg.grad_direct_terms:
                dr_da += float(reward_grad_accel(nxt, acc, cfg.weights, cfg.fuel)[c])
                dr_da -= cfg.weights.lam * float(np.sign(a_t - self.a_prev))
            ds_da[1] = cfg.step.dt / cfg.idm.v0

        self.t += 1
        if res.collision:
            reward += COLLISION_PENALTY
        done = bool(res.collision or self.t >= cfg.horizon)

        if self.trace is not None:
            ov = np.zeros(nxt.n, dtype=bool) if overrides is None else ~np.isnan(overrides)
            for i in range(nxt.n):
                self.trace.append((self.t, i, nxt.x[i], nxt.v[i], acc[i], g[i], int(ov[i])))

        obs = self.observe(nxt)
        # a horizon cut is a time limit, not a terminal state of the traffic system
        info = dict(comps, collision=res.collision, fuel_total=float(np.sum(g)), truncated=done and not res.collision)
        unit = ExperienceUnit(
            s=self._obs,
            a=a_t if action is not None else float("nan"),
            r=reward,
            s_next=obs,
            dr_da=dr_da,
            ds_da=ds_da,
            done=done,
            flagged=flagged,
            info=info,
        )
        self.state = nxt
        self.a_prev = a_t
        self._obs = obs
        self.done = done
        return obs.copy(), reward, done, unit

    def start_trace(self) -> None:
        self.trace = []

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_FIELDS)
            for row in self.trace or []:
                writer.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3])),
                                 repr(float(row[4])), repr(float(row[5])), row[6]])

"""Societal reward terms (flow, fuel economy, jerk) and their analytical gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import TrafficState

METERS_PER_MILE = 1609.0


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 1.0
    beta: float = 0.1
    lam: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "lam"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"reward weight {name} must be finite and non-negative")


@dataclass(frozen=True)
class FuelModel:
    """Polynomial fuel rate in gallons per second with an idle floor."""

    c0: float = 1.64e-4
    c1: float = 5e-6
    c2: float = 0.0
    c3: float = 1e-8
    c4: float = 2e-5
    g_idle: float = 1.64e-4

    def __post_init__(self):
        if not self.g_idle > 0:
            raise ValueError("g_idle must be positive")


def fuel_rate(v, accel, model: FuelModel):
    v = np.asarray(v, dtype=float)
    accel = np.asarray(accel, dtype=float)
    poly = model.c0 + v * (model.c1 + v * (model.c2 + v * model.c3)) + model.c4 * v * np.maximum(accel, 0.0)
    out = np.maximum(model.g_idle, poly)
    return float(out) if out.ndim == 0 else out


def _fuel_partials(v, accel, model: FuelModel):
    """(dg/dv, dg/daccel) on the active branch."""
    poly = model.c0 + v * (model.c1 + v * (model.c2 + v * model.c3)) + model.c4 * v * np.maximum(accel, 0.0)
    active = poly > model.g_idle
    pos = accel > 0
    dg_dv = model.c1 + 2 * model.c2 * v + 3 * model.c3 * v**2 + model.c4 * np.where(pos, accel, 0.0)
    dg_da = np.where(pos, model.c4 * v, 0.0)
    return np.where(active, dg_dv, 0.0), np.where(active, dg_da, 0.0)


def r_vel(state: TrafficState) -> float:
    if state.n == 0:
        raise ValueError("empty state")
    return float(np.mean(state.v))


def r_mpg(state: TrafficState, accelerations, model: FuelModel, fuel=None) -> float:
    """Mean of v/g over vehicles in miles per gallon. ``fuel`` overrides the fuel model."""
    g = fuel_rate(state.v, accelerations, model) if fuel is None else np.asarray(fuel, dtype=float)
    if np.any(g <= 0):
        raise ValueError("fuel rates must be positive")
    return float(np.mean(state.v / g) / METERS_PER_MILE)


def jerk_penalty(a_t, a_prev) -> float:
    diff = np.atleast_1d(np.asarray(a_t, dtype=float) - np.asarray(a_prev, dtype=float))
    if diff.size == 1:
        return float(abs(diff[0]))
    return float(np.linalg.norm(diff))


def r_comb(state, accelerations, a_t, a_prev, weights: RewardWeights, model: FuelModel, fuel=None) -> float:
    total = 0.0
    if weights.alpha:
        total += weights.alpha * r_vel(state)
    if weights.beta:
        total += weights.beta * r_mpg(state, accelerations, model, fuel)
    if weights.lam:
        total -= weights.lam * jerk_penalty(a_t, a_prev)
    return total


def reward_components(state, accelerations, a_t, a_prev, model: FuelModel, fuel=None) -> dict:
    return {
        "r_vel": r_vel(state),
        "r_mpg": r_mpg(state, accelerations, model, fuel),
        "jerk": jerk_penalty(a_t, a_prev),
    }


def reward_grad_state(state: TrafficState, accelerations, weights: RewardWeights, model: FuelModel) -> np.ndarray:
    """Gradient of the combined reward with respect to the flat state, accelerations held fixed."""
    n = state.n
    grad = np.zeros(2 * n)
    dv = np.full(n, weights.alpha / n)
    if weights.beta:
        v = state.v
        acc = np.asarray(accelerations, dtype=float)
        g = fuel_rate(v, acc, model)
        dg_dv, _ = _fuel_partials(v, acc, model)
        dv = dv + weights.beta * (g - v * dg_dv) / g**2 / (METERS_PER_MILE * n)
    grad[1::2] = dv
    return grad


def reward_grad_accel(state: TrafficState, accelerations, weights: RewardWeights, model: FuelModel) -> np.ndarray:
    """Gradient of the combined reward with respect to each vehicle's acceleration (fuel term only)."""
    n = state.n
    if not weights.beta:
        return np.zeros(n)
    v = state.v
    acc = np.asarray(accelerations, dtype=float)
    g = fuel_rate(v, acc, model)
    _, dg_da = _fuel_partials(v, acc, model)
    return -weights.beta * v * dg_da / g**2 / (METERS_PER_MILE * n)

"""Simulation, evaluation and gradient-verification routines behind the command line."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import TrafficState, step
from .env import ScenarioConfig, TrafficEnv
from .gradients import action_sensitivity, finite_difference_jacobian, random_interior_state, step_jacobian
from .network import GaussianPolicy
from .rewards import r_comb, reward_grad_accel, reward_grad_state

GRAD_TOL = 1e-6
REWARD_GRAD_TOL = 1e-7


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def simulate(scenario: ScenarioConfig, steps: int, seed: int, out_dir, actions=None) -> dict:
    """All-IDM (or replayed-action) rollout; writes ``trace.csv`` and ``summary.json``."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    env = TrafficEnv(dataclasses.replace(scenario, horizon=max(steps, 1)))
    env.reset(seed=seed)
    env.start_trace()
    flows, fuel, collisions = [], 0.0, 0
    for k in range(steps):
        act = None if actions is None else float(actions[k % len(actions)])
        _, _, done, unit = env.step(act)
        flows.append(unit.info["r_vel"])
        fuel += unit.info["fuel_total"] * scenario.step.dt
        collisions += int(unit.info["collision"])
        if done:
            break
    env.write_trace(out_dir / "trace.csv")
    summary = {
        "mean_flow": float(np.mean(flows)) if flows else 0.0,
        "total_fuel_gal": fuel,
        "collision_count": collisions,
        "steps": len(flows),
    }
    dump_json(summary, out_dir / "summary.json")
    return summary


def evaluate(scenario: ScenarioConfig, policy: Optional[GaussianPolicy], episodes: int, seed: int) -> dict:
    """Mean-action rollouts of ``policy`` (all-IDM when ``None``), averaged over episodes."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = TrafficEnv(scenario)
    flows, fuels, jerks, collisions = [], [], [], 0
    for ep in range(episodes):
        obs = env.reset(seed=seed + ep)
        ep_flow, ep_fuel, done = [], 0.0, False
        while not done:
            act = None if policy is None else float(policy.mean(obs[None, :])[0])
            obs, _, done, unit = env.step(act)
            ep_flow.append(unit.info["r_vel"])
            ep_fuel += unit.info["fuel_total"] * scenario.step.dt
            jerks.append(unit.info["jerk"])
            collisions += int(unit.info["collision"])
        flows.append(np.mean(ep_flow))
        fuels.append(ep_fuel / scenario.n_vehicles)
    return {
        "mean_flow": float(np.mean(flows)),
        "fuel_per_vehicle_gal": float(np.mean(fuels)),
        "mean_jerk": float(np.mean(jerks)),
        "collisions": collisions,
        "episodes": episodes,
    }


def _fd_reward_grad(state, acc, a_t, a_prev, scenario, h=1e-6):
    flat = state.flat()
    out = np.zeros_like(flat)
    for k in range(1, flat.size, 2):
        p, m = flat.copy(), flat.copy()
        p[k] += h
        m[k] -= h
        rp = r_comb(TrafficState.from_flat(p, state.topology), acc, a_t, a_prev, scenario.weights, scenario.fuel)
        rm = r_comb(TrafficState.from_flat(m, state.topology), acc, a_t, a_prev, scenario.weights, scenario.fuel)
        out[k] = (rp - rm) / (2 * h)
    return out


def check_gradients(scenario: ScenarioConfig, trials: int, seed: int = 0, corrupt: bool = False) -> dict:
    """Compare analytical gradients with central finite differences on random states.

    Returns per-surface maximum errors and an overall ``passed`` flag.
    ``corrupt`` perturbs one analytical Jacobian entry so the check must fail.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    params, cfg = scenario.idm, scenario.step
    sizes = sorted({2, scenario.n_vehicles})
    err = {"step_jacobian": 0.0, "action_sensitivity": 0.0, "reward_gradient": 0.0}
    for _ in range(trials):
        for n in sizes:
            for kind in ("open", "ring"):
                st = random_interior_state(rng, n, kind, params, cfg)
                J = step_jacobian(st, params, cfg, step(st, params, cfg).clipped).dense()
                if corrupt:
                    J[3, 2] *= 1.01
                fd = finite_difference_jacobian(st, params, cfg, h=1e-5)
                err["step_jacobian"] = max(err["step_jacobian"], float(np.max(np.abs(J - fd))))

        # action sensitivity on a controlled ring state
        st = random_interior_state(rng, scenario.n_vehicles, "ring", params, cfg)
        st = TrafficState(st.x, st.v, st.topology, 0)
        action = float(rng.uniform(0.5 * cfg.alpha_min, 0.5 * cfg.alpha_max))
        a_prev = action + float(rng.choice([-1.0, 1.0])) * 0.25 * (cfg.alpha_max - cfg.alpha_min)
        res = step(st, params, cfg, action)
        if not res.clipped[0]:
            g_s = reward_grad_state(res.state, res.accelerations, scenario.weights, scenario.fuel)
            g_a = float(reward_grad_accel(res.state, res.accelerations, scenario.weights, scenario.fuel)[0])
            g_a -= scenario.weights.lam * float(np.sign(action - a_prev))
            sens = action_sensitivity(st, params, cfg, action, g_s, g_a)
            h = 1e-6

            def run(a):
                r = step(st, params, cfg, a)
                rew = r_comb(r.state, r.accelerations, a, a_prev, scenario.weights, scenario.fuel)
                return r.state.flat(), rew

            (sp, rp), (sm, rm) = run(action + h), run(action - h)
            ds_fd = (sp - sm) / (2 * h)
            if st.is_ring:
                L = st.topology.length
                ds_fd[0::2] = ((sp - sm)[0::2] - L * np.round((sp - sm)[0::2] / L)) / (2 * h)
            e = max(float(np.max(np.abs(ds_fd - sens.d_next_state_d_action))), abs((rp - rm) / (2 * h) - sens.d_reward_d_action))
            err["action_sensitivity"] = max(err["action_sensitivity"], e)

        # reward gradient with accelerations held fixed
        st = random_interior_state(rng, scenario.n_vehicles, "open", params, cfg)
        acc = rng.uniform(-2.0, 2.0, st.n)
        a_t, a_prev = float(acc[0]), float(rng.uniform(-1, 1))
        g = reward_grad_state(st, acc, scenario.weights, scenario.fuel)
        err["reward_gradient"] = max(err["reward_gradient"], float(np.max(np.abs(g - _fd_reward_grad(st, acc, a_t, a_prev, scenario)))))

    tol = {"step_jacobian": GRAD_TOL, "action_sensitivity": GRAD_TOL, "reward_gradient": REWARD_GRAD_TOL}
    checks = {k: {"max_error": v, "tolerance": tol[k], "passed": v <= tol[k]} for k, v in err.items()}
    return {"trials": trials, "checks": checks, "passed": all(c["passed"] for c in checks.values())}


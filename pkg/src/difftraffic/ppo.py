"""PPO with GAE, plus gradient-based experience perturbation (DiffPPO)."""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .env import ExperienceUnit, ScenarioConfig, TrafficEnv
from .network import Adam, GaussianPolicy, PolicySpec, ValueFunction, clip_grad_norm

log = logging.getLogger(__name__)

SEED_FIELDS = [
    "iteration",
    "mean_reward",
    "std_reward",
    "mean_r_vel",
    "mean_r_mpg",
    "mean_jerk_pen",
    "collisions",
    "wall_time_s",
]
AGG_METRICS = SEED_FIELDS[1:-1]


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 50
    steps_per_iter: int = 3000
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    epochs: int = 4
    minibatch_size: int = 256
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    seeds: tuple = (0,)
    algorithm: str = "ppo"
    normalize_obs: bool = True
    stats_steps: int = 3000
    policy: PolicySpec = field(default_factory=PolicySpec)

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not self.clip_ratio > 0:
            raise ValueError("clip_ratio must be positive")
        if self.algorithm not in ("ppo", "diffppo"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.iterations < 0 or self.steps_per_iter < 1 or self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("iterations, steps_per_iter, epochs and minibatch_size must be positive")
        if self.stats_steps < 2:
            raise ValueError("stats_steps must be at least 2")


@dataclass(frozen=True)
class PerturbationConfig:
    delta: float = 0.2
    eta: Optional[float] = None  # None -> 0.1 * (alpha_max - alpha_min)
    rule: str = "sign"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.eta is not None and self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.rule not in ("sign", "scaled", "random"):
            raise ValueError(f"unknown perturbation rule {self.rule!r}")

    def resolved_eta(self, low, high) -> float:
        return 0.1 * (high - low) if self.eta is None else self.eta


@dataclass(eq=False)
class Rollout:
    units: list
    logp: np.ndarray

    def __len__(self):
        return len(self.units)

    def arrays(self):
        obs = np.array([u.s for u in self.units])
        next_obs = np.array([u.s_next for u in self.units])
        actions = np.array([u.a for u in self.units])
        rewards = np.array([u.r for u in self.units])
        dones = np.array([u.done for u in self.units], dtype=float)
        return obs, actions, rewards, next_obs, dones

    def terminals(self) -> np.ndarray:
        """Done flags excluding horizon truncation (those steps still bootstrap)."""
        return np.array([u.done and not u.info.get("truncated", False) for u in self.units], dtype=float)


def collect_rollout(env: TrafficEnv, policy: GaussianPolicy, steps: int, rng) -> Rollout:
    """Run ``steps`` environment steps, auto-resetting finished episodes."""
    rng = np.random.default_rng(rng)
    units = []
    logps = np.empty(steps)
    obs = env._obs.copy() if not env.done else None
    for k in range(steps):
        if env.done:
            obs = env.reset(seed=int(rng.integers(2**31 - 1)))
        mu = policy.mean(obs[None, :])
        action = float(mu[0] + np.exp(policy.log_std[0]) * rng.standard_normal())
        obs, _, _, unit = env.step(action)
        # density of the clamped action that the environment actually applied
        logps[k] = policy._log_prob(mu, np.array([unit.a]))[0]
        units.append(unit)
    return Rollout(units, logps)


def perturb_experience(unit: ExperienceUnit, cfg: PerturbationConfig, low: float, high: float, rng=None):
    """Shift (action, reward, next state) along the simulator gradients.

    Returns ``(unit, eps)``; ``eps == 0`` means the unit passed through unchanged.
    The step size keeps ``max|eps * ds_da| <= delta`` and ``|eps| <= eta``.
    """
    eta = cfg.resolved_eta(low, high)
    if unit.done or unit.flagged or unit.dr_da == 0.0 or eta == 0.0:
        return unit, 0.0
    if cfg.rule == "sign":
        eps = eta * float(np.sign(unit.dr_da))
    elif cfg.rule == "scaled":
        eps = eta * unit.dr_da
        if abs(eps) > eta:
            eps = eta * float(np.sign(eps))
    else:
        eps = eta * float(rng.choice([-1.0, 1.0]))
    m = float(np.max(np.abs(unit.ds_da)))
    if m > 0 and abs(eps) * m > cfg.delta:
        eps = float(np.sign(eps)) * cfg.delta / m
        while abs(eps) * m > cfg.delta:
            eps = float(np.nextafter(eps, 0.0))
    a_new = min(max(unit.a + eps, low), high)
    eps = a_new - unit.a
    # the subtraction can round |eps| up by an ulp; step a_new back until both bounds hold
    while abs(eps) * m > cfg.delta or abs(eps) > eta:
        a_new = float(np.nextafter(a_new, unit.a))
        eps = a_new - unit.a
    if eps == 0.0:
        return unit, 0.0
    new = replace(
        unit,
        a=a_new,
        r=unit.r + eps * unit.dr_da,
        s_next=unit.s_next + eps * unit.ds_da,
        info=dict(unit.info, eps=eps),
    )
    return new, eps


def compute_gae(rewards, values, next_values, dones, gamma: float, lam: float, terminals=None):
    """Generalized advantage estimates and value targets.

    ``dones[t]`` ends the episode after step ``t`` (the recursion is cut).
    ``terminals[t]`` (default: ``dones``) additionally drops the bootstrap
    ``next_values[t]``; a time-limit cut is done but not terminal.
    ``next_values[t]`` is the critic's value of the (possibly perturbed) next
    state of step ``t``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    next_values = np.asarray(next_values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    terminals = dones if terminals is None else np.asarray(terminals, dtype=float)
    n = rewards.size
    if not (values.size == next_values.size == dones.size == terminals.size == n):
        raise ValueError("rewards, values, next_values and dones must have equal length")
    not_done = 1.0 - dones
    td = rewards + gamma * (1.0 - terminals) * next_values - values
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        running = td[t] + gamma * lam * not_done[t] * running
        adv[t] = running
    return adv, adv + values


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=float)
    std = adv.std()
    if std < 1e-12:
        return np.zeros_like(adv)
    return (adv - adv.mean()) / std


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def observation_stats(scenario: ScenarioConfig, steps: int, seed: int = 0):
    """Per-feature mean and std of observations under uncontrolled (all-IDM) driving.

    Uses its own generator so the training stream is unaffected. Constant features get scale 1.
    """
    env = TrafficEnv(scenario)
    obs = [env.reset(seed=seed)]
    episode = 0
    while len(obs) < steps:
        if env.done:
            episode += 1
            obs.append(env.reset(seed=seed + episode))
        else:
            obs.append(env.step(None)[0])
    obs = np.array(obs)
    std = obs.std(axis=0)
    std[std < 1e-6] = 1.0
    return obs.mean(axis=0), std


class PPOLearner:
    """Policy, critic and their optimizers."""

    def __init__(self, obs_dim, low, high, cfg: TrainConfig, rng, obs_stats=None):
        self.cfg = cfg
        self.policy = GaussianPolicy(obs_dim, low, high, cfg.policy, rng)
        self.value = ValueFunction(obs_dim, cfg.policy, rng)
        if obs_stats is not None:
            self.policy.net.set_input_stats(*obs_stats)
            self.value.net.set_input_stats(*obs_stats)
        self.opt_pi = Adam(self.policy.params, lr=cfg.lr)
        self.opt_v = Adam(self.value.params, lr=cfg.lr)


def ppo_update(learner: PPOLearner, batch: Batch, cfg: TrainConfig, rng) -> dict:
    """Clipped-surrogate policy step and squared-error value step over shuffled minibatches."""
    adv_all = normalize_advantages(batch.advantages)
    n = adv_all.size
    eps = cfg.clip_ratio
    surr_losses, v_losses, kls = [], [], []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start : start + cfg.minibatch_size]
            obs = batch.obs[idx]
            act = batch.actions[idx]
            adv = adv_all[idx]
            logp = learner.policy.log_prob(obs, act)
            ratio = np.exp(logp - batch.logp_old[idx])
            unclipped = ratio * adv
            clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
            loss = -float(np.mean(np.minimum(unclipped, clipped)))
            # the unclipped branch is active wherever it is the minimum
            active = unclipped <= clipped
            weights = np.where(active, -adv * ratio, 0.0) / idx.size
            grads, _ = learner.policy.grad_log_prob(obs, act, weights)
            v_grads, v_loss = learner.value.grad_mse(obs, batch.returns[idx])
            if not (np.isfinite(loss) and np.isfinite(v_loss)):
                raise FloatingPointError(
                    f"non-finite loss (surrogate={loss}, value={v_loss}, "
                    f"max|ratio|={np.max(np.abs(ratio))}, log_std={learner.policy.log_std[0]})"
                )
            grads, _ = clip_grad_norm(grads, cfg.max_grad_norm)
            v_grads, _ = clip_grad_norm(v_grads, cfg.max_grad_norm)
            learner.opt_pi.step(grads)
            learner.opt_v.step(v_grads)
            surr_losses.append(loss)
            v_losses.append(v_loss)
            kls.append(float(np.mean((ratio - 1.0) - np.log(ratio))))
    return {
        "surrogate_loss": float(np.mean(surr_losses)),
        "value_loss": float(np.mean(v_losses)),
        "kl": float(np.mean(kls)),
    }


@dataclass
class SeedResult:
    seed: int
    rows: list
    policy: Optional[GaussianPolicy] = None
    perturbation: list = field(default_factory=list)
    error: Optional[str] = None


def train_seed(
    scenario: ScenarioConfig,
    cfg: TrainConfig,
    pert: PerturbationConfig,
    seed: int,
) -> SeedResult:
    rng = np.random.default_rng(seed)
    env = TrafficEnv(scenario)
    low, high = scenario.step.alpha_min, scenario.step.alpha_max
    stats = observation_stats(scenario, cfg.stats_steps) if cfg.normalize_obs else None
    learner = PPOLearner(env.obs_dim, low, high, cfg, rng, stats)
    result = SeedResult(seed, [])
    t0 = time.perf_counter()
    try:
        for it in range(cfg.iterations):
            ro = collect_rollout(env, learner.policy, cfg.steps_per_iter, rng)
            units = list(ro.units)
            logp_old = ro.logp.copy()
            stats = {"n_perturbed": 0, "max_state_shift": 0.0, "violations": 0}
            if cfg.algorithm == "diffppo":
                changed = []
                for k, u in enumerate(units):
                    new, e = perturb_experience(u, pert, low, high, rng)
                    if e != 0.0:
                        units[k] = new
                        changed.append(k)
                        shift = float(np.max(np.abs(e * u.ds_da)))
                        stats["max_state_shift"] = max(stats["max_state_shift"], shift)
                        stats["violations"] += int(shift > pert.delta)
                if changed:
                    obs_c = np.array([units[k].s for k in changed])
                    act_c = np.array([units[k].a for k in changed])
                    logp_old[changed] = learner.policy.log_prob(obs_c, act_c)
                stats["n_perturbed"] = len(changed)
            result.perturbation.append(stats)

            batch_ro = Rollout(units, logp_old)
            obs, actions, rewards, next_obs, dones = batch_ro.arrays()
            values = learner.value(obs)
            next_values = learner.value(next_obs)
            adv, returns = compute_gae(
                rewards, values, next_values, dones, cfg.gamma, cfg.gae_lambda, batch_ro.terminals()
            )
            ppo_update(learner, Batch(obs, actions, logp_old, adv, returns), cfg, rng)

            raw_r = np.array([u.r for u in ro.units])
            result.rows.append(
                {
                    "iteration": it,
                    "mean_reward": float(raw_r.mean()),
                    "std_reward": float(raw_r.std()),
                    "mean_r_vel": float(np.mean([u.info["r_vel"] for u in ro.units])),
                    "mean_r_mpg": float(np.mean([u.info["r_mpg"] for u in ro.units])),
                    "mean_jerk_pen": float(np.mean([u.info["jerk"] for u in ro.units])),
                    "collisions": int(sum(u.info["collision"] for u in ro.units)),
                    "wall_time_s": time.perf_counter() - t0,
                }
            )
            log.debug("seed %d iter %d reward %.4f", seed, it, raw_r.mean())
    except Exception as exc:  # recorded so that other seeds keep running
        log.exception("seed %d failed", seed)
        result.error = f"{type(exc).__name__}: {exc}"
    result.policy = learner.policy
    return result


@dataclass
class TrainResult:
    seeds: list

    def aggregate(self) -> list:
        ok = [s for s in self.seeds if s.rows]
        if not ok:
            return []
        n_iter = min(len(s.rows) for s in ok)
        rows = []
        for it in range(n_iter):
            row = {"iteration": it}
            for metric in AGG_METRICS:
                vals = np.array([s.rows[it][metric] for s in ok], dtype=float)
                if metric == "mean_reward":
                    row["mean_over_seeds"] = float(vals.mean())
                    row["std_over_seeds"] = float(vals.std())
                else:
                    row[f"{metric}_mean_over_seeds"] = float(vals.mean())
                    row[f"{metric}_std_over_seeds"] = float(vals.std())
            rows.append(row)
        return rows


def train(
    scenario: ScenarioConfig,
    cfg: TrainConfig,
    pert: PerturbationConfig = PerturbationConfig(),
    jobs: Optional[int] = None,
) -> TrainResult:
    jobs = jobs or os.cpu_count() or 1
    seeds = list(cfg.seeds)
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
            futures = [pool.submit(train_seed, scenario, cfg, pert, s) for s in seeds]
            results = [f.result() for f in futures]
    else:
        results = [train_seed(scenario, cfg, pert, s) for s in seeds]
    return TrainResult(results)


def write_rows(rows, path, fields=None) -> None:
    fields = fields or (list(rows[0].keys()) if rows else SEED_FIELDS)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

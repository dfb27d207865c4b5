"""JSON experiment configuration: scenario, rewards, training and experiment sections."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import IdmParams, StepConfig
from .env import ScenarioConfig
from .network import PolicySpec
from .ppo import PerturbationConfig, TrainConfig
from .rewards import FuelModel, RewardWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    output_dir: str = "runs"
    seeds: tuple = (0,)

    def train_config(self, **overrides) -> TrainConfig:
        overrides.setdefault("seeds", tuple(self.seeds))
        return dataclasses.replace(self.training, **overrides)


_SCENARIO_NESTED = {"idm": IdmParams, "step": StepConfig}
_SCENARIO_SKIP = {"weights", "fuel"}


def _line_of(text: str, key: str):
    if text is None:
        return None
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _build(cls, data, section, text, skip=(), nested=None):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    nested = nested or {}
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = sorted(set(data) - names - set(nested))
    if unknown:
        line = _line_of(text, unknown[0])
        where = f" (line {line})" if line else ""
        raise ConfigError(f"unknown key {unknown[0]!r} in section {section!r}{where}")
    kwargs = {}
    for key, val in data.items():
        if key in nested:
            kwargs[key] = _build(nested[key], val, f"{section}.{key}", text)
        elif isinstance(val, list):
            kwargs[key] = tuple(val)
        else:
            kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


def from_dict(data: dict, text: str = None) -> ExperimentConfig:
    allowed = {"scenario", "rewards", "training", "experiment"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        line = _line_of(text, unknown[0])
        raise ConfigError(f"unknown section {unknown[0]!r}" + (f" (line {line})" if line else ""))

    rewards = data.get("rewards", {})
    if not isinstance(rewards, dict):
        raise ConfigError("section 'rewards' must be an object")
    bad = sorted(set(rewards) - {"weights", "fuel"})
    if bad:
        line = _line_of(text, bad[0])
        raise ConfigError(f"unknown key {bad[0]!r} in section 'rewards'" + (f" (line {line})" if line else ""))
    weights = _build(RewardWeights, rewards.get("weights", {}), "rewards.weights", text)
    fuel = _build(FuelModel, rewards.get("fuel", {}), "rewards.fuel", text)

    scen_data = dict(data.get("scenario", {}))
    base = _build(ScenarioConfig, scen_data, "scenario", text, skip=_SCENARIO_SKIP, nested=_SCENARIO_NESTED)
    try:
        scenario = dataclasses.replace(base, weights=weights, fuel=fuel)
    except ValueError as exc:
        raise ConfigError(f"invalid section 'scenario': {exc}") from exc

    train_data = dict(data.get("training", {}))
    pert = _build(PerturbationConfig, train_data.pop("perturbation", {}), "training.perturbation", text)
    training = _build(TrainConfig, train_data, "training", text, skip={"seeds"}, nested={"policy": PolicySpec})

    exp = data.get("experiment", {})
    if not isinstance(exp, dict):
        raise ConfigError("section 'experiment' must be an object")
    bad = sorted(set(exp) - {"output_dir", "seeds"})
    if bad:
        line = _line_of(text, bad[0])
        raise ConfigError(f"unknown key {bad[0]!r} in section 'experiment'" + (f" (line {line})" if line else ""))
    seeds = tuple(int(s) for s in exp.get("seeds", [0]))
    if not seeds:
        raise ConfigError("experiment.seeds must not be empty")
    return ExperimentConfig(
        scenario=scenario,
        training=dataclasses.replace(training, seeds=seeds),
        perturbation=pert,
        output_dir=str(exp.get("output_dir", "runs")),
        seeds=seeds,
    )


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(data, text)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def to_dict(cfg: ExperimentConfig) -> dict:
    scenario = _plain(cfg.scenario)
    weights = scenario.pop("weights")
    fuel = scenario.pop("fuel")
    training = _plain(cfg.training)
    training.pop("seeds")
    training["perturbation"] = _plain(cfg.perturbation)
    return {
        "scenario": scenario,
        "rewards": {"weights": weights, "fuel": fuel},
        "training": training,
        "experiment": {"output_dir": cfg.output_dir, "seeds": list(cfg.seeds)},
    }


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2)

"""Differentiable IDM traffic simulation with analytical gradients and gradient-enhanced PPO."""

from .config import ConfigError, ExperimentConfig
from .dynamics import (
    CollisionError,
    IdmParams,
    OpenRoad,
    Ring,
    StepConfig,
    TrafficState,
    equilibrium_state,
    equilibrium_velocity,
    headway,
    idm_acceleration,
    step,
)
from .env import ExperienceUnit, ScenarioConfig, TrafficEnv, figure_eight_yield
from .gradients import (
    BlockJacobian,
    action_sensitivity,
    dynamics_jacobian,
    finite_difference_jacobian,
    jacobian_benchmark,
    step_jacobian,
)
from .network import GaussianPolicy, PolicySpec
from .ppo import PerturbationConfig, TrainConfig, compute_gae, perturb_experience, ppo_update, train
from .rewards import FuelModel, RewardWeights, fuel_rate, jerk_penalty, r_comb, r_mpg, r_vel, reward_grad_state

__version__ = "0.1.0"

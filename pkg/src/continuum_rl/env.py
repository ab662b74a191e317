"""Point-reaching MDP built on the plant.

The shared state is the per-axis tip-to-target error ``(delta1, delta2)``;
each agent is rewarded on its own axis only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .plant import Plant, PlantConfig, PlantState, collision_force, forward_kinematics


@dataclass(frozen=True)
class ObservationState:
    delta1: float
    delta2: float

    def as_array(self):
        return np.array([self.delta1, self.delta2])

    @property
    def distance(self):
        return math.hypot(self.delta1, self.delta2)


@dataclass(frozen=True)
class Target:
    x_tar: float
    y_tar: float


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 200
    arrival_radius: float = 0.25
    dwell_steps: int = 10
    # literal signed comparison of delta_t - delta_{t-1}, kept for compatibility
    signed_progress: bool = False

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.arrival_radius <= 0:
            raise ValueError("arrival_radius must be > 0")
        if self.dwell_steps < 1:
            raise ValueError("dwell_steps must be >= 1")


TRAIN_EPISODE = EpisodeConfig()
EVAL_EPISODE = EpisodeConfig(dwell_steps=1)


def observe(plant_state, target, tip=None):
    """Tip-to-target error; ``tip`` overrides the state's tip (e.g. a noisy measurement)."""
    if tip is None:
        tip = plant_state.tip
    return ObservationState(float(target.x_tar - tip[0]), float(target.y_tar - tip[1]))


def progress_sign(delta_t, delta_prev, signed=False):
    if signed:
        diff = delta_t - delta_prev
    else:
        diff = abs(delta_t) - abs(delta_prev)
    if diff < 0:
        return 1.0
    if diff > 0:
        return -1.0
    return 0.0


def reward(delta_t, delta_prev, signed=False):
    return -abs(delta_t) + progress_sign(delta_t, delta_prev, signed)


def update_dwell(obs, ecfg, counter):
    """Consecutive-step count of being inside the arrival radius, including this step."""
    return counter + 1 if obs.distance < ecfg.arrival_radius else 0


def is_terminal(obs, step, ecfg, dwell_counter):
    """Return ``(done, success)``; ``dwell_counter`` already includes the current step."""
    success = obs.distance < ecfg.arrival_radius and dwell_counter >= ecfg.dwell_steps
    return success or step >= ecfg.max_steps, success


def max_reach(phi, cfg):
    """Projected x-y reach along bending plane ``phi`` under the per-axis limits."""
    c, s = abs(math.cos(phi)), abs(math.sin(phi))
    theta = cfg.max_bend_per_axis / max(c, s)
    q = (cfg.cable_pitch_radius * theta * math.cos(phi), cfg.cable_pitch_radius * theta * math.sin(phi))
    lim = cfg.q_limit
    q = (min(max(q[0], -lim), lim), min(max(q[1], -lim), lim))
    return math.hypot(*forward_kinematics(q, cfg)[:2])


def check_target(target, cfg):
    if not (math.isfinite(target.x_tar) and math.isfinite(target.y_tar)):
        raise DomainError(f"non-finite target {target}")
    rho = math.hypot(target.x_tar, target.y_tar)
    if rho > 0 and rho > max_reach(math.atan2(target.y_tar, target.x_tar), cfg) + 1e-9:
        raise DomainError(f"target ({target.x_tar}, {target.y_tar}) outside the projected workspace")


def reset(target, cfg):
    check_target(target, cfg)
    plant = Plant(cfg)
    return plant.state, observe(plant.state, target)


@dataclass(frozen=True)
class StepResult:
    obs: ObservationState
    rewards: tuple[float, float]
    done: bool
    success: bool
    tip: tuple[float, float, float]
    saturated: bool = False


@dataclass
class ContinuumEnv:
    """Local environment. ``RemoteEnv`` in :mod:`continuum_rl.proto` has the same surface."""

    plant_cfg: PlantConfig = field(default_factory=PlantConfig)
    episode_cfg: EpisodeConfig = TRAIN_EPISODE
    rng: np.random.Generator | None = None

    def __post_init__(self):
        self.plant = Plant(self.plant_cfg, rng=self.rng)
        self.target = Target(0.0, 0.0)
        self.step_count = 0
        self.dwell = 0
        self._obs = self._observe()

    def _observe(self):
        return observe(self.plant.state, self.target, self.plant.measured_tip())

    @property
    def state(self) -> PlantState:
        return self.plant.state

    def reset(self, target):
        check_target(target, self.plant_cfg)
        self.target = target
        self.plant.reset()
        self.step_count = 0
        self.dwell = 0
        self._obs = self._observe()
        return self._obs

    def observe(self):
        return self._obs

    def retarget(self, target):
        """Move the goal without touching the plant (trajectory tracking)."""
        check_target(target, self.plant_cfg)
        self.target = target
        self._obs = self._observe()
        return self._obs

    def step(self, action):
        prev = self._obs
        self.plant.act(action)
        self.step_count += 1
        obs = self._observe()
        signed = self.episode_cfg.signed_progress
        rewards = (reward(obs.delta1, prev.delta1, signed), reward(obs.delta2, prev.delta2, signed))
        self.dwell = update_dwell(obs, self.episode_cfg, self.dwell)
        done, success = is_terminal(obs, self.step_count, self.episode_cfg, self.dwell)
        self._obs = obs
        return StepResult(obs, rewards, done, success, self.plant.state.tip, self.plant.state.saturated)

    def info(self):
        return config_vector(self.plant_cfg, self.episode_cfg)


def config_vector(plant_cfg, episode_cfg):
    """Fixed-layout numeric digest used to check that two ends agree on the setup."""
    obs = plant_cfg.obstacle_field
    vec = [
        plant_cfg.segment_length,
        plant_cfg.cable_pitch_radius,
        plant_cfg.max_bend_per_axis,
        plant_cfg.actuation_step_limit,
        plant_cfg.hysteresis_deadband,
        plant_cfg.payload_mass_g,
        plant_cfg.payload_compliance,
        plant_cfg.tip_noise_std,
        float(len(plant_cfg.collision_schedule)),
        0.0 if obs is None else obs.amplitude,
        0.0 if obs is None else obs.wavelength,
        0.0 if obs is None else obs.clearance,
        0.0 if obs is None else obs.stiffness_gain,
        float(episode_cfg.max_steps),
        episode_cfg.arrival_radius,
        float(episode_cfg.dwell_steps),
    ]
    return tuple(float(v) for v in vec)


TRACE_HEADER = (
    "step", "delta1", "delta2", "reward1", "reward2", "action1", "action2",
    "tip_x", "tip_y", "tip_z", "payload", "obstacle", "collision", "saturated",
)


class TraceWriter:
    """Appends one CSV row per environment step."""

    def __init__(self, stream, plant_cfg):
        self._w = csv.writer(stream, lineterminator="\n")
        self._w.writerow(TRACE_HEADER)
        self._cfg = plant_cfg

    def record(self, step, result, action, time_step=None):
        cfg = self._cfg
        t = step if time_step is None else time_step
        obstacle_contact = 0
        if cfg.obstacle_field is not None:
            obstacle_contact = int(cfg.obstacle_field.surface_height(result.tip[0], result.tip[1]) > result.tip[2])
        self._w.writerow(
            (
                step,
                repr(result.obs.delta1),
                repr(result.obs.delta2),
                repr(result.rewards[0]),
                repr(result.rewards[1]),
                repr(float(action[0])),
                repr(float(action[1])),
                repr(result.tip[0]),
                repr(result.tip[1]),
                repr(result.tip[2]),
                int(cfg.payload_mass_g > 0),
                obstacle_contact,
                repr(collision_force(t, cfg.collision_schedule)),
                int(result.saturated),
            )
        )

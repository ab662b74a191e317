"""Experiment harness shared by the CLI and the acceptance suite.

Every function here is deterministic for a given seed: agents are trained
from ``Streams(seed)`` and evaluation randomness comes from a separate
``Streams(seed + EVAL_OFFSET)`` so evaluation never shifts training.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from .agent import Hyperparameters, stabilization_episode, train
from .config import plant_profile
from .control import KmocController, RlController, gen_trajectory, rolling_mean, track, track_point
from .env import EVAL_EPISODE, TRAIN_EPISODE, ContinuumEnv, Target
from .plant import PlantConfig
from .seeding import Streams
from .shield import ShieldConfig

EVAL_OFFSET = 1000
TRAIN_TARGET = Target(10.0, -10.0)

# reference shapes, sized to stay well inside the reachable disc
SHAPES = {
    "circle": {"radius": 8.0},
    "square": {"side": 12.0},
    "infinity": {"half_width": 10.0, "half_height": 6.0},
}


def train_learner(seed, mode="madqn", episodes=100, plant_cfg=None, hp=None, target=TRAIN_TARGET):
    """Disturbance-free, shield-off training; returns ``(learner, log)``."""
    env = ContinuumEnv(plant_cfg or PlantConfig(), TRAIN_EPISODE, rng=Streams(seed)["noise"])
    return train(env, hp or Hyperparameters(), seed, mode=mode, target=target, episodes=episodes)


def rl_controller(learner, seed, shield=True, online=True, shield_cfg=None):
    """Evaluation wrapper around a private copy of ``learner``."""
    c = copy.deepcopy(learner)
    c.shield_cfg = replace(shield_cfg or ShieldConfig(), enabled=shield)
    return RlController(c, Streams(seed + EVAL_OFFSET), online=online)


def eval_env(plant_cfg, seed):
    return ContinuumEnv(plant_cfg, EVAL_EPISODE, rng=Streams(seed + EVAL_OFFSET)["noise"])


def run_shape(controller, plant_cfg, shape, seed, params=None, keep_steps=False):
    tr = gen_trajectory(shape, params if params is not None else SHAPES.get(shape, {}), plant_cfg)
    return track(controller, eval_env(plant_cfg, seed), tr, keep_steps=keep_steps)


@dataclass
class ConvergenceReport:
    seed: int
    mode: str
    successes: int
    first_success: int | None
    stabilized_at: int | None
    final_mean: tuple
    final_std: tuple


def convergence(log, seed, window=10):
    n_agents = len(log.episodes[0].rewards) if log.episodes else 0
    flags = [ep.success for ep in log.episodes]
    first = next((i + 1 for i, f in enumerate(flags) if f), None)
    stab = [stabilization_episode(log, k, window) for k in range(n_agents)]
    means, stds = [], []
    for k in range(n_agents):
        m, s = log.rolling(k, window)
        means.append(float(m[-1]))
        stds.append(float(s[-1]))
    stabilized = None if any(s is None for s in stab) else max(stab)
    return ConvergenceReport(seed, log.mode, int(sum(flags)), first, stabilized, tuple(means), tuple(stds))


def shield_ablation(learner, seed, plant_cfg=None, shapes=None, online=True):
    """Shield on vs off on identical waypoints, same agents, same seed."""
    cfg = plant_cfg or PlantConfig()
    out = {}
    for shape, params in (shapes or SHAPES).items():
        on = run_shape(rl_controller(learner, seed, True, online), cfg, shape, seed, params)
        off = run_shape(rl_controller(learner, seed, False, online), cfg, shape, seed, params)
        out[shape] = (on, off)
    return out


def payload_adaptation(learner, seed, mass_g=30.0, target=TRAIN_TARGET, repetitions=20, online=True):
    cfg = replace(PlantConfig(), payload_mass_g=mass_g)
    ctrl = rl_controller(learner, seed, True, online)
    return track_point(ctrl, eval_env(cfg, seed), target, repetitions)


def model_mismatch(learner, seed, profile="payload30", shapes=("circle", "square")):
    """MADQN (shielded, online) vs KMOC on a disturbed plant; KMOC keeps the nominal model."""
    cfg = plant_profile(profile)
    out = {}
    for shape in shapes:
        rl = run_shape(rl_controller(learner, seed, True, True), cfg, shape, seed)
        km = run_shape(KmocController(PlantConfig()), cfg, shape, seed)
        out[shape] = (rl, km)
    return out


@dataclass
class CollisionWindow:
    start: int  # scored-step index of first contact step
    end: int  # scored-step index of first free step
    baseline: float  # mean error over the pre-contact window
    peak: float  # max error from contact until recovery
    recovery_steps: int | None  # steps after release until rolling error <= baseline


def collision_recovery(learner, seed, shape="circle", baseline_window=100, window=5, horizon=60):
    """Track under the collision profile and measure each contact's spike and recovery."""
    cfg = plant_profile("collision")
    run = run_shape(rl_controller(learner, seed, True, True), cfg, shape, seed)
    e = run.metrics.errors
    rolled = rolling_mean(e, window)
    reports = []
    for ev in cfg.collision_schedule:
        # plant step t (1-based from reset) is scored step t - approach - 1
        s = ev.start_step - run.approach_steps - 1
        t = ev.end_step - run.approach_steps - 1
        if s < baseline_window or t >= len(e):
            continue
        base = float(np.mean(e[s - baseline_window:s]))
        rec = None
        for k in range(t, min(len(e), t + horizon)):
            if rolled[k] <= base and k - window + 1 >= t:
                rec = k - t
                break
        stop = t + (rec if rec is not None else horizon)
        reports.append(CollisionWindow(s, t, base, float(e[s:stop + 1].max()), rec))
    return run, reports

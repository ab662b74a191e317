"""Reference trajectories, the Jacobian-based baseline controller, and the
tracking harness used by every evaluation experiment."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .agent import learn_step
from .env import EVAL_EPISODE, Target, check_target
from .plant import PlantConfig, jacobian

DEFAULT_RATE = 20.0  # Hz
DEFAULT_SPEED = 0.12  # mm/s along the path
SUCCESS_THRESHOLD = 0.35  # mm


@dataclass(frozen=True)
class Trajectory:
    waypoints: np.ndarray  # (n, 2) mm
    rate: float = DEFAULT_RATE
    shape: str = "point"

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("trajectory rate must be > 0")

    def __len__(self):
        return len(self.waypoints)

    def path_length(self):
        if len(self.waypoints) < 2:
            return 0.0
        return float(np.sum(np.hypot(*np.diff(self.waypoints, axis=0).T)))


def _resample_by_arclength(dense, spacing):
    seg = np.hypot(*np.diff(dense, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(math.ceil(s[-1] / spacing)))
    grid = np.linspace(0.0, s[-1], n + 1)
    return np.column_stack([np.interp(grid, s, dense[:, 0]), np.interp(grid, s, dense[:, 1])])


def gen_trajectory(shape, params=None, plant_cfg=None):
    """Build a reference path.

    ``params`` keys by shape (all mm unless noted; ``speed`` in mm/s and
    ``rate`` in Hz set the waypoint spacing ``speed / rate``; ``samples``
    overrides the count):

    - circle: ``center``, ``radius``
    - square: ``center``, ``side``
    - infinity: ``center``, ``half_width``, ``half_height`` (lemniscate of Gerono)
    - line: ``start``, ``end``
    - point: ``center``
    """
    p = dict(params or {})
    rate = float(p.get("rate", DEFAULT_RATE))
    spacing = float(p.get("speed", DEFAULT_SPEED)) / rate
    samples = p.get("samples")
    cx, cy = p.get("center", (0.0, 0.0))

    if shape == "circle":
        r = float(p.get("radius", 8.0))
        n = int(samples) if samples else max(2, int(math.ceil(2 * math.pi * r / spacing)) + 1)
        ang = np.linspace(0.0, 2 * math.pi, n)
        pts = np.column_stack([cx + r * np.cos(ang), cy + r * np.sin(ang)])
    elif shape == "square":
        s = float(p.get("side", 12.0))
        per_side = int(samples) // 4 if samples else max(1, int(math.ceil(s / spacing)))
        h = s / 2
        corners = np.array([[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h], [cx - h, cy - h]])
        t = np.arange(per_side) / per_side
        parts = [a + (b - a) * t[:, None] for a, b in zip(corners[:-1], corners[1:])]
        pts = np.vstack(parts + [corners[-1:]])
    elif shape == "infinity":
        a = float(p.get("half_width", 10.0))
        b = float(p.get("half_height", 6.0))
        t = np.linspace(0.0, 2 * math.pi, 4000)
        dense = np.column_stack([cx + a * np.cos(t), cy + b * np.sin(2 * t)])
        if samples:
            s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(dense, axis=0).T))])
            grid = np.linspace(0.0, s[-1], int(samples))
            pts = np.column_stack([np.interp(grid, s, dense[:, 0]), np.interp(grid, s, dense[:, 1])])
        else:
            pts = _resample_by_arclength(dense, spacing)
    elif shape == "line":
        start = np.asarray(p.get("start", (-15.0, 10.0)), dtype=float)
        end = np.asarray(p.get("end", (15.0, 12.0)), dtype=float)
        n = int(samples) if samples else max(2, int(math.ceil(np.hypot(*(end - start)) / spacing)) + 1)
        t = np.linspace(0.0, 1.0, n)
        pts = start + (end - start) * t[:, None]
    elif shape == "point":
        n = int(samples) if samples else 1
        pts = np.tile([cx, cy], (n, 1)).astype(float)
    else:
        raise ValueError(f"unknown trajectory shape {shape!r}")

    if plant_cfg is not None:
        for x, y in pts:
            check_target(Target(float(x), float(y)), plant_cfg)
    return Trajectory(np.asarray(pts, dtype=float), rate, shape)


def dls_pinv(J, damping):
    """Damped least-squares pseudo-inverse J^T (J J^T + damping^2 I)^-1."""
    JJt = J @ J.T
    return J.T @ np.linalg.inv(JJt + damping**2 * np.eye(JJt.shape[0]))


def kmoc_step(tip, waypoint, q, cfg, gain=0.5, damping=0.1, limit=0.2):
    """Resolved-rate cable increment toward ``waypoint`` from the model Jacobian at ``q``."""
    J = jacobian(q, cfg)[:2]
    err = np.asarray(waypoint[:2], dtype=float) - np.asarray(tip[:2], dtype=float)
    dq = gain * (dls_pinv(J, damping) @ err)
    return np.clip(dq, -limit, limit)


@dataclass
class KmocController:
    """Kinematics-model-based controller.

    Motor positions are tracked controller-side from the issued commands, as
    encoders would report them, so it works unchanged against a remote plant.
    """

    model_cfg: PlantConfig
    gain: float = 0.5
    damping: float = 0.1
    limit: float = 0.2
    q: np.ndarray = field(default_factory=lambda: np.zeros(2))

    name = "kmoc"

    def reset(self):
        self.q = np.zeros(2)

    def act(self, obs, target, tip):
        dq = kmoc_step(tip, (target.x_tar, target.y_tar), tuple(self.q), self.model_cfg, self.gain, self.damping, self.limit)
        lim = self.model_cfg.q_limit
        self.q = np.clip(self.q + dq, -lim, lim)
        return (float(dq[0]), float(dq[1]))

    def feedback(self, obs, result, terminal=False):
        pass


class RlController:
    """Wraps a trained learner for evaluation, optionally learning online."""

    name = "madqn"

    def __init__(self, learner, streams, online=True, epsilon=None):
        self.learner = learner
        self.streams = streams
        self.online = online
        for ag in learner.agents:
            ag.epsilon = ag.hp.epsilon_min if epsilon is None else epsilon
        self._pending = None

    def reset(self):
        self._pending = None

    def act(self, obs, target, tip):
        indices, action = self.learner.act(obs, self.streams)
        self._pending = (obs, indices)
        return action

    def feedback(self, obs, result, terminal=False):
        if not self.online or self._pending is None:
            return
        s, indices = self._pending
        self.learner.store(s, indices, result.rewards, result.obs, terminal)
        for k, ag in enumerate(self.learner.agents, 1):
            learn_step(ag, self.streams[f"sample{k}"])
        self._pending = None


@dataclass
class TrackingMetrics:
    rms_error: float
    max_error: float
    errors: np.ndarray
    success_rate: float
    rolling_average: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success_rate outside [0, 1]")


def rolling_mean(values, window=5):
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def metrics_from_errors(errors, window=5, threshold=SUCCESS_THRESHOLD):
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("no tracking samples")
    return TrackingMetrics(
        rms_error=float(np.sqrt(np.mean(e * e))),
        max_error=float(e.max()),
        errors=e,
        success_rate=float(np.mean(e < threshold)),
        rolling_average=rolling_mean(e, window),
    )


def metrics(pairs, window=5, threshold=SUCCESS_THRESHOLD):
    """Metrics from a series of ``(target_xy, tip_xy)`` pairs (x-y plane errors)."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no tracking samples")
    err = [math.hypot(t[0] - p[0], t[1] - p[1]) for t, p in pairs]
    return metrics_from_errors(err, window, threshold)


PLOT_HEADER = ("t", "x_ref", "y_ref", "x_act", "y_act")


@dataclass
class TrackingRun:
    metrics: TrackingMetrics
    reference: np.ndarray
    actual: np.ndarray
    rate: float
    steps: list = field(default_factory=list)  # (step, result, action) for traces
    approach_steps: int = 0  # unscored steps taken before the first waypoint

    def plot_rows(self):
        for k, (r, a) in enumerate(zip(self.reference, self.actual)):
            yield (k / self.rate, r[0], r[1], a[0], a[1])

    def plot_data(self):
        s = io.StringIO()
        w = csv.writer(s, lineterminator="\n")
        w.writerow(PLOT_HEADER)
        for row in self.plot_rows():
            w.writerow([repr(float(v)) for v in row])
        return s.getvalue()


def _approach(controller, env, obs, target, max_steps, radius):
    n = 0
    while n < max_steps and obs.distance >= radius:
        tip = (target.x_tar - obs.delta1, target.y_tar - obs.delta2)
        action = controller.act(obs, target, tip)
        res = env.step(action)
        controller.feedback(obs, res)
        obs = res.obs
        n += 1
    return obs, n


def track(controller, env, trajectory, approach_steps=200, window=5, keep_steps=False):
    """Follow ``trajectory`` one control step per waypoint.

    The tip is first brought to the first waypoint (at most ``approach_steps``
    steps, not scored); then, for every waypoint, the controller acts once and
    the post-step x-y error to that waypoint is recorded.
    """
    wps = np.asarray(trajectory.waypoints, dtype=float)
    if len(wps) == 0:
        raise ValueError("empty trajectory")
    controller.reset()
    first = Target(float(wps[0, 0]), float(wps[0, 1]))
    obs = env.reset(first)
    obs, n_approach = _approach(controller, env, obs, first, approach_steps, env.episode_cfg.arrival_radius)
    actual = np.zeros_like(wps)
    errors = np.zeros(len(wps))
    steps = []
    for k, (x, y) in enumerate(wps):
        target = Target(float(x), float(y))
        obs = env.retarget(target)
        tip = (target.x_tar - obs.delta1, target.y_tar - obs.delta2)
        action = controller.act(obs, target, tip)
        res = env.step(action)
        controller.feedback(obs, res)
        actual[k] = res.tip[:2]
        errors[k] = res.obs.distance
        if keep_steps:
            steps.append((k + 1, res, action))
    return TrackingRun(metrics_from_errors(errors, window), wps, actual, trajectory.rate, steps, n_approach)


@dataclass
class PointTrackingResult:
    rep_errors: np.ndarray  # hold-window RMS error per repetition
    rep_success: np.ndarray
    rep_steps: np.ndarray  # approach steps per repetition
    rolling_average: np.ndarray

    @property
    def success_rate(self):
        return float(np.mean(self.rep_success))


def track_point(controller, env, target, repetitions=20, episode_cfg=EVAL_EPISODE,
                threshold=SUCCESS_THRESHOLD, window=5, hold_steps=20, on_hold=None):
    """Repeat a home-to-target reach ``repetitions`` times.

    Each repetition approaches until the tip is inside the arrival radius
    (or the step limit passes), then keeps regulating on the target for
    ``hold_steps`` steps. The repetition's error is the x-y RMS error over
    that hold window; it succeeds if the error is below ``threshold``.
    ``on_hold(rep, result, action)`` sees every hold-window step.
    """
    errors, success, steps = [], [], []
    for rep in range(repetitions):
        controller.reset()
        obs = env.reset(target)
        dwell = 0
        n = 0
        while n < episode_cfg.max_steps:
            tip = (target.x_tar - obs.delta1, target.y_tar - obs.delta2)
            action = controller.act(obs, target, tip)
            res = env.step(action)
            n += 1
            controller.feedback(obs, res)
            obs = res.obs
            dwell = dwell + 1 if obs.distance < episode_cfg.arrival_radius else 0
            if dwell >= episode_cfg.dwell_steps:
                break
        held = []
        for _ in range(hold_steps):
            tip = (target.x_tar - obs.delta1, target.y_tar - obs.delta2)
            action = controller.act(obs, target, tip)
            res = env.step(action)
            controller.feedback(obs, res)
            obs = res.obs
            held.append(obs.distance)
            if on_hold is not None:
                on_hold(rep, res, action)
        err = float(np.sqrt(np.mean(np.square(held)))) if held else obs.distance
        errors.append(err)
        success.append(err < threshold)
        steps.append(n)
    errors = np.array(errors)
    return PointTrackingResult(errors, np.array(success), np.array(steps), rolling_mean(errors, window))

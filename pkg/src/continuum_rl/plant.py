"""Quasi-static simulator of a 2-DoF cable-driven continuum segment.

Each axis is driven by one antagonistic cable pair, represented by a single
cable differential ``q[i]`` (mm). The per-axis bend angles ``q[i] / r_c`` are
combined into a constant-curvature arc with total bend ``theta`` and bending
plane ``phi``. Disturbances (payload, soft obstacle, rigid collision,
backlash) are layered on top of the nominal kinematics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import PlantRangeError

GRAVITY = 9.80665  # m/s^2

FK_SERIES_THRESHOLD = 1e-6
# The closed-form derivative cancels badly well above 1e-6 rad.
JACOBIAN_SERIES_THRESHOLD = 1e-3

_RANGE_TOL = 1e-9


@dataclass(frozen=True)
class SoftObstacleField:
    """Egg-crate foam below the segment.

    The foam surface height is ``clearance + amplitude*sin(2*pi*x/wl)*sin(2*pi*y/wl)``.
    """

    amplitude: float = 2.0
    wavelength: float = 12.0
    clearance: float = 20.0
    stiffness_gain: float = 0.15

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("obstacle amplitude must be >= 0")
        if self.wavelength <= 0:
            raise ValueError("obstacle wavelength must be > 0")

    def surface_height(self, x, y):
        k = 2.0 * math.pi / self.wavelength
        return self.clearance + self.amplitude * math.sin(k * x) * math.sin(k * y)


@dataclass(frozen=True)
class CollisionEvent:
    start_step: int
    end_step: int
    force: float = 2.0
    direction: tuple[float, float] = (1.0, 0.0)
    contact_compliance: float = 0.3

    def __post_init__(self):
        if self.start_step >= self.end_step:
            raise ValueError("collision start_step must precede end_step")
        if self.force < 0:
            raise ValueError("collision force must be >= 0")
        if abs(math.hypot(*self.direction) - 1.0) > 1e-9:
            raise ValueError("collision direction must be a unit vector")

    def active(self, time_step):
        return self.start_step <= time_step < self.end_step


@dataclass(frozen=True)
class PlantConfig:
    segment_length: float = 30.0
    # cable offset from the backbone; sets tip travel per mm of cable (~L/(2 r) near straight)
    cable_pitch_radius: float = 15.0
    max_bend_per_axis: float = math.pi / 2
    actuation_step_limit: float = 0.2
    hysteresis_deadband: float = 0.0
    payload_mass_g: float = 0.0
    payload_compliance: float = 8.0
    obstacle_field: SoftObstacleField | None = None
    collision_schedule: tuple[CollisionEvent, ...] = ()
    tip_noise_std: float = 0.0

    def __post_init__(self):
        if self.segment_length <= 0:
            raise ValueError("segment_length must be > 0")
        if self.cable_pitch_radius <= 0:
            raise ValueError("cable_pitch_radius must be > 0")
        if not 0 < self.max_bend_per_axis <= math.pi / 2 + 1e-12:
            raise ValueError("max_bend_per_axis must lie in (0, pi/2]")
        if self.hysteresis_deadband < 0:
            raise ValueError("hysteresis_deadband must be >= 0")
        if self.payload_mass_g < 0:
            raise ValueError("payload_mass_g must be >= 0")
        if self.tip_noise_std < 0:
            raise ValueError("tip_noise_std must be >= 0")
        object.__setattr__(self, "collision_schedule", tuple(self.collision_schedule))

    @property
    def q_limit(self):
        """Largest admissible |q[i]| in mm."""
        return self.cable_pitch_radius * self.max_bend_per_axis

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class PlantState:
    q: tuple[float, float]
    q_effective: tuple[float, float]
    tip: tuple[float, float, float]
    time_step: int = 0
    saturated: bool = False


def _check_range(q, cfg):
    lim = cfg.q_limit
    for axis, qi in enumerate(q):
        if not math.isfinite(qi) or abs(qi) > lim + _RANGE_TOL:
            raise PlantRangeError(
                f"cable differential q{axis + 1}={qi!r} mm outside +/-{lim:.6g} mm", axis=axis
            )


def forward_kinematics(q, cfg):
    """Tip position (mm) of the constant-curvature arc for cable differentials ``q``."""
    _check_range(q, cfg)
    L = cfg.segment_length
    t1 = q[0] / cfg.cable_pitch_radius
    t2 = q[1] / cfg.cable_pitch_radius
    th = math.hypot(t1, t2)
    if th < FK_SERIES_THRESHOLD:
        th2 = th * th
        s = 0.5 - th2 / 24.0
        c = 1.0 - th2 / 6.0 + th2 * th2 / 120.0
    else:
        s = 2.0 * math.sin(0.5 * th) ** 2 / (th * th)
        c = math.sin(th) / th
    # x = (L/th)(1 - cos th) cos phi; cos phi = t1 / th
    return np.array([L * t1 * s, L * t2 * s, L * c])


def jacobian(q, cfg):
    """Analytic 3x2 Jacobian d(tip)/d(q), mm of tip per mm of cable."""
    _check_range(q, cfg)
    L = cfg.segment_length
    rc = cfg.cable_pitch_radius
    t1 = q[0] / rc
    t2 = q[1] / rc
    th = math.hypot(t1, t2)
    th2 = th * th
    if th < JACOBIAN_SERIES_THRESHOLD:
        s = 0.5 - th2 / 24.0 + th2 * th2 / 720.0
        ds_over_th = -1.0 / 12.0 + th2 / 180.0 - th2 * th2 / 6720.0
        dc_over_th = -1.0 / 3.0 + th2 / 30.0 - th2 * th2 / 840.0
    else:
        one_minus_cos = 2.0 * math.sin(0.5 * th) ** 2
        s = one_minus_cos / th2
        ds_over_th = (th * math.sin(th) - 2.0 * one_minus_cos) / (th2 * th2)
        dc_over_th = (th * math.cos(th) - math.sin(th)) / (th2 * th)
    J = np.array(
        [
            [s + t1 * t1 * ds_over_th, t1 * t2 * ds_over_th],
            [t1 * t2 * ds_over_th, s + t2 * t2 * ds_over_th],
            [t1 * dc_over_th, t2 * dc_over_th],
        ]
    )
    return J * (L / rc)


def _bend_geometry(tip):
    """Recover (theta, phi) of a constant-curvature tip position."""
    rho = math.hypot(tip[0], tip[1])
    theta = 2.0 * math.atan2(rho, tip[2])
    phi = math.atan2(tip[1], tip[0])
    return theta, phi


def bend_direction(tip):
    """Unit vector along which the tip moves when the arc bends further.

    Returns ``None`` at the straight configuration, where the direction is
    undefined.
    """
    theta, phi = _bend_geometry(tip)
    if theta < FK_SERIES_THRESHOLD:
        return None
    # d/dtheta of (1 - cos)/theta and sin/theta (uniform length scale dropped)
    d_rho = (theta * math.sin(theta) - 2.0 * math.sin(0.5 * theta) ** 2) / theta**2
    d_z = (theta * math.cos(theta) - math.sin(theta)) / theta**2
    n = math.hypot(d_rho, d_z)
    return np.array([d_rho * math.cos(phi) / n, d_rho * math.sin(phi) / n, d_z / n])


def payload_deflection(tip, mass_g, cfg):
    """Tip sag caused by a mass hung at the tip.

    Magnitude ``compliance * m * g * sin(theta)``: zero when straight, largest
    when the tip is horizontal. Direction is that of extra bending, which
    points downward with an outward in-plane component.
    """
    if mass_g <= 0 or cfg.payload_compliance == 0:
        return np.zeros(3)
    u = bend_direction(tip)
    if u is None:
        return np.zeros(3)
    theta, _ = _bend_geometry(tip)
    magnitude = cfg.payload_compliance * (mass_g * 1e-3 * GRAVITY) * math.sin(theta)
    return magnitude * u


def soft_obstacle_offset(tip, obstacle):
    """Reaction of the foam when the tip dips below its surface.

    Penetration depth times ``stiffness_gain``, applied against the bending
    direction (the foam props the tip up and back toward the axis).
    """
    if obstacle is None:
        return np.zeros(3)
    penetration = obstacle.surface_height(tip[0], tip[1]) - tip[2]
    if penetration <= 0:
        return np.zeros(3)
    u = bend_direction(tip)
    if u is None:
        return np.array([0.0, 0.0, obstacle.stiffness_gain * penetration])
    return -obstacle.stiffness_gain * penetration * u


def collision_offset(time_step, schedule):
    offset = np.zeros(3)
    for ev in schedule or ():
        if ev.active(time_step):
            offset[0] += ev.force * ev.contact_compliance * ev.direction[0]
            offset[1] += ev.force * ev.contact_compliance * ev.direction[1]
    return offset


def collision_force(time_step, schedule):
    """Total contact force magnitude (N) at ``time_step``, for logging only."""
    return sum(ev.force for ev in schedule or () if ev.active(time_step))


def backlash(output, command, deadband):
    """Play operator; reversing the command moves nothing until ``deadband`` mm are taken up."""
    half = 0.5 * deadband
    if command - output > half:
        return command - half
    if command - output < -half:
        return command + half
    return output


def disturbed_tip(q_effective, time_step, cfg):
    nominal = forward_kinematics(q_effective, cfg)
    tip = nominal + payload_deflection(nominal, cfg.payload_mass_g, cfg)
    tip = tip + soft_obstacle_offset(nominal, cfg.obstacle_field)
    return tip + collision_offset(time_step, cfg.collision_schedule)


def initial_state(cfg):
    q = (0.0, 0.0)
    tip = disturbed_tip(q, 0, cfg)
    return PlantState(q=q, q_effective=q, tip=tuple(float(v) for v in tip), time_step=0)


def plant_step(state, action, cfg):
    """Apply one pair of cable increments and return the new state.

    Increments beyond ``actuation_step_limit`` and differentials beyond the
    bend limit are clamped; the returned state's ``saturated`` flag records it.
    """
    lim = cfg.q_limit
    step_lim = cfg.actuation_step_limit
    saturated = False
    q_new = []
    q_eff = []
    for i in range(2):
        a = float(action[i])
        if abs(a) > step_lim:
            a = math.copysign(step_lim, a)
            saturated = True
        qi = state.q[i] + a
        if qi > lim:
            qi, saturated = lim, True
        elif qi < -lim:
            qi, saturated = -lim, True
        q_new.append(qi)
        if cfg.hysteresis_deadband > 0:
            q_eff.append(backlash(state.q_effective[i], qi, cfg.hysteresis_deadband))
        else:
            q_eff.append(qi)
    t = state.time_step + 1
    tip = disturbed_tip(q_eff, t, cfg)
    return PlantState(
        q=(q_new[0], q_new[1]),
        q_effective=(q_eff[0], q_eff[1]),
        tip=(float(tip[0]), float(tip[1]), float(tip[2])),
        time_step=t,
        saturated=saturated,
    )


@dataclass
class Plant:
    """Stateful wrapper exposing reset/act like a bench motor controller."""

    cfg: PlantConfig = field(default_factory=PlantConfig)
    rng: np.random.Generator | None = None
    state: PlantState = field(init=False)

    def __post_init__(self):
        self.state = initial_state(self.cfg)

    def reset(self):
        self.state = initial_state(self.cfg)
        return self.state

    def act(self, action):
        self.state = plant_step(self.state, action, self.cfg)
        return self.state

    def measured_tip(self):
        tip = np.array(self.state.tip)
        if self.cfg.tip_noise_std > 0:
            if self.rng is None:
                raise ValueError("tip noise requested but plant has no rng")
            tip[:2] += self.rng.normal(0.0, self.cfg.tip_noise_std, size=2)
        return tip


def workspace_radius(cfg):
    """Largest x-y radius reachable along either pure axis."""
    return forward_kinematics((cfg.q_limit, 0.0), cfg)[0]

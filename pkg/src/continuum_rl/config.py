"""Flat ``key = value`` configuration files for plant profiles and scenarios.

Lines are ``key = value``; ``#`` starts a comment. Lengths are mm, angles
radians, forces N, masses g. Collision windows are given as
``collision.N = start:end[:force[:dir_x:dir_y[:compliance]]]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .plant import CollisionEvent, PlantConfig, SoftObstacleField
from .seeding import DEFAULT_SEED
from .shield import ShieldConfig

PLANT_KEYS = {
    "segment_length": float,
    "cable_pitch_radius": float,
    "max_bend_per_axis": float,
    "actuation_step_limit": float,
    "hysteresis_deadband": float,
    "payload_mass_g": float,
    "payload_compliance": float,
    "tip_noise_std": float,
}
OBSTACLE_KEYS = ("amplitude", "wavelength", "clearance", "stiffness_gain")
SHIELD_KEYS = {"threshold": float, "gain": float, "floor": float, "spacing": str, "trigger": str}


def parse_kv(text, source="<string>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value", key=line)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key", key=key)
        out[key] = value
    return out


def read_kv(path):
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    return parse_kv(text, str(p))


def _num(key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}", key=key) from None


def _bool(key, value):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}", key=key)


def _collision(key, value):
    parts = [p.strip() for p in value.split(":")]
    if not 2 <= len(parts) <= 6 or len(parts) == 4:
        raise ConfigError(f"{key}: expected start:end[:force[:dx:dy[:compliance]]]", key=key)
    nums = [_num(key, p) for p in parts]
    kw = {"start_step": int(nums[0]), "end_step": int(nums[1])}
    if len(nums) >= 3:
        kw["force"] = nums[2]
    if len(nums) >= 5:
        n = math.hypot(nums[3], nums[4])
        if n == 0:
            raise ConfigError(f"{key}: zero collision direction", key=key)
        kw["direction"] = (nums[3] / n, nums[4] / n)
    if len(nums) == 6:
        kw["contact_compliance"] = nums[5]
    try:
        return CollisionEvent(**kw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}", key=key) from None


def plant_from_kv(kv, base=None, prefix=""):
    """Build a PlantConfig from ``kv``; keys not under ``prefix`` are ignored, unknown ones rejected."""
    cfg = base or PlantConfig()
    changes = {}
    obstacle = {}
    collisions = []
    for key, value in kv.items():
        if not key.startswith(prefix):
            continue
        k = key[len(prefix):]
        if k in PLANT_KEYS:
            changes[k] = _num(key, value)
        elif k.startswith("obstacle."):
            name = k.split(".", 1)[1]
            if name not in OBSTACLE_KEYS:
                raise ConfigError(f"unknown configuration key {key!r}", key=key)
            obstacle[name] = _num(key, value)
        elif k.startswith("collision."):
            collisions.append((k, _collision(key, value)))
        else:
            raise ConfigError(f"unknown configuration key {key!r}", key=key)
    if obstacle:
        base_obs = cfg.obstacle_field or SoftObstacleField()
        changes["obstacle_field"] = replace(base_obs, **obstacle)
    if collisions:
        changes["collision_schedule"] = tuple(ev for _, ev in sorted(collisions))
    try:
        return replace(cfg, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_plant_config(path, base=None):
    return plant_from_kv(read_kv(path), base)


def miniature_profile(base=None):
    """Stiff-nonlinear stand-in: cable backlash plus a 10 g tip payload."""
    return replace(base or PlantConfig(), hysteresis_deadband=0.3, payload_mass_g=10.0)


def default_collisions(first=2000, second=6600, length=400):
    return (
        CollisionEvent(first, first + length, force=2.0, direction=(1.0, 0.0), contact_compliance=0.3),
        CollisionEvent(second, second + length, force=2.0, direction=(0.0, 1.0), contact_compliance=0.3),
    )


def plant_profile(name, base=None):
    """Named disturbance profiles used by scenarios."""
    base = base or PlantConfig()
    if name in ("nominal", "free", "none"):
        return base
    if name == "payload10":
        return replace(base, payload_mass_g=10.0)
    if name == "payload30":
        return replace(base, payload_mass_g=30.0)
    if name == "soft_obstacle":
        return replace(base, obstacle_field=SoftObstacleField())
    if name == "collision":
        return replace(base, collision_schedule=default_collisions())
    if name == "miniature":
        return miniature_profile(base)
    raise ConfigError(f"unknown disturbance profile {name!r}", key="disturbance")


SCENARIO_KEYS = {
    "name", "shape", "disturbance", "controller", "shield", "seed", "episodes",
    "online", "repetitions", "radius", "side", "half_width", "half_height",
    "center_x", "center_y", "start_x", "start_y", "end_x", "end_y", "speed",
    "rate", "samples", "train_target_x", "train_target_y",
}


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    shape: str = "circle"
    disturbance: str = "nominal"
    controller: str = "madqn"
    shield: bool = True
    seed: int = DEFAULT_SEED
    episodes: int = 100
    online: bool = True
    repetitions: int = 20
    trajectory: dict = field(default_factory=dict)
    train_target: tuple = (10.0, -10.0)
    plant: PlantConfig = field(default_factory=PlantConfig)
    shield_cfg: ShieldConfig = field(default_factory=ShieldConfig)


def scenario_from_kv(kv, base_plant=None):
    traj = {}
    plain = {}
    for key, value in kv.items():
        if key.startswith("plant.") or key.startswith("shield."):
            continue
        if key not in SCENARIO_KEYS:
            raise ConfigError(f"unknown configuration key {key!r}", key=key)
        plain[key] = value
    for k in ("radius", "side", "half_width", "half_height", "speed", "rate"):
        if k in plain:
            traj[k] = _num(k, plain[k])
    if "samples" in plain:
        traj["samples"] = int(_num("samples", plain["samples"]))
    if "center_x" in plain or "center_y" in plain:
        traj["center"] = (_num("center_x", plain.get("center_x", 0)), _num("center_y", plain.get("center_y", 0)))
    if "start_x" in plain or "start_y" in plain:
        traj["start"] = (_num("start_x", plain.get("start_x", 0)), _num("start_y", plain.get("start_y", 0)))
    if "end_x" in plain or "end_y" in plain:
        traj["end"] = (_num("end_x", plain.get("end_x", 0)), _num("end_y", plain.get("end_y", 0)))

    disturbance = plain.get("disturbance", "nominal")
    plant = plant_profile(disturbance, base_plant)
    plant = plant_from_kv(kv, plant, prefix="plant.")

    shield_changes = {}
    for key, value in kv.items():
        if key.startswith("shield."):
            k = key.split(".", 1)[1]
            if k not in SHIELD_KEYS:
                raise ConfigError(f"unknown configuration key {key!r}", key=key)
            shield_changes[k] = SHIELD_KEYS[k](value) if SHIELD_KEYS[k] is str else _num(key, value)
    enabled = _bool("shield", plain.get("shield", "true"))
    try:
        shield_cfg = ShieldConfig(enabled=enabled, **shield_changes)
    except ValueError as exc:
        raise ConfigError(str(exc), key="shield") from None

    controller = plain.get("controller", "madqn")
    if controller not in ("madqn", "single", "kmoc"):
        raise ConfigError(f"unknown controller {controller!r}", key="controller")
    shape = plain.get("shape", "circle")
    if shape not in ("circle", "square", "infinity", "line", "point"):
        raise ConfigError(f"unknown shape {shape!r}", key="shape")
    return Scenario(
        name=plain.get("name", "scenario"),
        shape=shape,
        disturbance=disturbance,
        controller=controller,
        shield=enabled,
        seed=int(_num("seed", plain.get("seed", DEFAULT_SEED))),
        episodes=int(_num("episodes", plain.get("episodes", 100))),
        online=_bool("online", plain.get("online", "true")),
        repetitions=int(_num("repetitions", plain.get("repetitions", 20))),
        trajectory=traj,
        train_target=(_num("train_target_x", plain.get("train_target_x", 10.0)),
                      _num("train_target_y", plain.get("train_target_y", -10.0))),
        plant=plant,
        shield_cfg=shield_cfg,
    )


def load_scenario(path, overrides=None):
    kv = read_kv(path)
    kv.update(overrides or {})
    return scenario_from_kv(kv)

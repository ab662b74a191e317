"""Distance-proportional action shielding.

Close to the target the action-set boundary shrinks linearly with the
remaining error (``beta * |delta|``), never below a floor; far away the
original set is used unchanged. The policy's chosen index is kept and looked
up in the rescaled set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

BASE_ACTIONS = (-0.2, -0.1, 0.1, 0.2)


@dataclass(frozen=True)
class ShieldConfig:
    actions: tuple[float, ...] = BASE_ACTIONS
    threshold: float = 2.0  # K, mm
    gain: float = 0.1  # beta
    floor: float = 0.05  # mm
    enabled: bool = True
    # "ratio" keeps A's {-1, -1/2, 1/2, 1} pattern; "uniform" uses an evenly spaced grid
    spacing: str = "ratio"
    # "axis" feeds each agent its own |delta_i|; "euclidean" uses the planar distance
    trigger: str = "axis"

    def __post_init__(self):
        a = tuple(float(v) for v in self.actions)
        object.__setattr__(self, "actions", a)
        if len(a) != 4 or list(a) != sorted(a) or any(abs(x + y) > 1e-12 for x, y in zip(a, a[::-1])):
            raise ValueError("action set must hold 4 sorted values symmetric about 0")
        if self.threshold <= 0 or self.gain <= 0 or self.floor <= 0:
            raise ValueError("threshold, gain and floor must be > 0")
        if self.spacing not in ("ratio", "uniform"):
            raise ValueError(f"unknown shield spacing {self.spacing!r}")
        if self.trigger not in ("axis", "euclidean"):
            raise ValueError(f"unknown shield trigger {self.trigger!r}")

    @property
    def boundary(self):
        return self.actions[-1]


def safe_boundary(delta_abs, cfg):
    if delta_abs > cfg.threshold:
        return cfg.boundary
    return max(cfg.floor, cfg.gain * delta_abs)


def safe_action_set(delta_abs, cfg):
    b = safe_boundary(delta_abs, cfg)
    if cfg.spacing == "uniform":
        return tuple(np.linspace(-b, b, len(cfg.actions)))
    scale = b / cfg.boundary
    return tuple(a * scale for a in cfg.actions)


def shield_action(delta_abs, a_index, cfg):
    """Safe cable increment (mm) for the policy's action index."""
    if not 0 <= a_index < len(cfg.actions):
        raise IndexError(f"action index {a_index} out of range for {len(cfg.actions)} actions")
    if not cfg.enabled:
        return cfg.actions[a_index]
    return safe_action_set(delta_abs, cfg)[a_index]


def shield_inputs(delta, cfg):
    """Per-agent distances the shield sees for the state ``delta``."""
    if cfg.trigger == "euclidean":
        d = float(np.hypot(delta[0], delta[1]))
        return d, d
    return abs(delta[0]), abs(delta[1])


class ShieldAudit:
    """Writes (|delta|, index, raw action, safe action) rows when verbose."""

    header = ("agent", "delta_abs", "index", "raw_action", "safe_action")

    def __init__(self, stream):
        self._writer = csv.writer(stream, lineterminator="\n")
        self._writer.writerow(self.header)

    def record(self, agent, delta_abs, index, cfg, safe):
        self._writer.writerow((agent, repr(float(delta_abs)), index, repr(cfg.actions[index]), repr(float(safe))))

"""Shielded multi-agent DQN testbench for a two-axis cable-driven continuum manipulator."""

__version__ = "0.1.0"

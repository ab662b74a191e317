import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from continuum_rl.errors import PlantRangeError
from continuum_rl.plant import (
    CollisionEvent,
    Plant,
    PlantConfig,
    SoftObstacleField,
    backlash,
    collision_offset,
    forward_kinematics,
    initial_state,
    jacobian,
    payload_deflection,
    plant_step,
    soft_obstacle_offset,
)

RC3 = PlantConfig(cable_pitch_radius=3.0)


def fd_jacobian(q, cfg, h=1e-6):
    cols = []
    for e in np.eye(2):
        cols.append((forward_kinematics(np.add(q, h * e), cfg) - forward_kinematics(np.subtract(q, h * e), cfg)) / (2 * h))
    return np.array(cols).T


def random_q(rng, cfg, n):
    lim = cfg.q_limit * (1 - 1e-6) - 1e-5
    return rng.uniform(-lim, lim, size=(n, 2))


def test_straight_configuration():
    assert forward_kinematics((0.0, 0.0), RC3).tolist() == [0.0, 0.0, 30.0]


def test_quarter_bend_closed_form():
    # theta = pi/2: x = z = L / theta = 60 / pi
    tip = forward_kinematics((4.71238, 0.0), RC3)
    assert tip == pytest.approx([19.098572396212, 0.0, 19.098629567139], abs=1e-9)
    tip = forward_kinematics((RC3.q_limit, 0.0), RC3)
    assert tip == pytest.approx([60 / math.pi, 0.0, 60 / math.pi], abs=1e-12)


def test_diagonal_bend_is_symmetric():
    tip = forward_kinematics((3.3322, 3.3322), RC3)
    assert tip[0] == pytest.approx(tip[1], abs=1e-12)
    assert math.degrees(math.atan2(tip[1], tip[0])) == pytest.approx(45.0)


def test_out_of_range_names_axis():
    with pytest.raises(PlantRangeError) as info:
        forward_kinematics((0.0, RC3.q_limit + 0.01), RC3)
    assert info.value.axis == 1
    with pytest.raises(PlantRangeError) as info:
        jacobian((-RC3.q_limit - 0.01, 0.0), RC3)
    assert info.value.axis == 0


def test_series_branch_meets_closed_form():
    th = 1e-6
    rc = RC3.cable_pitch_radius
    for phi in np.linspace(0, 2 * np.pi, 9):
        q = (rc * th * math.cos(phi), rc * th * math.sin(phi))
        L = RC3.segment_length
        closed = np.array([
            L / th * 2 * math.sin(th / 2) ** 2 * math.cos(phi),
            L / th * 2 * math.sin(th / 2) ** 2 * math.sin(phi),
            L / th * math.sin(th),
        ])
        # just below the switch the series branch is used
        q_below = (q[0] * (1 - 1e-9), q[1] * (1 - 1e-9))
        assert np.max(np.abs(forward_kinematics(q_below, RC3) - closed)) < 1e-9


def test_jacobian_at_straight():
    J = jacobian((0.0, 0.0), RC3)
    expected = np.array([[5.0, 0.0], [0.0, 5.0], [0.0, 0.0]])
    assert np.allclose(J, expected, atol=1e-12)
    assert np.allclose(fd_jacobian((0.0, 0.0), RC3), expected, atol=1e-6)


def test_jacobian_planar_bend_stays_in_plane():
    for q1 in (-3.0, -0.5, 0.7, 2.2, 4.5):
        assert jacobian((q1, 0.0), RC3)[1, 0] == 0.0


@pytest.mark.parametrize("cfg", [RC3, PlantConfig()])
def test_jacobian_matches_finite_differences(cfg):
    rng = np.random.default_rng(7)
    for q in random_q(rng, cfg, 100):
        J = jacobian(q, cfg)
        Jfd = fd_jacobian(q, cfg)
        assert np.linalg.norm(J - Jfd) / np.linalg.norm(J) < 1e-6


def test_jacobian_continuous_through_series_switch():
    rc = RC3.cable_pitch_radius
    for th in (5e-4, 9.99e-4, 1.001e-3, 2e-3):
        q = (rc * th * 0.6, rc * th * 0.8)
        assert np.allclose(jacobian(q, RC3), fd_jacobian(q, RC3, h=1e-7), rtol=1e-6, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_tip_inside_hemisphere(u, v):
    cfg = PlantConfig()
    tip = forward_kinematics((u * cfg.q_limit, v * cfg.q_limit), cfg)
    assert np.linalg.norm(tip) <= cfg.segment_length + 1e-9
    assert tip[2] >= -1e-9 or math.hypot(u, v) * cfg.max_bend_per_axis > math.pi / 2


def test_zero_action_step_is_identity():
    s = initial_state(PlantConfig())
    s1 = plant_step(plant_step(s, (0.15, -0.1), PlantConfig()), (0.0, 0.0), PlantConfig())
    s2 = plant_step(s1, (0.0, 0.0), PlantConfig())
    assert s2.tip == s1.tip and s2.q == s1.q
    assert s2.time_step == s1.time_step + 1


def test_no_deadband_means_effective_equals_command():
    cfg = PlantConfig()
    s = initial_state(cfg)
    rng = np.random.default_rng(3)
    for a in rng.uniform(-0.2, 0.2, size=(50, 2)):
        s = plant_step(s, a, cfg)
        assert s.q_effective == s.q


def test_step_clamps_and_flags_saturation():
    cfg = PlantConfig()
    s = initial_state(cfg)
    s = plant_step(s, (0.5, 0.0), cfg)
    assert s.q[0] == pytest.approx(0.2) and s.saturated
    for _ in range(int(cfg.q_limit / 0.2) + 5):
        s = plant_step(s, (0.2, 0.0), cfg)
    assert s.q[0] == pytest.approx(cfg.q_limit) and s.saturated


def test_backlash_reversal_waits_for_deadband():
    cfg = PlantConfig(hysteresis_deadband=0.3)
    s = initial_state(cfg)
    for _ in range(10):
        s = plant_step(s, (0.1, 0.0), cfg)
    tip_before = s.tip
    # reverse by less than the deadband in small steps: nothing moves
    for _ in range(5):
        s = plant_step(s, (-0.05, 0.0), cfg)
        assert s.tip == tip_before
    s = plant_step(s, (-0.1, 0.0), cfg)
    assert s.tip[0] < tip_before[0]


def test_backlash_operator():
    assert backlash(0.0, 0.1, 0.3) == 0.0
    assert backlash(0.0, 0.2, 0.3) == pytest.approx(0.05)
    assert backlash(1.0, 0.9, 0.3) == 1.0
    assert backlash(1.0, 0.8, 0.3) == pytest.approx(0.95)


def test_payload_zero_mass():
    tip = forward_kinematics((3.0, 1.0), PlantConfig())
    assert payload_deflection(tip, 0.0, PlantConfig()).tolist() == [0.0, 0.0, 0.0]


def test_payload_at_horizontal_tip():
    cfg = PlantConfig(cable_pitch_radius=3.0, payload_compliance=8.0)
    tip = forward_kinematics((3 * math.pi / 2, 0.0), cfg)
    d = payload_deflection(tip, 30.0, cfg)
    # 8 mm/N * 0.03 kg * 9.80665 m/s^2 * sin(90 deg)
    assert np.linalg.norm(d) == pytest.approx(2.3535960, abs=1e-6)
    assert d[2] < 0 and d[0] > 0 and d[1] == pytest.approx(0.0, abs=1e-12)


def test_payload_vanishes_when_straight():
    cfg = PlantConfig()
    assert np.all(payload_deflection(forward_kinematics((0, 0), cfg), 30.0, cfg) == 0)


def test_payload_in_plant_step_and_reset():
    cfg = PlantConfig(payload_mass_g=30.0)
    s = plant_step(initial_state(cfg), (0.2, 0.0), cfg)
    nominal = forward_kinematics(s.q, cfg)
    assert np.allclose(np.subtract(s.tip, nominal), payload_deflection(nominal, 30.0, cfg))


def test_soft_obstacle_no_contact_above_surface():
    field = SoftObstacleField(amplitude=2.0, wavelength=10.0, clearance=5.0)
    tip = np.array([3.0, 4.0, 25.0])
    assert soft_obstacle_offset(tip, field).tolist() == [0.0, 0.0, 0.0]
    assert soft_obstacle_offset(tip, None).tolist() == [0.0, 0.0, 0.0]


def test_soft_obstacle_pushes_back_on_contact():
    cfg = PlantConfig()
    tip = forward_kinematics((6.0, 0.0), cfg)
    field = SoftObstacleField(amplitude=0.0, wavelength=10.0, clearance=tip[2] + 1.0, stiffness_gain=0.2)
    off = soft_obstacle_offset(tip, field)
    assert np.linalg.norm(off) == pytest.approx(0.2)
    assert off[0] < 0 and off[2] > 0


def test_collision_offset_arithmetic():
    sched = (CollisionEvent(10, 20, force=2.0, direction=(0.6, 0.8), contact_compliance=0.3),)
    assert collision_offset(9, sched).tolist() == [0.0, 0.0, 0.0]
    assert collision_offset(20, sched).tolist() == [0.0, 0.0, 0.0]
    off = collision_offset(10, sched)
    assert np.linalg.norm(off) == pytest.approx(0.6)
    assert off.tolist() == pytest.approx([0.36, 0.48, 0.0])


def test_collision_in_plant_step():
    cfg = PlantConfig(collision_schedule=(CollisionEvent(1, 3, 2.0, (1.0, 0.0), 0.3),))
    s0 = initial_state(cfg)
    s1 = plant_step(s0, (0.0, 0.0), cfg)
    assert s1.tip[0] - s0.tip[0] == pytest.approx(0.6)
    s3 = plant_step(plant_step(s1, (0, 0), cfg), (0, 0), cfg)
    assert s3.tip[0] == pytest.approx(0.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(segment_length=0.0),
        dict(cable_pitch_radius=-1.0),
        dict(max_bend_per_axis=2.0),
        dict(hysteresis_deadband=-0.1),
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        PlantConfig(**kwargs)


def test_invalid_events():
    with pytest.raises(ValueError):
        CollisionEvent(5, 5)
    with pytest.raises(ValueError):
        CollisionEvent(1, 5, direction=(1.0, 1.0))
    with pytest.raises(ValueError):
        SoftObstacleField(wavelength=0.0)


def test_plant_noise_needs_rng():
    p = Plant(PlantConfig(tip_noise_std=0.1))
    with pytest.raises(ValueError):
        p.measured_tip()
    p = Plant(PlantConfig(tip_noise_std=0.1), rng=np.random.default_rng(0))
    assert p.measured_tip()[2] == p.state.tip[2]

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keypose_diffusion.exceptions import ConfigError, DomainError, ValidationError
from keypose_diffusion.geometry import axis_angle_to_matrix, matrix_to_six_d, six_d_to_matrix
from keypose_diffusion.keypose import (CALVIN_RULES, GRIPPER, Action, RawTrajectory, extract_keyposes,
                                    interpolate_segment)

IDENTITY6 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def traj_from(pos, open_flags):
    pos = np.asarray(pos, dtype=float)
    n = len(pos)
    return RawTrajectory(np.arange(n) * 0.05, pos, np.tile(IDENTITY6, (n, 1)), np.asarray(open_flags, bool))


def segment(start, end, n):
    """``n`` evenly spaced positions after ``start`` ending exactly at ``end``."""
    s = np.arange(1, n + 1)[:, None] / n
    return start + s * (np.asarray(end) - start)


def two_phase():
    """move, pause, grasp, move, release-on-arrival, hold; returns trajectory and labelled keyposes."""
    p0, p1, p2 = np.zeros(3), np.array([0.5, 0.0, 0.0]), np.array([0.5, 0.4, 0.2])
    pos = [p0]
    pos += list(segment(p0, p1, 10))          # arrives at step 10
    pos += [p1] * 6                           # rest through step 16
    pos += list(segment(p1, p2, 8))           # leaves after step 16, arrives at step 24
    pos += [p2] * 5                           # rest through step 29
    n = len(pos)
    arrive1, arrive2 = 10, 24
    pause = arrive1 + 1                       # first step with zero central-difference speed
    grasp = pause + 3
    release = arrive2 + 1
    flags = np.ones(n, bool)
    flags[grasp:release] = False
    return traj_from(pos, flags), [pause, grasp, release, n - 1]


def test_two_phase_oracle():
    traj, labels = two_phase()
    assert extract_keyposes(traj) == labels


def test_single_toggle_constant_pose():
    n, k = 12, 5
    flags = np.ones(n, bool)
    flags[k:] = False
    assert extract_keyposes(traj_from(np.zeros((n, 3)), flags)) == [k, n - 1]


def test_stop_is_detected():
    pos = list(segment(np.zeros(3), np.array([0.0, 0.4, 0.0]), 8)) + [np.array([0.0, 0.4, 0.0])] * 6
    pos = [np.zeros(3)] + pos
    traj = traj_from(pos, np.ones(len(pos), bool))
    speed = np.linalg.norm(traj.velocity(), axis=1)
    m = int(np.flatnonzero(speed < 1e-2)[np.flatnonzero(speed < 1e-2) > 0][0])
    assert m in extract_keyposes(traj)
    assert extract_keyposes(traj) == [m, len(pos) - 1]


def test_min_gap_keeps_earliest():
    flags = np.array([1, 1, 0, 1, 1, 1, 1, 1], bool)
    assert extract_keyposes(traj_from(np.zeros((8, 3)), flags), min_gap=2) == [2, 7]
    assert extract_keyposes(traj_from(np.zeros((8, 3)), flags), min_gap=1) == [2, 3, 7]


def test_acceleration_rule_adds_motion_changes():
    traj, labels = two_phase()
    calvin = extract_keyposes(traj, rules=CALVIN_RULES)
    # deceleration fires just before each stop and the merge keeps the earlier hit
    for k in labels:
        assert any(0 <= k - c <= 2 for c in calvin)
    assert calvin[-1] == labels[-1]


@given(st.integers(2, 30), st.integers(0, 2**31 - 1))
def test_idempotent_on_keypose_only_trajectories(n, seed):
    # every step differs from its predecessor in gripper state, so every step after the first is a keypose
    r = np.random.default_rng(seed)
    flags = (np.arange(n) + r.integers(2)) % 2 == 0
    traj = traj_from(r.normal(size=(n, 3)), flags)
    once = extract_keyposes(traj, min_gap=1)
    assert once == list(range(1, n))
    sub = RawTrajectory(traj.timestamps[[0] + once], traj.pos[[0] + once], traj.rot[[0] + once],
                        traj.open[[0] + once])
    assert extract_keyposes(sub, min_gap=1) == list(range(1, len(once) + 1))


def _toggles(traj, idx):
    n = len(traj)
    if n - 1 in idx and traj.open[n - 1] == traj.open[n - 2]:
        idx = [i for i in idx if i != n - 1]
    return set(idx)


@given(st.lists(st.booleans(), min_size=2, max_size=40))
def test_gripper_rule_time_reversal(flags):
    traj = traj_from(np.zeros((len(flags), 3)), flags)
    n = len(traj)
    fwd = _toggles(traj, extract_keyposes(traj, min_gap=1, rules=(GRIPPER,)))
    rev = traj.reversed()
    bwd = _toggles(rev, extract_keyposes(rev, min_gap=1, rules=(GRIPPER,)))
    assert bwd == {n - i for i in fwd}


def test_errors():
    with pytest.raises(DomainError):
        RawTrajectory([0.0], np.zeros((1, 3)), np.tile(IDENTITY6, (1, 1)), [True])
    with pytest.raises(ValidationError):
        RawTrajectory([0.0, 0.0], np.zeros((2, 3)), np.tile(IDENTITY6, (2, 1)), [True, True])
    traj = traj_from(np.zeros((4, 3)), [1, 1, 1, 1])
    for bad in (dict(vel_eps=0.0), dict(min_gap=0), dict(acc_eps=-1.0), dict(rules=("bogus",))):
        with pytest.raises(ConfigError):
            extract_keyposes(traj, **bad)


def test_interpolate_single_step_is_end():
    a = Action(np.zeros(3), IDENTITY6, True)
    b = Action([1.0, 2.0, 3.0], matrix_to_six_d(axis_angle_to_matrix([0, 0, 1], 0.3)), False)
    (only,) = interpolate_segment(a, b, 1)
    np.testing.assert_array_equal(only.pos, b.pos)
    np.testing.assert_array_equal(only.rot, b.rot)
    assert only.open is False


def test_interpolate_linear_positions():
    a, b = Action(np.zeros(3), IDENTITY6, True), Action([0, 0, 3.0], IDENTITY6, True)
    assert [s.pos[2] for s in interpolate_segment(a, b, 3)] == [1.0, 2.0, 3.0]


def test_interpolate_geodesic_midpoint():
    c, s = np.cos(np.pi / 4), np.sin(np.pi / 4)
    rz45 = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    rz90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    a = Action(np.zeros(3), IDENTITY6, True)
    b = Action(np.zeros(3), matrix_to_six_d(rz90), False)
    mid, end = interpolate_segment(a, b, 2)
    np.testing.assert_allclose(six_d_to_matrix(mid.rot), rz45, atol=1e-12)
    assert mid.open is False and end.open is False
    np.testing.assert_array_equal(end.rot, b.rot)


@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_interpolated_endpoint_is_exact(n, seed):
    r = np.random.default_rng(seed)
    a = Action(r.normal(size=3), matrix_to_six_d(axis_angle_to_matrix(r.normal(size=3), r.uniform(0, 3))), True)
    b = Action(r.normal(size=3), matrix_to_six_d(axis_angle_to_matrix(r.normal(size=3), r.uniform(0, 3))), False)
    steps = interpolate_segment(a, b, n)
    assert len(steps) == n
    np.testing.assert_array_equal(steps[-1].pos, b.pos)
    np.testing.assert_array_equal(steps[-1].rot, b.rot)
    with pytest.raises(DomainError):
        interpolate_segment(a, b, 0)

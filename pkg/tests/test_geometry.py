import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualplan.errors import HorizonExceeded, InvalidGeometry
from dualplan.geometry import (
    Command,
    OrientedBox,
    Pose2,
    Trajectory,
    l2_at,
    resample,
    transform_trajectory,
    wrap_angle,
)

coord = st.floats(-100, 100, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
poses = st.builds(Pose2, coord, coord, angle)


def random_traj(rng, n=6, frame=Pose2()):
    return Trajectory(0.5, 0.5, rng.normal(scale=10, size=(n, 2)), frame)


@given(angle)
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_yaw_pi_stays_pi():
    assert Pose2(0, 0, math.pi).yaw == math.pi
    assert Pose2(0, 0, -math.pi).yaw == math.pi


@given(poses)
def test_pose_inverse_is_identity(p):
    ident = p.compose(p.inverse())
    assert abs(ident.x) < 1e-9 and abs(ident.y) < 1e-9 and abs(ident.yaw) < 1e-9


def test_non_finite_pose_rejected():
    with pytest.raises(InvalidGeometry):
        Pose2(float("nan"), 0, 0)


def test_trajectory_invariants():
    with pytest.raises(InvalidGeometry):
        Trajectory(0.0, 0.5, np.zeros((0, 2)))
    with pytest.raises(InvalidGeometry):
        Trajectory(0.0, 0.0, np.zeros((3, 2)))
    with pytest.raises(InvalidGeometry):
        Trajectory(0.0, 0.5, [[0, np.inf]])
    t = Trajectory(0.0, 0.5, [[1, 2]])
    with pytest.raises(ValueError):
        t.waypoints[0, 0] = 3.0


def test_transform_identity():
    rng = np.random.default_rng(0)
    t = random_traj(rng)
    p = Pose2(3, 4, 0.3)
    out = transform_trajectory(t, p, p)
    assert np.array_equal(out.waypoints, t.waypoints)


def test_transform_quarter_turn():
    t = Trajectory(0.0, 0.5, [[1.0, 0.0]])
    out = transform_trajectory(t, Pose2(), Pose2(0, 0, math.pi / 2))
    assert np.allclose(out.waypoints, [[0.0, -1.0]], atol=1e-9)


@settings(max_examples=50)
@given(poses, poses, st.integers(0, 2**31))
def test_transform_round_trip(a, b, seed):
    t = random_traj(np.random.default_rng(seed), frame=a)
    back = transform_trajectory(transform_trajectory(t, a, b), b, a)
    assert np.allclose(back.waypoints, t.waypoints, atol=1e-9)
    assert back.dt == t.dt and back.start_time == t.start_time


@settings(max_examples=50)
@given(poses, poses, poses, st.integers(0, 2**31))
def test_transform_composes(a, b, c, seed):
    t = random_traj(np.random.default_rng(seed), frame=a)
    two_step = transform_trajectory(transform_trajectory(t, a, b), b, c)
    direct = transform_trajectory(t, a, c)
    assert np.allclose(two_step.waypoints, direct.waypoints, atol=1e-9)


def test_transform_matches_world_oracle():
    # independent oracle: map to world by hand, then into the target frame
    rng = np.random.default_rng(5)
    a, b = Pose2(1, -2, 0.7), Pose2(-4, 3, -2.1)
    t = random_traj(rng, frame=a)
    world = []
    for x, y in t.waypoints:
        world.append((a.x + math.cos(a.yaw) * x - math.sin(a.yaw) * y, a.y + math.sin(a.yaw) * x + math.cos(a.yaw) * y))
    expect = []
    for wx, wy in world:
        dx, dy = wx - b.x, wy - b.y
        expect.append((math.cos(b.yaw) * dx + math.sin(b.yaw) * dy, -math.sin(b.yaw) * dx + math.cos(b.yaw) * dy))
    out = transform_trajectory(t, a, b)
    assert np.allclose(out.waypoints, expect, atol=1e-9)


def test_resample_identical_grid_is_exact():
    rng = np.random.default_rng(1)
    t = random_traj(rng, n=8)
    out = resample(t, t.start_time, t.dt, len(t))
    assert np.array_equal(out.waypoints, t.waypoints)
    again = resample(out, out.start_time, out.dt, len(out))
    assert again == out


def test_resample_straight_line_equally_spaced():
    t = Trajectory(0.0, 0.5, [[5.0 * 0.5 * i, 1.0 * 0.5 * i] for i in range(9)])
    out = resample(t, 0.3, 0.7, 5)
    d = np.diff(out.waypoints, axis=0)
    assert np.allclose(d, d[0], atol=1e-12)
    assert np.allclose(np.cross(np.c_[d, np.zeros(len(d))], [5, 1, 0])[:, 2], 0, atol=1e-12)


def test_resample_half_step_matches_chord_midpoints():
    # quadratic arc sampled at 0.5 s; half-step grid must land on chord midpoints
    ts = 0.5 * np.arange(1, 9)
    pts = np.c_[3.0 * ts, 0.4 * ts**2]
    t = Trajectory(0.5, 0.5, pts)
    out = resample(t, 0.75, 0.5, 7)
    oracle = []
    for k in range(7):
        tq = 0.75 + 0.5 * k
        lo = max(i for i in range(8) if ts[i] <= tq + 1e-12)
        hi = min(lo + 1, 7)
        f = (tq - ts[lo]) / 0.5
        oracle.append(pts[lo] * (1 - f) + pts[hi] * f)
    assert np.allclose(out.waypoints, oracle, atol=1e-12)
    assert np.allclose(out.waypoints, (pts[:-1] + pts[1:]) / 2, atol=1e-12)


def test_resample_outside_span():
    t = Trajectory(0.5, 0.5, np.zeros((8, 2)))
    with pytest.raises(HorizonExceeded):
        resample(t, 2.0, 0.5, 6)  # needs up to 4.5 s, span ends at 4.0
    with pytest.raises(HorizonExceeded):
        resample(t, 0.0, 0.5, 2)


def test_l2_cases():
    a = Trajectory(1.0, 0.5, [[3.0, 0.0]])
    b = Trajectory(1.0, 0.5, [[0.0, 4.0]])
    assert l2_at(a, b, 1.0) == 5.0
    assert l2_at(a, a, 1.0) == 0.0
    with pytest.raises(HorizonExceeded):
        l2_at(a, b, 1.5)


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.integers(0, 5))
def test_l2_random_matches_hand_formula(seed, idx):
    rng = np.random.default_rng(seed)
    a, b = random_traj(rng), random_traj(rng)
    t = 0.5 + 0.5 * idx
    (x1, y1), (x2, y2) = a.waypoints[idx], b.waypoints[idx]
    expect = ((x1 - x2) ** 2 + (y1 - y2) ** 2) ** 0.5
    assert math.isclose(l2_at(a, b, t), expect, rel_tol=1e-12)
    assert l2_at(a, b, t) == l2_at(b, a, t) >= 0


@given(poses, st.floats(0.1, 10), st.floats(0.1, 10))
def test_box_corners_reconstruct(center, length, width):
    box = OrientedBox(center, length, width)
    c = box.corners()
    assert np.allclose(c.mean(axis=0), [center.x, center.y], atol=1e-9)
    assert math.isclose(np.linalg.norm(c[0] - c[1]), length, abs_tol=1e-9)
    assert math.isclose(np.linalg.norm(c[1] - c[2]), width, abs_tol=1e-9)


def test_command_parse():
    assert Command.parse("LeftTurn") is Command.LEFT
    assert Command.parse(2) is Command.RIGHT
    from dualplan.errors import InvalidCommand

    with pytest.raises(InvalidCommand):
        Command.parse("Reverse")

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualplan.errors import DataError
from dualplan.evaluation import (
    EGO_LENGTH,
    EGO_WIDTH,
    FrameResult,
    aggregate,
    collision_at,
    corners_batch,
    evaluate,
    frame_result,
    read_frame_results,
    sat_margin,
    write_frame_results,
)
from dualplan.geometry import OrientedBox, Pose2, Trajectory


def _box_points(cx, cy, yaw, length, width, n_perimeter=5000, n_interior=4996, rng=None):
    """Corners, evenly spaced perimeter points and random interior points (world frame)."""
    u = np.linspace(0.0, 2 * (length + width), n_perimeter, endpoint=False)
    local = []
    for s in u:
        if s < length:
            local.append((-length / 2 + s, -width / 2))
        elif s < length + width:
            local.append((length / 2, -width / 2 + (s - length)))
        elif s < 2 * length + width:
            local.append((length / 2 - (s - length - width), width / 2))
        else:
            local.append((-length / 2, width / 2 - (s - 2 * length - width)))
    local += [(length / 2, width / 2), (-length / 2, width / 2), (-length / 2, -width / 2), (length / 2, -width / 2)]
    local = np.array(local)
    inner = (rng.random((n_interior, 2)) - 0.5) * [length, width]
    local = np.vstack([local, inner])
    c, s = math.cos(yaw), math.sin(yaw)
    return local @ np.array([[c, s], [-s, c]]) + [cx, cy]


def _inside(points, cx, cy, yaw, length, width):
    d = points - [cx, cy]
    c, s = math.cos(yaw), math.sin(yaw)
    lx = d[:, 0] * c + d[:, 1] * s
    ly = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(lx) <= length / 2) & (np.abs(ly) <= width / 2)


def test_sat_agrees_with_containment_oracle():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 1000:
        a = (*rng.uniform(-3, 3, 2), rng.uniform(-math.pi, math.pi), *rng.uniform(0.5, 5.0, 2))
        b = (*rng.uniform(-3, 3, 2), rng.uniform(-math.pi, math.pi), *rng.uniform(0.5, 5.0, 2))
        ca = corners_batch(np.array(a[:2]), a[2], a[3], a[4])[0]
        cb = corners_batch(np.array(b[:2]), b[2], b[3], b[4])[0]
        m = float(sat_margin(ca, cb))
        if abs(m) < 1e-3:
            continue
        oracle = _inside(_box_points(*a, rng=rng), *b).any() or _inside(_box_points(*b, rng=rng), *a).any()
        assert (m <= 0) == oracle, (a, b, m)
        checked += 1


def test_sat_separated_and_touching():
    a = OrientedBox(Pose2(0, 0, 0), 2.0, 2.0).corners()
    far = OrientedBox(Pose2(2.5, 0, 0), 2.0, 2.0).corners()
    touch = OrientedBox(Pose2(2.0, 0, 0), 2.0, 2.0).corners()
    assert math.isclose(float(sat_margin(a, far)), 0.5, abs_tol=1e-12)
    assert float(sat_margin(a, touch)) <= 1e-12


def test_no_agents_means_no_collision():
    plan = Trajectory(0.5, 0.5, np.c_[np.arange(1, 7) * 2.0, np.zeros(6)])
    assert not collision_at(plan, (EGO_LENGTH, EGO_WIDTH), [[] for _ in range(6)], 3.0)


def test_identical_box_at_1_5s_collides_from_there_on():
    wp = np.c_[np.arange(1, 7) * 2.0, np.zeros(6)]
    plan = Trajectory(0.5, 0.5, wp)
    agents = [[] for _ in range(6)]
    agents[2] = [OrientedBox(Pose2(wp[2, 0], 0.0, 0.0), EGO_LENGTH, EGO_WIDTH)]
    dims = (EGO_LENGTH, EGO_WIDTH)
    assert not collision_at(plan, dims, agents, 1.0)
    assert collision_at(plan, dims, agents, 2.0)
    assert collision_at(plan, dims, agents, 3.0)


def test_identical_box_at_first_waypoint():
    wp = np.c_[np.arange(1, 7) * 2.0, np.zeros(6)]
    plan = Trajectory(0.5, 0.5, wp)
    agents = [[] for _ in range(6)]
    agents[0] = [OrientedBox(Pose2(wp[0, 0], 0.0, 0.0), EGO_LENGTH, EGO_WIDTH)]
    for h in (0.5, 1.0, 2.0, 3.0):
        assert collision_at(plan, (EGO_LENGTH, EGO_WIDTH), agents, h)


def test_constant_offset_gives_unit_l2_and_missing_agents_raise():
    gt = np.c_[np.arange(1, 7) * 1.5, np.zeros(6)]
    empty = [np.zeros((0, 4, 2))] * 6
    r = frame_result(gt + [0.0, 1.0], gt, empty)
    assert (r.l2_1s, r.l2_2s, r.l2_3s) == (1.0, 1.0, 1.0)
    assert not r.collided_3s
    with pytest.raises(DataError):
        frame_result(gt, gt, empty[:3])


def test_monotone_flags_enforced():
    with pytest.raises(DataError):
        FrameResult("s", 0, "E2E", 0, 0, 0, True, False, True)


def _random_results(rng, n):
    out = []
    for i in range(n):
        flags = sorted(rng.random(3) < 0.3)
        out.append(
            FrameResult(f"s{i % 7}", i, ["E2E", "E2E-Async", "VLM"][i % 3], *rng.random(3) * 3, *map(bool, flags))
        )
    return out


def test_aggregate_matches_recomputation_from_disk(tmp_path):
    rng = np.random.default_rng(0)
    results = _random_results(rng, 60)
    path = tmp_path / "frames.jsonl"
    write_frame_results(path, results)
    back = read_frame_results(path)
    assert back == results
    report = aggregate(back)
    for prov in ("E2E", "E2E-Async", "VLM"):
        rs = [r for r in results if r.provenance == prov]
        l2 = [np.mean([getattr(r, f"l2_{h}s") for r in rs]) for h in (1, 2, 3)]
        col = [100 * np.mean([getattr(r, f"collided_{h}s") for r in rs]) for h in (1, 2, 3)]
        row = report.rows[prov]
        assert np.allclose([row["l2_1s"], row["l2_2s"], row["l2_3s"], row["l2_avg"]], l2 + [np.mean(l2)], atol=1e-9)
        assert np.allclose([row["col_1s"], row["col_2s"], row["col_3s"], row["col_avg"]], col + [np.mean(col)], atol=1e-9)
    assert report.frame_count == 60 and report.scenario_count == 7


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_evaluate_is_pure_and_order_independent(seed):
    rng = np.random.default_rng(seed)
    gt_map, traces = {}, []
    for i in range(8):
        gt = np.cumsum(rng.normal(1.0, 0.3, size=(6, 2)), axis=0)
        boxes = [corners_batch(rng.uniform(-10, 10, (2, 2)), rng.uniform(-3, 3, 2), 4.5, 1.9) for _ in range(6)]
        gt_map[("s", i)] = (gt, boxes)
        traces.append({"scenario_id": "s", "tick": i, "plan": (gt + rng.normal(size=gt.shape)).tolist()})
    r1, f1 = evaluate(traces, gt_map)
    r2, _ = evaluate(list(reversed(traces)), gt_map)
    r3, f3 = evaluate(traces, gt_map)
    assert f1 == f3
    assert r1.to_csv() == r3.to_csv()
    for k, v in r1.rows["E2E"].items():
        assert math.isclose(v, r2.rows["E2E"][k], rel_tol=1e-12)


def test_evaluate_missing_ground_truth():
    with pytest.raises(DataError):
        evaluate([{"scenario_id": "x", "tick": 0, "plan": [[0, 0]] * 6}], {})

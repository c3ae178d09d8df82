import dataclasses
import math

import numpy as np
import pytest

from dualplan.errors import ConfigError, FormatError, OutOfRange
from dualplan.evaluation import EGO_LENGTH, EGO_WIDTH, corners_batch, sat_overlap
from dualplan.geometry import Command
from dualplan.scenario import (
    GridConfig,
    ScenarioConfig,
    build_dataset,
    generate,
    generate_one,
    label_commands,
    load_dataset,
    render_features,
    save_dataset,
)

CFG = ScenarioConfig()


@pytest.fixture(scope="module")
def corpus():
    return generate(CFG, 11, 60)


def _without_agents(s):
    return dataclasses.replace(
        s, agent_class=np.zeros(0, np.int64), agent_dims=np.zeros((0, 2)), agent_states=np.zeros((0, s.n_ticks, 5))
    )


def test_generation_is_deterministic(tmp_path):
    a = build_dataset(CFG, 3, 6, 2, 2)
    b = build_dataset(CFG, 3, 6, 2, 2)
    assert save_dataset(tmp_path / "a.jsonl", a) == save_dataset(tmp_path / "b.jsonl", b)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert not set(a.split.train) & set(a.split.test)


def test_cruise_is_straight_and_forward():
    for i in range(5):
        s = generate_one("c", "cruise", np.random.default_rng(i), CFG)
        assert np.allclose(s.ego[:, 2], s.ego[0, 2], atol=1e-12)
        assert all(s.command(t) is Command.FORWARD for t in range(s.n_ticks))


@pytest.mark.parametrize("seed", range(8))
def test_turn_commands_match_turn_direction(seed):
    s = generate_one("t", "turn", np.random.default_rng(seed), CFG)
    total = np.unwrap(s.ego[:, 2])[-1] - s.ego[0, 2]
    labels = {s.command(t) for t in range(s.n_ticks)}
    if abs(total) > 0.5:
        expected = Command.LEFT if total > 0 else Command.RIGHT
        other = Command.RIGHT if total > 0 else Command.LEFT
        assert expected in labels and other not in labels


def test_command_labelling_thresholds():
    yaw = np.zeros(10)
    yaw[6:] = 0.25  # +0.25 rad within 3 s of ticks 0..5
    labels = label_commands(yaw, 0.5, 3.0, 0.2)
    assert labels[0] == Command.LEFT.index and labels[6] == Command.FORWARD.index
    labels = label_commands(-yaw, 0.5, 3.0, 0.2)
    assert labels[0] == Command.RIGHT.index
    labels = label_commands(yaw * 0.7, 0.5, 3.0, 0.2)  # 0.175 rad: below threshold
    assert (labels == Command.FORWARD.index).all()


def test_kinematic_bounds_and_collision_free(corpus):
    for s in corpus:
        assert np.abs(s.ego[:, 4]).max() <= 4.0
        assert np.abs(s.ego[:, 5]).max() <= 0.6
        ego = corners_batch(s.ego[:, :2], s.ego[:, 2], EGO_LENGTH, EGO_WIDTH)
        for a in range(len(s.agent_states)):
            st = s.agent_states[a]
            ac = corners_batch(st[:, :2], st[:, 2], *s.agent_dims[a])
            assert not sat_overlap(ego, ac).any()


def test_command_mix_is_mostly_forward():
    scen = generate(CFG, 5, 150)
    labels = np.concatenate([s.commands[list(CFG.planning_ticks())] for s in scen])
    frac = np.bincount(labels, minlength=3) / len(labels)
    assert 0.55 <= frac[0] <= 0.85 and frac[1] > 0.07 and frac[2] > 0.07


def test_empty_scene_has_no_agent_mass(corpus):
    f = render_features(_without_agents(corpus[0]), 4)
    assert not f.grid[:, 4:7].any()


def test_grid_shape_and_range(corpus):
    grid = GridConfig(views=2, height=8, width=6)
    f = render_features(corpus[0], 5, grid)
    assert f.grid.shape == (2, grid.channels, 8, 6)
    assert f.tokens().shape == (2 * 8 * 6, grid.channels)
    assert np.isfinite(f.grid).all()
    with pytest.raises(OutOfRange):
        render_features(corpus[0], corpus[0].n_ticks)


@pytest.mark.parametrize("yaw", [0.0, 0.4, 1.3, -2.2])
def test_agent_occupancy_mass_matches_box_area(corpus, yaw):
    # 1 m cells, 8x8 supersampling; error bounded by a band one sub-cell wide around the box edge
    grid = GridConfig(height=64, width=64, x_min=-8.0, x_max=56.0, y_half=32.0, supersample=8)
    base = _without_agents(corpus[0])
    pose = base.pose(4)
    centre = pose.to_world(np.array([[14.3, -3.7]]))[0]
    states = np.zeros((1, base.n_ticks, 5))
    states[0, :, :2] = centre
    states[0, :, 2] = pose.yaw + yaw
    s = dataclasses.replace(
        base, agent_class=np.zeros(1, np.int64), agent_dims=np.array([[4.5, 1.9]]), agent_states=states
    )
    mass = render_features(s, 4, grid).grid[0, 4].sum() * grid.cell_area
    band = 2 * (4.5 + 1.9) * (grid.cell_x / grid.supersample)
    assert abs(mass - 4.5 * 1.9) <= band


def test_future_and_history_frames(corpus):
    s = corpus[0]
    fut = s.future(4, 8)
    assert len(fut) == 8 and fut.start_time == 2.5
    status = s.ego_status(4)
    assert len(status.history) == 4 and status.history.start_time == 0.0
    with pytest.raises(OutOfRange):
        s.future(15, 8)
    with pytest.raises(OutOfRange):
        s.ego_status(2)


def test_dataset_round_trip(tmp_path):
    ds = build_dataset(CFG, 9, 80, 10, 10)
    p = tmp_path / "d.jsonl"
    save_dataset(p, ds)
    back = load_dataset(p)
    assert back.split == ds.split and back.config == ds.config
    for sid, s in ds.scenarios.items():
        assert back.scenarios[sid] == s
        assert np.array_equal(back.scenarios[sid].ego, s.ego)
    assert save_dataset(tmp_path / "again.jsonl", back) == save_dataset(p, ds)


def test_corrupt_datasets(tmp_path):
    ds = build_dataset(CFG, 1, 3, 1, 1)
    p = tmp_path / "d.jsonl"
    save_dataset(p, ds)
    raw = p.read_text()
    (tmp_path / "trunc.jsonl").write_text(raw[: len(raw) // 2])
    with pytest.raises(FormatError, match="line"):
        load_dataset(tmp_path / "trunc.jsonl")
    lines = raw.split("\n")
    lines[2] = lines[2][:40]
    (tmp_path / "bad.jsonl").write_text("\n".join(lines))
    with pytest.raises(FormatError, match="line 3"):
        load_dataset(tmp_path / "bad.jsonl")
    (tmp_path / "v.jsonl").write_text(raw.replace('"format_version": 1', '"format_version": 7', 1))
    with pytest.raises(FormatError, match="format_version 7, expected 1"):
        load_dataset(tmp_path / "v.jsonl")


def test_infeasible_config():
    with pytest.raises(ConfigError):
        generate(ScenarioConfig(duration=3.0), 0, 1)
    with pytest.raises(ConfigError):
        generate(ScenarioConfig(archetype_weights=(0, 0, 0, 0, 0, 0)), 0, 1)

"""Synthetic driving scenarios.

A scenario is a 2D top-down world sampled every 0.5 s: the expert ego path,
agent tracks (vehicles and pedestrians), lane centrelines, a per-tick
navigation command and scene-level tags (weather, time of day). Archetypes:
straight cruise, curved lane following, junction turns, lead-vehicle braking,
crossing pedestrian and standstill. Expert motion is simulated at 20 Hz and
rejection-sampled until it is collision-free and within the kinematic bounds.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, FormatError, OutOfRange
from .evaluation import EGO_LENGTH, EGO_WIDTH, corners_batch, sat_overlap
from .geometry import COMMANDS, Command, EgoStatus, Pose2, Trajectory, wrap_angles

DATASET_FORMAT_VERSION = 1
ARCHETYPES = ("cruise", "curve", "turn", "lead_brake", "pedestrian", "standstill")
WEATHERS = ("clear", "rain", "fog")
TIMES_OF_DAY = ("day", "night")
AGENT_CLASSES = ("vehicle", "pedestrian")
VEHICLE_DIMS = (4.5, 1.9)
PEDESTRIAN_DIMS = (0.8, 0.8)
LANE_OFFSET = 3.5
MAX_ACCEL = 4.0
MAX_YAW_RATE = 0.6
CHANNELS = ("drivable", "lane", "lane_cos", "lane_sin", "agent_occ", "agent_vx", "agent_vy", "rain", "fog", "night")


@dataclass(frozen=True)
class GridConfig:
    views: int = 1
    height: int = 16
    width: int = 16
    x_min: float = -8.0
    x_max: float = 56.0
    y_half: float = 32.0
    supersample: int = 4

    @property
    def channels(self) -> int:
        return len(CHANNELS)

    @property
    def cell_x(self) -> float:
        return (self.x_max - self.x_min) / self.height

    @property
    def cell_y(self) -> float:
        return 2.0 * self.y_half / (self.width * self.views)

    @property
    def cell_area(self) -> float:
        return self.cell_x * self.cell_y


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float = 10.0
    tick: float = 0.5
    history: int = 4
    horizon_long: int = 8
    horizon_short: int = 6
    archetype_weights: tuple = (0.26, 0.2, 0.2, 0.14, 0.12, 0.08)
    command_threshold: float = 0.2
    grid: GridConfig = field(default_factory=GridConfig)

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.tick)) + 1

    def planning_ticks(self, horizon: int | None = None) -> range:
        """Ticks with full history and ``horizon`` future waypoints."""
        h = self.horizon_long if horizon is None else horizon
        return range(self.history, self.n_ticks - h)

    def validate(self) -> None:
        if self.tick != 0.5:
            raise ConfigError("the planner grid is fixed at 0.5 s")
        if len(self.archetype_weights) != len(ARCHETYPES) or min(self.archetype_weights) < 0:
            raise ConfigError(f"archetype_weights needs {len(ARCHETYPES)} non-negative entries")
        if sum(self.archetype_weights) <= 0:
            raise ConfigError("archetype_weights sum to zero")
        if self.n_ticks <= self.history + self.horizon_long:
            raise ConfigError(f"duration {self.duration}s too short for history+horizon")
        if self.horizon_long < self.horizon_short:
            raise ConfigError("long horizon shorter than the fast-planner horizon")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["archetype_weights"] = list(self.archetype_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        grid = GridConfig(**d.pop("grid", {}))
        if "archetype_weights" in d:
            d["archetype_weights"] = tuple(d["archetype_weights"])
        return cls(grid=grid, **d)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# paths


class Path2:
    """Polyline parameterised by arc length."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        keep = np.concatenate([[True], seg > 1e-9])
        self.points = pts[keep]
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        d = np.diff(self.points, axis=0)
        self.seg_heading = np.arctan2(d[:, 1], d[:, 0])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def point(self, s):
        s = np.clip(s, 0.0, self.s[-1])
        return np.stack([np.interp(s, self.s, self.points[:, 0]), np.interp(s, self.s, self.points[:, 1])], -1)

    def heading(self, s):
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.s[-1])
        i = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.seg_heading) - 1)
        # smooth the heading by interpolating between neighbouring segment headings
        h = np.unwrap(self.seg_heading)
        mid = (self.s[:-1] + self.s[1:]) / 2.0
        return wrap_angles(np.interp(s, mid, h)) if len(mid) > 1 else self.seg_heading[i]

    def offset(self, lateral: float) -> "Path2":
        h = self.heading(self.s)
        n = np.stack([-np.sin(h), np.cos(h)], -1)
        return Path2(self.points + lateral * n)

    def resampled(self, step: float = 1.0) -> np.ndarray:
        return self.point(np.arange(0.0, self.length + 1e-9, step))


def _straight(x0, x1, y=0.0, step=1.0):
    xs = np.arange(x0, x1 + 1e-9, step)
    return np.stack([xs, np.full_like(xs, y)], -1)


def _arc_path(start_xy, start_heading, curvature, length, step=0.5):
    n = max(int(length / step), 1)
    s = np.linspace(0.0, length, n + 1)
    if abs(curvature) < 1e-9:
        h = np.full_like(s, start_heading)
        x = start_xy[0] + s * math.cos(start_heading)
        y = start_xy[1] + s * math.sin(start_heading)
    else:
        h = start_heading + curvature * s
        x = start_xy[0] + (np.sin(h) - math.sin(start_heading)) / curvature
        y = start_xy[1] - (np.cos(h) - math.cos(start_heading)) / curvature
    return np.stack([x, y], -1), h[-1]


def _compose_path(pieces) -> np.ndarray:
    """Chain (curvature, length) pieces starting at (-60, 0) heading +x."""
    pts = [np.array([[-60.0, 0.0]])]
    xy, h = np.array([-60.0, 0.0]), 0.0
    for k, length in pieces:
        seg, h = _arc_path(xy, h, k, length)
        pts.append(seg[1:])
        xy = seg[-1]
    return np.concatenate(pts)


# ---------------------------------------------------------------------------
# scenario container


@dataclass(eq=False)
class Scenario:
    scenario_id: str
    archetype: str
    weather: str
    time_of_day: str
    tick: float
    ego: np.ndarray  # (T, 6): x, y, yaw, speed, accel, yaw_rate (world)
    agent_class: np.ndarray  # (A,) int
    agent_dims: np.ndarray  # (A, 2) length, width
    agent_states: np.ndarray  # (A, T, 5): x, y, yaw, vx, vy (world)
    lanes: list  # list of (P, 2) world polylines
    commands: np.ndarray  # (T,) int command index

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.to_json() == other.to_json()

    @property
    def n_ticks(self) -> int:
        return len(self.ego)

    @property
    def duration(self) -> float:
        return (self.n_ticks - 1) * self.tick

    def time(self, t: int) -> float:
        return t * self.tick

    def _check_tick(self, t: int) -> None:
        if not 0 <= t < self.n_ticks:
            raise OutOfRange(f"tick {t} outside scenario {self.scenario_id} (0..{self.n_ticks - 1})")

    def pose(self, t: int) -> Pose2:
        self._check_tick(t)
        x, y, yaw = self.ego[t, :3]
        return Pose2(x, y, yaw)

    def command(self, t: int) -> Command:
        return COMMANDS[int(self.commands[t])]

    def future(self, t: int, n: int) -> Trajectory:
        """Expert waypoints at ticks t+1..t+n in the ego frame at ``t``."""
        self._check_tick(t)
        if t + n >= self.n_ticks:
            raise OutOfRange(f"future of {n} steps from tick {t} exceeds scenario length")
        pose = self.pose(t)
        pts = pose.from_world(self.ego[t + 1 : t + n + 1, :2])
        return Trajectory(self.time(t + 1), self.tick, pts, pose)

    def ego_status(self, t: int, history: int = 4) -> EgoStatus:
        self._check_tick(t)
        if t < history:
            raise OutOfRange(f"tick {t} has fewer than {history} history steps")
        pose = self.pose(t)
        hist = Trajectory(self.time(t - history), self.tick, pose.from_world(self.ego[t - history : t, :2]), pose)
        speed, accel, yaw_rate = self.ego[t, 3:6]
        return EgoStatus(float(max(speed, 0.0)), float(accel), float(yaw_rate), self.command(t), hist)

    def agent_corners(self, t: int, frame: Pose2 | None = None) -> np.ndarray:
        """(A, 4, 2) agent box corners at tick ``t``, optionally in ``frame``."""
        self._check_tick(t)
        if len(self.agent_states) == 0:
            return np.zeros((0, 4, 2))
        st = self.agent_states[:, t]
        c = corners_batch(st[:, :2], st[:, 2], self.agent_dims[:, 0], self.agent_dims[:, 1])
        if frame is not None:
            c = frame.from_world(c.reshape(-1, 2)).reshape(-1, 4, 2)
        return c

    def future_agent_corners(self, t: int, n: int) -> list:
        pose = self.pose(t)
        return [self.agent_corners(t + i, pose) for i in range(1, n + 1)]

    def to_json(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "archetype": self.archetype,
            "weather": self.weather,
            "time_of_day": self.time_of_day,
            "tick": self.tick,
            "ego": self.ego.tolist(),
            "agent_class": self.agent_class.tolist(),
            "agent_dims": self.agent_dims.tolist(),
            "agent_states": self.agent_states.tolist(),
            "lanes": [lane.tolist() for lane in self.lanes],
            "commands": self.commands.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        n_t = len(d["ego"])
        states = np.array(d["agent_states"], dtype=np.float64).reshape(-1, n_t, 5)
        return cls(
            scenario_id=d["scenario_id"],
            archetype=d["archetype"],
            weather=d["weather"],
            time_of_day=d["time_of_day"],
            tick=float(d["tick"]),
            ego=np.array(d["ego"], dtype=np.float64).reshape(n_t, 6),
            agent_class=np.array(d["agent_class"], dtype=np.int64).reshape(-1),
            agent_dims=np.array(d["agent_dims"], dtype=np.float64).reshape(-1, 2),
            agent_states=states,
            lanes=[np.array(lane, dtype=np.float64).reshape(-1, 2) for lane in d["lanes"]],
            commands=np.array(d["commands"], dtype=np.int64),
        )

    @cached_property
    def _lane_points(self):
        pts, tang = [], []
        for lane in self.lanes:
            p = Path2(lane)
            s = np.arange(0.0, p.length + 1e-9, 0.5)
            pts.append(p.point(s))
            h = p.heading(s)
            tang.append(np.stack([np.cos(h), np.sin(h)], -1))
        if not pts:
            return np.zeros((0, 2)), np.zeros((0, 2)), None
        pts, tang = np.concatenate(pts), np.concatenate(tang)
        return pts, tang, cKDTree(pts)


# ---------------------------------------------------------------------------
# labelling


def label_commands(yaw: np.ndarray, tick: float = 0.5, window: float = 3.0, threshold: float = 0.2) -> np.ndarray:
    """Command per tick from the net yaw change over the next ``window`` seconds."""
    n = len(yaw)
    k = int(round(window / tick))
    unwrapped = np.unwrap(yaw)
    out = np.zeros(n, dtype=np.int64)
    for t in range(n):
        change = unwrapped[min(t + k, n - 1)] - unwrapped[t]
        if change > threshold:
            out[t] = Command.LEFT.index
        elif change < -threshold:
            out[t] = Command.RIGHT.index
        else:
            out[t] = Command.FORWARD.index
    return out


# ---------------------------------------------------------------------------
# generation


def _idm_accel(v, v0, gap, dv, headway, a_max=2.0, b=3.0, s0=4.0):
    s_star = s0 + max(0.0, v * headway + v * dv / (2.0 * math.sqrt(a_max * b)))
    free = 1.0 - (v / max(v0, 0.1)) ** 4
    inter = (s_star / max(gap, 0.1)) ** 2 if gap < 1e8 else 0.0
    return a_max * (free - inter)


def _simulate(archetype: str, rng: np.random.Generator, weather: str, time_of_day: str, n_ticks: int, tick: float):
    """One rollout. Returns (ego (T,6), agents list, lanes) or None on infeasible draw."""
    sim_dt = 0.05
    sub = int(round(tick / sim_dt))
    steps = (n_ticks - 1) * sub
    speed_factor = {"clear": 1.0, "rain": 0.85, "fog": 0.8}[weather] * (0.92 if time_of_day == "night" else 1.0)
    headway = {"clear": 1.3, "rain": 1.9, "fog": 1.7}[weather]

    v0 = float(rng.uniform(4.0, 14.0))
    pieces = [(0.0, 400.0)]
    extra_lanes = []
    lead = ped = None
    turn = None
    if archetype == "curve":
        k = float(rng.uniform(0.01, 0.04)) * rng.choice([-1, 1])
        d0 = float(rng.uniform(-20.0, 60.0))
        arc_len = min(220.0, 1.4 / abs(k))
        pieces = [(0.0, 60.0 + max(d0, 0.0)), (k, arc_len), (0.0, 300.0)]
        # negative d0: the scenario starts -d0 metres into the arc
        start_s = 60.0 - min(d0, 0.0)
        v0 = min(v0, math.sqrt(2.0 / abs(k)), MAX_YAW_RATE * 0.85 / abs(k))
    elif archetype == "turn":
        radius = float(rng.uniform(9.0, 16.0))
        sign = float(rng.choice([-1, 1]))
        dj = float(rng.uniform(10.0, 45.0))
        pieces = [(0.0, 60.0 + dj), (sign / radius, radius * math.pi / 2), (0.0, 300.0)]
        v_turn = min(v0, 0.5 * radius * MAX_YAW_RATE * 1.4, 6.5)
        turn = (60.0 + dj, 60.0 + dj + radius * math.pi / 2, v_turn)
        # alternative branches at the junction
        extra_lanes.append(_compose_path([(0.0, 60.0 + dj), (0.0, 120.0)]))
        extra_lanes.append(_compose_path([(0.0, 60.0 + dj), (-sign / radius, radius * math.pi / 2), (0.0, 80.0)]))
        start_s = 60.0
    else:
        start_s = 60.0

    path = Path2(_compose_path(pieces))
    v0 *= speed_factor if archetype not in ("cruise", "curve") else 1.0

    if archetype == "lead_brake":
        gap0 = float(rng.uniform(max(8.0, v0 * headway), 30.0))
        lead = {
            "s": start_s + gap0 + VEHICLE_DIMS[0],
            "v": v0 * float(rng.uniform(0.9, 1.05)),
            "t_brake": float(rng.uniform(0.5, 6.0)),
            "decel": float(rng.uniform(1.5, 3.5)),
            "v_end": float(rng.choice([0.0, rng.uniform(0.0, 0.6 * v0)])),
        }
    if archetype == "pedestrian":
        side = float(rng.choice([-1, 1]))
        ped = {
            "s": start_s + float(rng.uniform(25.0, 55.0)),
            "lat": side * float(rng.uniform(5.0, 9.0)),
            "v": float(rng.uniform(0.9, 1.6)),
            "dir": -side,
            "t0": float(rng.uniform(0.0, 3.0)),
        }
    if archetype == "standstill":
        v0 = 0.0

    ego_s, ego_v = start_s, (0.0 if archetype == "standstill" else v0)
    if archetype == "lead_brake":
        ego_v = lead["v"]
    ego_rec = []
    lead_rec, ped_rec = [], []
    for step in range(steps + 1):
        t = step * sim_dt
        # agent kinematics
        if lead is not None:
            if t >= lead["t_brake"]:
                lead["v"] = max(lead["v_end"], lead["v"] - lead["decel"] * sim_dt) if lead["v"] > lead["v_end"] else lead["v"]
            lead_rec.append((lead["s"], lead["v"]))
        if ped is not None:
            lat = ped["lat"] + ped["dir"] * ped["v"] * max(0.0, t - ped["t0"])
            ped_rec.append(lat)
        # ego control
        if archetype == "standstill":
            a = 0.0
        elif archetype == "lead_brake":
            gap = lead["s"] - ego_s - VEHICLE_DIMS[0] / 2 - EGO_LENGTH / 2
            a = _idm_accel(ego_v, v0 * 1.05, gap, ego_v - lead["v"], headway)
        elif archetype == "pedestrian":
            lat = ped_rec[-1]
            in_conflict = abs(lat) < 3.2 or (abs(lat) < 6.0 and np.sign(lat) != np.sign(ped["dir"]))
            gap = ped["s"] - 3.0 - ego_s - EGO_LENGTH / 2 if in_conflict and ego_s < ped["s"] - 1.0 else 1e9
            a = _idm_accel(ego_v, v0, gap, ego_v, headway, s0=2.0)
        elif archetype == "turn":
            s_in, s_out, v_turn = turn
            if ego_s < s_in:
                brake_dist = (ego_v ** 2 - v_turn ** 2) / (2.0 * 2.2)
                a = -2.2 if (s_in - ego_s) <= brake_dist + 1.0 and ego_v > v_turn else min(1.0, (v0 - ego_v) * 0.8)
            elif ego_s <= s_out:
                a = float(np.clip((v_turn - ego_v) * 2.0, -2.5, 0.5))
            else:
                a = min(1.5, (v0 - ego_v) * 0.8)
        else:
            a = 0.0
        a = float(np.clip(a, -MAX_ACCEL + 0.2, 2.5))
        if ego_v <= 0.0 and a < 0:
            a = 0.0
        ego_rec.append((ego_s, ego_v, a))
        ego_v_next = max(0.0, ego_v + a * sim_dt)
        ego_s += 0.5 * (ego_v + ego_v_next) * sim_dt
        ego_v = ego_v_next
        if lead is not None:
            lead["s"] += lead["v"] * sim_dt

    rec = np.array(ego_rec)
    idx = np.arange(0, steps + 1, sub)
    s, v, acc = rec[idx, 0], rec[idx, 1], rec[idx, 2]
    xy = path.point(s)
    yaw = path.heading(s)
    # yaw rate from the fine-grained heading
    fine_yaw = np.unwrap(path.heading(rec[:, 0]))
    yaw_rate_fine = np.gradient(fine_yaw, sim_dt)
    yaw_rate = yaw_rate_fine[idx]
    ego = np.column_stack([xy, yaw, v, acc, yaw_rate])

    agents = []
    if lead is not None:
        lr = np.array(lead_rec)[idx]
        lxy = path.point(lr[:, 0])
        lyaw = path.heading(lr[:, 0])
        agents.append((0, VEHICLE_DIMS, np.column_stack([lxy, lyaw, lr[:, 1] * np.cos(lyaw), lr[:, 1] * np.sin(lyaw)])))
    if ped is not None:
        lats = np.array(ped_rec)[idx]
        base = path.point(np.full(len(idx), ped["s"]))
        h = float(path.heading(ped["s"]))
        nrm = np.array([-math.sin(h), math.cos(h)])
        pxy = base + lats[:, None] * nrm
        moving = (np.arange(len(idx)) * tick) >= ped["t0"]
        vel = np.where(moving[:, None], ped["dir"] * ped["v"] * nrm, 0.0)
        pyaw = np.full(len(idx), math.atan2(ped["dir"] * nrm[1], ped["dir"] * nrm[0]))
        agents.append((1, PEDESTRIAN_DIMS, np.column_stack([pxy, pyaw, vel])))

    # background traffic: parked cars beside the ego lane, oncoming cars in the left lane
    times = np.arange(len(idx)) * tick
    for _ in range(int(rng.integers(0, 4))):
        sp = start_s + float(rng.uniform(-10.0, 120.0))
        lat = float(rng.choice([-1, 1])) * float(rng.uniform(5.5, 7.5))
        base = path.point(np.array([sp]))[0]
        h = float(path.heading(sp))
        p = base + lat * np.array([-math.sin(h), math.cos(h)])
        agents.append((0, VEHICLE_DIMS, np.tile([p[0], p[1], h, 0.0, 0.0], (len(idx), 1))))
    oncoming = path.offset(LANE_OFFSET)
    for _ in range(int(rng.integers(0, 3))):
        s0 = start_s + float(rng.uniform(20.0, 160.0))
        vo = float(rng.uniform(3.0, 12.0))
        so = np.clip(s0 - vo * times, 0.0, oncoming.length)
        oxy = oncoming.point(so)
        oyaw = wrap_angles(oncoming.heading(so) + math.pi)
        agents.append((0, VEHICLE_DIMS, np.column_stack([oxy, oyaw, vo * np.cos(oyaw), vo * np.sin(oyaw)])))
    lanes = [path.resampled(1.0), oncoming.resampled(1.0)] + [Path2(p).resampled(1.0) for p in extra_lanes]
    return ego, agents, lanes


def _feasible(ego: np.ndarray, agents) -> bool:
    if np.any(np.abs(ego[:, 4]) > MAX_ACCEL) or np.any(np.abs(ego[:, 5]) > MAX_YAW_RATE):
        return False
    if not np.isfinite(ego).all():
        return False
    margin = 0.3
    ego_c = corners_batch(ego[:, :2], ego[:, 2], EGO_LENGTH + margin, EGO_WIDTH + margin)
    for _, dims, st in agents:
        ac = corners_batch(st[:, :2], st[:, 2], dims[0], dims[1])
        if sat_overlap(ego_c, ac).any():
            return False
    return True


def generate_one(scenario_id: str, archetype: str, rng: np.random.Generator, cfg: ScenarioConfig,
                 max_tries: int = 200) -> Scenario:
    for _ in range(max_tries):
        weather = WEATHERS[int(rng.choice(3, p=[0.6, 0.25, 0.15]))]
        tod = TIMES_OF_DAY[int(rng.choice(2, p=[0.7, 0.3]))]
        ego, agents, lanes = _simulate(archetype, rng, weather, tod, cfg.n_ticks, cfg.tick)
        if not _feasible(ego, agents):
            continue
        # express the whole scene relative to the ego start pose
        origin = Pose2(*ego[0, :3])
        ego_local = ego.copy()
        ego_local[:, :2] = origin.from_world(ego[:, :2])
        ego_local[:, 2] = wrap_angles(ego[:, 2] - origin.yaw)
        states = []
        for _, _, st in agents:
            s2 = st.copy()
            s2[:, :2] = origin.from_world(st[:, :2])
            s2[:, 2] = wrap_angles(st[:, 2] - origin.yaw)
            s2[:, 3:5] = st[:, 3:5] @ origin.rotation()
            states.append(s2)
        lanes_local = [origin.from_world(lane) for lane in lanes]
        return Scenario(
            scenario_id=scenario_id,
            archetype=archetype,
            weather=weather,
            time_of_day=tod,
            tick=cfg.tick,
            ego=ego_local,
            agent_class=np.array([a[0] for a in agents], dtype=np.int64),
            agent_dims=np.array([a[1] for a in agents], dtype=np.float64).reshape(-1, 2),
            agent_states=np.array(states, dtype=np.float64).reshape(len(agents), cfg.n_ticks, 5),
            lanes=lanes_local,
            commands=label_commands(ego_local[:, 2], cfg.tick, 3.0, cfg.command_threshold),
        )
    raise ConfigError(f"could not sample a feasible {archetype} scenario in {max_tries} tries")


def generate(cfg: ScenarioConfig, seed: int, n: int, prefix: str = "s", archetypes=None) -> list[Scenario]:
    """Generate ``n`` scenarios; scenario ``i`` uses its own derived seed."""
    cfg.validate()
    weights = np.asarray(cfg.archetype_weights, dtype=np.float64)
    weights = weights / weights.sum()
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        arch = archetypes[i % len(archetypes)] if archetypes else ARCHETYPES[int(rng.choice(len(ARCHETYPES), p=weights))]
        out.append(generate_one(f"{prefix}{seed}-{i:05d}", arch, rng, cfg))
    return out


# ---------------------------------------------------------------------------
# rendering


@dataclass(eq=False)
class SceneFeatures:
    grid: np.ndarray  # (N, C, H, W)
    positions: np.ndarray  # (N*H*W, 2) cell centres in the ego frame
    pos_embed: np.ndarray  # (N*H*W, E) fixed position encoding

    def tokens(self) -> np.ndarray:
        """Flatten the grid to (N*H*W, C) feature tokens, view-major."""
        n, c, h, w = self.grid.shape
        return self.grid.transpose(0, 2, 3, 1).reshape(n * h * w, c)


def cell_centres(grid: GridConfig) -> np.ndarray:
    """(views, H, W, 2) cell centres; views split the lateral extent into strips."""
    xs = grid.x_max - (np.arange(grid.height) + 0.5) * grid.cell_x
    total_w = grid.width * grid.views
    ys = grid.y_half - (np.arange(total_w) + 0.5) * grid.cell_y
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    full = np.stack([X, Y], -1)  # (H, views*W, 2)
    return np.stack([full[:, v * grid.width : (v + 1) * grid.width] for v in range(grid.views)])


def position_encoding(positions: np.ndarray, n_freq: int = 4, scale: float = 64.0) -> np.ndarray:
    from .autograd.nn import sinusoidal

    return sinusoidal(positions, n_freq, scale)


def _subsample_points(grid: GridConfig) -> np.ndarray:
    k = grid.supersample
    centres = cell_centres(grid)  # (V, H, W, 2)
    off_x = ((np.arange(k) + 0.5) / k - 0.5) * grid.cell_x
    off_y = ((np.arange(k) + 0.5) / k - 0.5) * grid.cell_y
    ox, oy = np.meshgrid(off_x, off_y, indexing="ij")
    offs = np.stack([ox, oy], -1).reshape(-1, 2)
    return centres[..., None, :] + offs  # (V, H, W, k*k, 2)


def render_features(scenario: Scenario, tick: int, grid: GridConfig | None = None) -> SceneFeatures:
    """Rasterise the scene around the ego at ``tick`` into (views, C, H, W) channels."""
    grid = grid or GridConfig()
    scenario._check_tick(tick)
    pose = scenario.pose(tick)
    centres = cell_centres(grid)  # (V, H, W, 2)
    V, H, W = centres.shape[:3]
    out = np.zeros((V, len(CHANNELS), H, W), dtype=np.float64)

    pts, tang, tree = scenario._lane_points
    if tree is not None:
        world_c = pose.to_world(centres.reshape(-1, 2))
        dist, nn = tree.query(world_c)
        drivable = np.clip(1.0 - (dist - 1.75) / 2.0, 0.0, 1.0)
        lane = np.exp(-0.5 * (dist / 1.5) ** 2)
        t_local = tang[nn] @ pose.rotation()
        out[:, 0] = drivable.reshape(V, H, W)
        out[:, 1] = lane.reshape(V, H, W)
        out[:, 2] = (lane * t_local[:, 0]).reshape(V, H, W)
        out[:, 3] = (lane * t_local[:, 1]).reshape(V, H, W)

    if len(scenario.agent_states):
        sub = _subsample_points(grid)  # (V, H, W, K, 2)
        flat = sub.reshape(-1, 2)
        kk = sub.shape[3]
        st = scenario.agent_states[:, tick]
        rot = pose.rotation()
        for a in range(len(st)):
            x, y, yaw, vx, vy = st[a]
            L, Wd = scenario.agent_dims[a]
            c_local = pose.from_world(np.array([[x, y]]))[0]
            rel_yaw = yaw - pose.yaw
            r = math.hypot(L, Wd) / 2
            near = (np.abs(flat[:, 0] - c_local[0]) <= r) & (np.abs(flat[:, 1] - c_local[1]) <= r)
            if not near.any():
                continue
            d = flat[near] - c_local
            cy, sy = math.cos(rel_yaw), math.sin(rel_yaw)
            lx = d[:, 0] * cy + d[:, 1] * sy
            ly = -d[:, 0] * sy + d[:, 1] * cy
            inside = (np.abs(lx) <= L / 2) & (np.abs(ly) <= Wd / 2)
            hit = np.zeros(len(flat), dtype=np.float64)
            hit[np.flatnonzero(near)[inside]] = 1.0
            frac = hit.reshape(V, H, W, kk).mean(-1)
            v_local = np.array([vx, vy]) @ rot
            out[:, 4] += frac
            out[:, 5] += frac * v_local[0] / 10.0
            out[:, 6] += frac * v_local[1] / 10.0

    out[:, 7] = 1.0 if scenario.weather == "rain" else 0.0
    out[:, 8] = 1.0 if scenario.weather == "fog" else 0.0
    out[:, 9] = 1.0 if scenario.time_of_day == "night" else 0.0
    positions = centres.reshape(-1, 2)
    return SceneFeatures(out, positions, position_encoding(positions))


# ---------------------------------------------------------------------------
# perception targets


def detection_targets(scenario: Scenario, tick: int, grid: GridConfig | None = None):
    """Agents inside the grid: (classes (M,), boxes (M, 6) = x, y, w, l, sin yaw, cos yaw)."""
    grid = grid or GridConfig()
    pose = scenario.pose(tick)
    if len(scenario.agent_states) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 6))
    st = scenario.agent_states[:, tick]
    xy = pose.from_world(st[:, :2])
    yaw = wrap_angles(st[:, 2] - pose.yaw)
    inside = (xy[:, 0] >= grid.x_min) & (xy[:, 0] < grid.x_max) & (np.abs(xy[:, 1]) < grid.y_half)
    boxes = np.column_stack([xy, scenario.agent_dims[:, 1], scenario.agent_dims[:, 0], np.sin(yaw), np.cos(yaw)])
    return scenario.agent_class[inside], boxes[inside]


def lane_targets(scenario: Scenario, tick: int, grid: GridConfig | None = None, n_points: int = 4) -> np.ndarray:
    """Longest in-grid run of each lane, resampled to ``n_points``: (L, n_points, 2)."""
    grid = grid or GridConfig()
    pose = scenario.pose(tick)
    out = []
    for lane in scenario.lanes:
        loc = pose.from_world(lane)
        inside = (loc[:, 0] >= grid.x_min) & (loc[:, 0] < grid.x_max) & (np.abs(loc[:, 1]) < grid.y_half)
        if inside.sum() < 2:
            continue
        # longest contiguous run
        best, cur, best_rng, start = 0, 0, None, 0
        for i, f in enumerate(inside):
            if f:
                if cur == 0:
                    start = i
                cur += 1
                if cur > best:
                    best, best_rng = cur, (start, i + 1)
            else:
                cur = 0
        run = Path2(loc[best_rng[0] : best_rng[1]])
        if run.length < 2.0:
            continue
        out.append(run.point(np.linspace(0.0, run.length, n_points)))
    return np.array(out).reshape(-1, n_points, 2)


def scene_properties(scenario: Scenario, tick: int, grid: GridConfig | None = None) -> dict:
    """Targets for the auxiliary scene heads (stand-in for QA supervision)."""
    cls, boxes = detection_targets(scenario, tick, grid)
    nearest = float(np.min(np.hypot(boxes[:, 0], boxes[:, 1]))) if len(boxes) else 50.0
    return {
        "weather": WEATHERS.index(scenario.weather),
        "time_of_day": TIMES_OF_DAY.index(scenario.time_of_day),
        "agent_count": float(len(cls)),
        "nearest_agent": min(nearest, 50.0),
    }


# ---------------------------------------------------------------------------
# persistence


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int
    config_hash: str

    def all_ids(self) -> list:
        return list(self.train) + list(self.val) + list(self.test)


@dataclass
class Dataset:
    config: ScenarioConfig
    split: DatasetSplit
    scenarios: dict  # id -> Scenario

    def subset(self, name: str) -> list[Scenario]:
        return [self.scenarios[i] for i in getattr(self.split, name)]


def build_dataset(cfg: ScenarioConfig, seed: int, n_train: int, n_val: int, n_test: int) -> Dataset:
    scen = generate(cfg, seed, n_train + n_val + n_test)
    ids = [s.scenario_id for s in scen]
    split = DatasetSplit(
        ids[:n_train], ids[n_train : n_train + n_val], ids[n_train + n_val :], seed, config_hash(cfg.to_dict())
    )
    return Dataset(cfg, split, {s.scenario_id: s for s in scen})


def save_dataset(path, ds: Dataset) -> str:
    """JSON lines: a header line, then one scenario per line. Returns sha256 of the file."""
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "config": ds.config.to_dict(),
        "split": asdict(ds.split),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for sid in ds.split.all_ids():
        lines.append(json.dumps(ds.scenarios[sid].to_json(), sort_keys=True))
    raw = ("\n".join(lines) + "\n").encode()
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_dataset(path) -> Dataset:
    text = Path(path).read_text()
    lines = text.split("\n")
    if not text.endswith("\n"):
        raise FormatError(f"{path}: line {len(lines)}: truncated record (file does not end with a newline)")
    lines = lines[:-1]
    if not lines:
        raise FormatError(f"{path}: line 1: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line 1: bad header ({e.msg})") from e
    version = header.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise FormatError(f"{path}: format_version {version}, expected {DATASET_FORMAT_VERSION}")
    cfg = ScenarioConfig.from_dict(header["config"])
    split = DatasetSplit(**header["split"])
    scenarios = {}
    for no, line in enumerate(lines[1:], start=2):
        try:
            s = Scenario.from_json(json.loads(line))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
            raise FormatError(f"{path}: line {no}: corrupt scenario record ({e})") from e
        scenarios[s.scenario_id] = s
    missing = [i for i in split.all_ids() if i not in scenarios]
    if missing:
        raise FormatError(f"{path}: line {len(lines) + 1}: missing {len(missing)} scenarios listed in the split")
    return Dataset(cfg, split, scenarios)


def export_expert_csv(path, scenarios) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario_id", "tick", "time", "x", "y", "yaw", "speed", "accel", "yaw_rate", "command"])
        for s in scenarios:
            for t in range(s.n_ticks):
                w.writerow([s.scenario_id, t, s.time(t), *map(repr, s.ego[t].tolist()), s.command(t).value])

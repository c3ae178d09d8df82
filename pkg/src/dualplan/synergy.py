"""Time-decoupled cooperation between the slow and fast planners.

The slow planner publishes timestamped long-horizon plans into a shared
memory; the fast planner reads the newest plan that is at least ``delay``
seconds old, re-expresses it in the current ego frame and resamples the
unexpired part onto its own grid. When no plan qualifies, or the plan has
run out of horizon, the fast planner plans without it.

The memory holds an immutable tuple of records and publishes by swapping
the reference in one assignment, so a reader always sees a complete
snapshot and never waits for the writer.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ClockError, HorizonExceeded
from .geometry import Pose2, Trajectory, resample, transform_trajectory

EPS = 1e-9


@dataclass(frozen=True)
class SynergyRecord:
    produced_at: float
    ego_pose_at_production: Pose2
    trajectory: Trajectory
    seq: int = 0


class SynergyMemory:
    """Bounded single-writer/single-reader record buffer (copy-on-write snapshots)."""

    def __init__(self, capacity: int = 8):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._snapshot: tuple = ()

    def __len__(self) -> int:
        return len(self._snapshot)

    def snapshot(self) -> tuple:
        return self._snapshot

    # Publish and fetch are written as generators whose yields mark the points
    # where another task may run; the scheduler-fuzz tests drive them directly.

    def publish_steps(self, record: SynergyRecord):
        snap = self._snapshot
        yield
        if snap and record.produced_at < snap[-1].produced_at:
            raise ClockError(f"publish at {record.produced_at} after {snap[-1].produced_at}")
        new = (snap + (record,))[-self.capacity :]
        yield
        self._snapshot = new

    def fetch_steps(self, now: float, latency: float, out: list):
        if latency < 0:
            raise ValueError("latency must be >= 0")
        snap = self._snapshot
        yield
        cutoff = now - latency + EPS
        for rec in reversed(snap):
            if rec.produced_at <= cutoff:
                out.append(rec)
                return
        out.append(None)

    def publish(self, record: SynergyRecord) -> None:
        for _ in self.publish_steps(record):
            pass

    def fetch_latest(self, now: float, latency: float) -> SynergyRecord | None:
        out: list = []
        for _ in self.fetch_steps(now, latency, out):
            pass
        return out[0]


def publish(mem: SynergyMemory, record: SynergyRecord) -> None:
    mem.publish(record)


def fetch_latest(mem: SynergyMemory, now: float, latency: float) -> SynergyRecord | None:
    return mem.fetch_latest(now, latency)


def align_to_now(record: SynergyRecord, now: float, current_pose: Pose2, n: int = 6, dt: float = 0.5) -> Trajectory:
    """Re-express ``record`` in the current ego frame on the grid now+dt .. now+n*dt."""
    traj = record.trajectory
    if now + n * dt > traj.end_time + EPS:
        raise HorizonExceeded(
            f"record from t={record.produced_at} ends at {traj.end_time}s, need {now + n * dt}s"
        )
    moved = transform_trajectory(traj, record.ego_pose_at_production, current_pose)
    return resample(moved, now + dt, dt, n)


# ---------------------------------------------------------------------------
# planning loop on a virtual clock


@dataclass
class FrameDecision:
    scenario_id: str
    tick: int
    tick_time: float
    record: SynergyRecord | None
    aligned: Trajectory | None
    record_age_s: float | None
    plan: np.ndarray | None = None

    @property
    def used_synergy(self) -> bool:
        return self.aligned is not None

    def trace(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "tick": self.tick,
            "tick_time": self.tick_time,
            "used_synergy": self.used_synergy,
            "record_age_s": self.record_age_s,
            "plan": None if self.plan is None else self.plan.tolist(),
        }


def launch_schedule(n_ticks: int, cfg, tick: float = 0.5, seed: int = 0) -> list[tuple[int, float]]:
    """(launch tick, publish time) pairs for one scenario.

    The slow planner is a single worker: it starts a new job every
    ``period`` seconds, or as soon as the previous job finished if that is
    later. Publish time is launch time plus ``delay`` plus uniform jitter.
    """
    rng = np.random.default_rng(seed)
    out = []
    t_launch = cfg.first_launch_tick * tick
    horizon = (n_ticks - 1) * tick
    while t_launch <= horizon + EPS:
        k = int(round(t_launch / tick))
        done = t_launch + cfg.delay + (rng.uniform(0.0, cfg.jitter) if cfg.jitter > 0 else 0.0)
        out.append((k, done))
        nxt = max(t_launch + cfg.period, done)
        # next launch lands on the next tick boundary
        t_launch = np.ceil(nxt / tick - EPS) * tick
        if not np.isfinite(t_launch):
            break
    return out


def schedule_scenario(scenario_id: str, poses: list[Pose2], slow_plans: dict, fast_ticks, cfg, tick: float = 0.5,
                      n_short: int = 6, seed: int = 0) -> list[FrameDecision]:
    """Replay one scenario's clock: publish slow plans when ready, fetch for each fast tick.

    ``slow_plans[k]`` is the slow plan launched at tick ``k`` (ego frame at
    ``k``, first waypoint at ``(k+1)*tick``); a missing entry models a
    stalled slow planner.
    """
    mem = SynergyMemory(cfg.capacity)
    pending = sorted(launch_schedule(len(poses), cfg, tick, seed), key=lambda kv: kv[1])
    out = []
    seq = 0
    for t in fast_ticks:
        now = t * tick
        while pending and pending[0][1] <= now + EPS:
            k, _ = pending.pop(0)
            if k in slow_plans:
                seq += 1
                mem.publish(SynergyRecord(k * tick, poses[k], slow_plans[k], seq))
        rec = mem.fetch_latest(now, cfg.delay)
        aligned, age = None, None
        if rec is not None:
            age = now - rec.produced_at
            try:
                aligned = align_to_now(rec, now, poses[t], n_short, tick)
            except HorizonExceeded:
                aligned = None
        out.append(FrameDecision(scenario_id, t, now, rec, aligned, age))
    return out


def run_synergy_loop(scenarios, slow_planner, fast_planner, cfg, fast_ticks, tick: float = 0.5, n_short: int = 6,
                     seed: int = 0) -> list[FrameDecision]:
    """Both planners over many scenarios on the virtual clock.

    ``slow_planner(requests)`` maps a list of (scenario, tick) to a list of
    Trajectory (or None when stalled). ``fast_planner(decisions)`` receives
    the FrameDecision list and returns one (n_short, 2) plan per decision.
    Both are called in bulk so that models can batch.
    """
    requests = []
    for s in scenarios:
        for k, _ in launch_schedule(s.n_ticks, cfg, tick, seed):
            requests.append((s, k))
    plans = slow_planner(requests) if requests else []
    by_scenario: dict = {}
    for (s, k), p in zip(requests, plans):
        if p is not None:
            by_scenario.setdefault(s.scenario_id, {})[k] = p
    decisions = []
    for s in scenarios:
        poses = [s.pose(t) for t in range(s.n_ticks)]
        ticks = [t for t in fast_ticks if t < s.n_ticks]
        decisions += schedule_scenario(s.scenario_id, poses, by_scenario.get(s.scenario_id, {}), ticks, cfg, tick,
                                       n_short, seed)
    fast = fast_planner(decisions)
    for d, p in zip(decisions, fast):
        d.plan = np.asarray(p, dtype=np.float64)
    return decisions


def write_trace(path, decisions) -> None:
    with open(path, "w") as fh:
        for d in decisions:
            fh.write(json.dumps(d.trace(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# real threads: the slow planner runs in the background, the fast loop never waits


@dataclass
class ThreadedRun:
    plans: list = field(default_factory=list)
    used: list = field(default_factory=list)


def run_threaded(poses: list[Pose2], slow_fn, fast_fn, ticks, cfg, tick: float = 0.5, n_short: int = 6,
                 stop: threading.Event | None = None) -> ThreadedRun:
    """One scenario with the slow planner on a worker thread.

    ``slow_fn(k)`` may block arbitrarily long; its result for launch tick
    ``k`` is published whenever it returns. The fast loop only ever reads
    the memory, so it emits a plan for every tick regardless.
    """
    mem = SynergyMemory(cfg.capacity)
    stop = stop or threading.Event()
    launches = [k for k in ticks if k >= cfg.first_launch_tick]

    def worker():
        for k in launches:
            if stop.is_set():
                return
            traj = slow_fn(k)
            if traj is None or stop.is_set():
                return
            mem.publish(SynergyRecord(k * tick, poses[k], traj))

    th = threading.Thread(target=worker, daemon=True)
    th.start()
    run = ThreadedRun()
    for t in ticks:
        now = t * tick
        rec = mem.fetch_latest(now, 0.0)
        aligned = None
        if rec is not None:
            try:
                aligned = align_to_now(rec, now, poses[t], n_short, tick)
            except HorizonExceeded:
                aligned = None
        run.plans.append(fast_fn(t, aligned))
        run.used.append(aligned is not None)
    stop.set()
    return run

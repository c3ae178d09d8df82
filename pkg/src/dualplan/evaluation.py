"""Open-loop metrics: L2 displacement at 1/2/3 s and collision rate.

Collision convention: the ego box (default 4.08 m x 1.85 m) is placed at
each planned waypoint up to the horizon, heading taken from the direction of
travel between consecutive waypoints (stationary segments keep the previous
heading), and tested against the agent boxes of the same timestep with the
separating-axis theorem. ``collided_t`` is cumulative, so it is monotone in
the horizon. Rates are per-frame averages.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError
from .geometry import OrientedBox, Trajectory

EGO_LENGTH = 4.08
EGO_WIDTH = 1.85
HORIZONS = (1.0, 2.0, 3.0)
PROVENANCES = ("VLM", "E2E", "E2E-Async")


# ---------------------------------------------------------------------------
# separating-axis overlap


def corners_batch(xy: np.ndarray, yaw: np.ndarray, length, width) -> np.ndarray:
    """Corners (N, 4, 2) of boxes with centres ``xy`` (N, 2) and headings ``yaw`` (N,)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    yaw = np.asarray(yaw, dtype=np.float64).reshape(-1)
    hl = np.broadcast_to(np.asarray(length, dtype=np.float64) / 2.0, yaw.shape)
    hw = np.broadcast_to(np.asarray(width, dtype=np.float64) / 2.0, yaw.shape)
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.stack(
        [np.stack([hl, hw], -1), np.stack([-hl, hw], -1), np.stack([-hl, -hw], -1), np.stack([hl, -hw], -1)], 1
    )
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], 1)  # (N, 2, 2)
    return np.einsum("nij,nkj->nki", rot, local) + xy[:, None, :]


def sat_margin(ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    """Largest projection gap over the four edge normals (>0: separated).

    ``ca`` and ``cb`` are broadcastable corner arrays (..., 4, 2).
    """
    ca, cb = np.broadcast_arrays(np.asarray(ca, dtype=np.float64), np.asarray(cb, dtype=np.float64))
    axes = []
    for c in (ca, cb):
        e1 = c[..., 1, :] - c[..., 0, :]
        e2 = c[..., 2, :] - c[..., 1, :]
        for e in (e1, e2):
            n = np.stack([-e[..., 1], e[..., 0]], -1)
            axes.append(n / np.linalg.norm(n, axis=-1, keepdims=True))
    gaps = []
    for ax in axes:
        pa = np.einsum("...kj,...j->...k", ca, ax)
        pb = np.einsum("...kj,...j->...k", cb, ax)
        gaps.append(np.maximum(pb.min(-1) - pa.max(-1), pa.min(-1) - pb.max(-1)))
    return np.max(np.stack(gaps, -1), axis=-1)


def sat_overlap(ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    """True where the two convex quadrilaterals overlap (touching counts)."""
    return sat_margin(ca, cb) <= 0.0


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    return bool(sat_overlap(a.corners(), b.corners()))


# ---------------------------------------------------------------------------
# collision along a plan


def plan_headings(waypoints: np.ndarray, initial_heading: float = 0.0, min_step: float = 1e-3) -> np.ndarray:
    """Heading at each waypoint from the segment that arrives there.

    The first segment starts at the frame origin; segments shorter than
    ``min_step`` inherit the previous heading.
    """
    pts = np.vstack([[0.0, 0.0], np.asarray(waypoints, dtype=np.float64)])
    d = np.diff(pts, axis=0)
    out = np.empty(len(d))
    h = initial_heading
    for i, (dx, dy) in enumerate(d):
        if math.hypot(dx, dy) >= min_step:
            h = math.atan2(dy, dx)
        out[i] = h
    return out


def collision_steps(plan: np.ndarray, agent_boxes, ego_dims=(EGO_LENGTH, EGO_WIDTH)) -> np.ndarray:
    """Per-waypoint collision flags. ``agent_boxes[i]`` is an (M, 4, 2) corner array."""
    plan = np.asarray(plan, dtype=np.float64)
    if len(agent_boxes) < len(plan):
        raise DataError(f"agent boxes for {len(agent_boxes)} steps, plan has {len(plan)}")
    heads = plan_headings(plan)
    ego = corners_batch(plan, heads, ego_dims[0], ego_dims[1])
    hits = np.zeros(len(plan), dtype=bool)
    for i in range(len(plan)):
        boxes = np.asarray(agent_boxes[i], dtype=np.float64).reshape(-1, 4, 2)
        if len(boxes):
            hits[i] = bool(sat_overlap(ego[i][None], boxes).any())
    return hits


def _as_corners(step) -> np.ndarray:
    if isinstance(step, np.ndarray):
        return step.reshape(-1, 4, 2)
    boxes = list(step)
    if not boxes:
        return np.zeros((0, 4, 2))
    return np.stack([b.corners() for b in boxes])


def collision_at(plan: Trajectory, ego_dims, agents, horizon: float) -> bool:
    """Does the ego box swept along ``plan`` hit any agent up to ``horizon`` seconds?

    ``agents[i]`` holds the agent boxes (OrientedBox list or corner array) at
    the time of waypoint ``i``, in the plan's frame. ``horizon`` counts from
    one step before the first waypoint (the plan's origin time).
    """
    n = int(math.floor((horizon + 1e-9) / plan.dt))
    n = min(n, len(plan))
    if n <= 0:
        return False
    if len(agents) < n:
        raise DataError(f"missing agent frames: need {n}, got {len(agents)}")
    steps = collision_steps(plan.waypoints[:n], [_as_corners(a) for a in agents[:n]], ego_dims)
    return bool(steps.any())


# ---------------------------------------------------------------------------
# per-frame results and reports


@dataclass
class FrameResult:
    scenario_id: str
    tick: int
    provenance: str
    l2_1s: float
    l2_2s: float
    l2_3s: float
    collided_1s: bool
    collided_2s: bool
    collided_3s: bool

    def __post_init__(self):
        if (self.collided_1s and not self.collided_2s) or (self.collided_2s and not self.collided_3s):
            raise DataError("collision flags must be monotone in horizon")


def frame_result(plan: np.ndarray, gt: np.ndarray, agent_boxes, *, scenario_id="", tick=0, provenance="E2E", dt=0.5,
                 ego_dims=(EGO_LENGTH, EGO_WIDTH)) -> FrameResult:
    """Score one plan; ``plan`` and ``gt`` are (n, 2) waypoints at ``dt`` after the origin."""
    plan = np.asarray(plan, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    idx = [int(round(h / dt)) - 1 for h in HORIZONS]
    if len(plan) <= idx[-1] or len(gt) <= idx[-1]:
        raise DataError(f"plan/gt shorter than {HORIZONS[-1]} s")
    l2 = [float(math.hypot(*(plan[i] - gt[i]))) for i in idx]
    hits = collision_steps(plan[: idx[-1] + 1], agent_boxes, ego_dims)
    cum = np.logical_or.accumulate(hits)
    return FrameResult(str(scenario_id), int(tick), provenance, *l2, *(bool(cum[i]) for i in idx))


@dataclass
class BenchmarkReport:
    rows: dict = field(default_factory=dict)  # provenance -> metric dict
    scenario_count: int = 0
    frame_count: int = 0
    config_hash: str = ""
    seeds: list = field(default_factory=list)

    COLUMNS = ("l2_1s", "l2_2s", "l2_3s", "l2_avg", "col_1s", "col_2s", "col_3s", "col_avg")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method",) + self.COLUMNS + ("frames",))
        for name, row in self.rows.items():
            w.writerow([name] + [repr(float(row[c])) for c in self.COLUMNS] + [row["frames"]])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'Method':<14}|{'L2 (m)':^35}|{'Collision (%)':^35}"
        sub = f"{'':<14}|" + "".join(f"{h:>8} " for h in ("1s", "2s", "3s", "Avg.")) + "|" + "".join(
            f"{h:>8} " for h in ("1s", "2s", "3s", "Avg.")
        )
        lines = [head, sub, "-" * len(sub)]
        for name, row in self.rows.items():
            l2 = "".join(f"{row[c]:>8.3f} " for c in self.COLUMNS[:4])
            col = "".join(f"{row[c]:>8.2f} " for c in self.COLUMNS[4:])
            lines.append(f"{name:<14}|{l2}|{col}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(results, config_hash: str = "", seeds=()) -> BenchmarkReport:
    """Per-provenance arithmetic means. Collision columns are percentages."""
    by = {}
    for r in results:
        by.setdefault(r.provenance, []).append(r)
    rows = {}
    order = [p for p in PROVENANCES if p in by] + sorted(p for p in by if p not in PROVENANCES)
    for prov in order:
        rs = by[prov]
        n = len(rs)
        row = {
            "l2_1s": sum(r.l2_1s for r in rs) / n,
            "l2_2s": sum(r.l2_2s for r in rs) / n,
            "l2_3s": sum(r.l2_3s for r in rs) / n,
            "col_1s": 100.0 * sum(r.collided_1s for r in rs) / n,
            "col_2s": 100.0 * sum(r.collided_2s for r in rs) / n,
            "col_3s": 100.0 * sum(r.collided_3s for r in rs) / n,
            "frames": n,
        }
        row["l2_avg"] = (row["l2_1s"] + row["l2_2s"] + row["l2_3s"]) / 3.0
        row["col_avg"] = (row["col_1s"] + row["col_2s"] + row["col_3s"]) / 3.0
        rows[prov] = row
    results = list(results)
    return BenchmarkReport(
        rows=rows,
        scenario_count=len({r.scenario_id for r in results}),
        frame_count=len(results),
        config_hash=config_hash,
        seeds=list(seeds),
    )


def evaluate(traces, ground_truth, config_hash: str = "", seeds=()) -> tuple[BenchmarkReport, list[FrameResult]]:
    """Score trace records against ground truth.

    ``traces``: iterable of dicts with ``scenario_id``, ``tick``, ``provenance``
    and ``plan`` (list of [x, y] in the ego frame at ``tick``).
    ``ground_truth``: mapping ``(scenario_id, tick) -> (gt_waypoints, agent_corners)``
    where ``agent_corners[i]`` is an (M, 4, 2) array for future step ``i``.
    """
    results = []
    for rec in traces:
        key = (str(rec["scenario_id"]), int(rec["tick"]))
        if key not in ground_truth:
            raise DataError(f"no ground truth for scenario {key[0]} tick {key[1]}")
        gt, boxes = ground_truth[key]
        results.append(
            frame_result(rec["plan"], gt, boxes, scenario_id=key[0], tick=key[1], provenance=rec.get("provenance", "E2E"))
        )
    return aggregate(results, config_hash, seeds), results


def write_frame_results(path, results) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_frame_results(path) -> list[FrameResult]:
    with open(path) as fh:
        return [FrameResult(**json.loads(line)) for line in fh if line.strip()]

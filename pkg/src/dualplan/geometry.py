"""Poses, trajectories, ego status and oriented boxes.

Conventions: ego frame has +x forward and +y to the left; yaw is measured
counter-clockwise from +x. A :class:`Trajectory` stores waypoint ``i`` at time
``start_time + i * dt`` expressed in the frame ``frame`` (a pose in world
coordinates).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import HorizonExceeded, InvalidCommand, InvalidGeometry

# Grid snapping tolerance in units of waypoint index.
_SNAP = 1e-9


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def wrap_angles(a: np.ndarray) -> np.ndarray:
    w = np.fmod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi)
    w = np.where(w <= 0.0, w + 2.0 * np.pi, w)
    return w - np.pi


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for v in (self.x, self.y, self.yaw):
            if not math.isfinite(v):
                raise InvalidGeometry(f"non-finite pose component in {self!r}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def compose(self, other: "Pose2") -> "Pose2":
        """``self * other``: ``other`` is expressed in the frame of ``self``."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)

    def relative_to(self, base: "Pose2") -> "Pose2":
        """This pose expressed in the frame of ``base``."""
        return base.inverse().compose(self)

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 2) points from this frame into world coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation().T + np.array([self.x, self.y])

    def from_world(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 2) world points into this frame."""
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.array([self.x, self.y])) @ self.rotation()

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.yaw)


def _frozen_array(a, ncols: int | None = 2) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if ncols is not None:
        arr = arr.reshape(-1, ncols)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    start_time: float
    dt: float
    waypoints: np.ndarray
    frame: Pose2 = field(default_factory=Pose2)

    def __post_init__(self):
        wp = _frozen_array(self.waypoints)
        object.__setattr__(self, "waypoints", wp)
        if len(wp) < 1:
            raise InvalidGeometry("trajectory needs at least one waypoint")
        if not (math.isfinite(self.start_time) and math.isfinite(self.dt) and self.dt > 0):
            raise InvalidGeometry(f"bad time grid start={self.start_time} dt={self.dt}")
        if not np.isfinite(wp).all():
            raise InvalidGeometry("non-finite waypoint")
        object.__setattr__(self, "start_time", float(self.start_time))
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self) -> int:
        return len(self.waypoints)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.start_time == other.start_time
            and self.dt == other.dt
            and self.frame == other.frame
            and self.waypoints.shape == other.waypoints.shape
            and bool(np.all(self.waypoints == other.waypoints))
        )

    __hash__ = None

    @property
    def end_time(self) -> float:
        return self.start_time + (len(self) - 1) * self.dt

    def times(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(len(self))

    def _index(self, t: float) -> float:
        u = (t - self.start_time) / self.dt
        r = round(u)
        if abs(u - r) < _SNAP:
            u = float(r)
        if u < 0 or u > len(self) - 1:
            raise HorizonExceeded(
                f"t={t:.6g}s outside trajectory span [{self.start_time:.6g}, {self.end_time:.6g}]"
            )
        return u

    def position_at(self, t: float) -> np.ndarray:
        u = self._index(t)
        i = int(math.floor(u))
        if i == u:
            return self.waypoints[i].copy()
        f = u - i
        return self.waypoints[i] + f * (self.waypoints[i + 1] - self.waypoints[i])

    def with_waypoints(self, waypoints) -> "Trajectory":
        return Trajectory(self.start_time, self.dt, waypoints, self.frame)


class Command(enum.Enum):
    FORWARD = "Forward"
    LEFT = "LeftTurn"
    RIGHT = "RightTurn"

    @property
    def index(self) -> int:
        return _COMMAND_ORDER.index(self)

    @classmethod
    def parse(cls, value) -> "Command":
        if isinstance(value, Command):
            return value
        if isinstance(value, (int, np.integer)) and 0 <= value < 3:
            return _COMMAND_ORDER[int(value)]
        for c in cls:
            if value == c.value or value == c.name:
                return c
        raise InvalidCommand(f"unknown command {value!r}")


_COMMAND_ORDER = (Command.FORWARD, Command.LEFT, Command.RIGHT)
COMMANDS = _COMMAND_ORDER


@dataclass(frozen=True, eq=False)
class EgoStatus:
    speed: float
    accel: float
    yaw_rate: float
    command: Command
    history: Trajectory

    def __post_init__(self):
        if not isinstance(self.command, Command):
            raise InvalidCommand(f"command must be a Command, got {self.command!r}")
        if self.speed < 0 or not math.isfinite(self.speed):
            raise InvalidGeometry(f"speed must be finite and >= 0, got {self.speed}")

    def feature(self) -> np.ndarray:
        """Bank/retrieval feature: [speed, accel, yaw_rate, history x/y...]."""
        return np.concatenate(
            [[self.speed, self.accel, self.yaw_rate], self.history.waypoints.ravel()]
        )


@dataclass(frozen=True)
class OrientedBox:
    center: Pose2
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise InvalidGeometry(f"box extents must be positive: {self.length}x{self.width}")

    def corners(self) -> np.ndarray:
        """(4, 2) corners, counter-clockwise starting front-left."""
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return self.center.to_world(local)

    @property
    def area(self) -> float:
        return self.length * self.width


def transform_trajectory(traj: Trajectory, src: Pose2, dst: Pose2) -> Trajectory:
    """Re-express waypoints given in frame ``src`` in frame ``dst``."""
    for p in (src, dst):
        if not isinstance(p, Pose2):
            raise InvalidGeometry(f"expected Pose2, got {type(p).__name__}")
    if src == dst:
        return Trajectory(traj.start_time, traj.dt, traj.waypoints, dst)
    rel = src.relative_to(dst)
    return Trajectory(traj.start_time, traj.dt, rel.to_world(traj.waypoints), dst)


def resample(traj: Trajectory, new_start: float, new_dt: float, n: int) -> Trajectory:
    """Linearly interpolate ``traj`` onto ``n`` points starting at ``new_start``."""
    if n < 1 or not new_dt > 0:
        raise InvalidGeometry(f"bad target grid n={n} dt={new_dt}")
    pts = np.stack([traj.position_at(new_start + k * new_dt) for k in range(n)])
    return Trajectory(new_start, new_dt, pts, traj.frame)


def l2_at(traj: Trajectory, gt: Trajectory, t: float) -> float:
    a = traj.position_at(t)
    b = gt.position_at(t)
    return math.hypot(a[0] - b[0], a[1] - b[1])

"""Per-command trajectory bank built with k-means over ego-status features.

Each command gets ``k`` clusters. An entry keeps the medoid sample of its
cluster (the real expert sample nearest the centroid in normalised feature
space) so that every stored trajectory is one the expert actually drove.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import MLP, Module, Tensor, no_grad
from .errors import BankBuildError, FormatError, InvalidCommand, ModelNotReady
from .geometry import COMMANDS, Command, EgoStatus, Trajectory

BANK_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# k-means


def farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy farthest-point seeding; the first centre is a random sample."""
    idx = [int(rng.integers(len(x)))]
    d = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        idx.append(nxt)
        d = np.minimum(d, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[idx].copy()


def _assign(x, centres):
    d = np.sum((x[:, None, :] - centres[None]) ** 2, axis=-1)
    lab = np.argmin(d, axis=1)
    return lab, float(d[np.arange(len(x)), lab].sum())


@dataclass
class KMeansResult:
    centres: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list = field(default_factory=list)  # inertia after each assignment
    iterations: int = 0


def lloyd(x: np.ndarray, centres: np.ndarray, max_iter: int = 100) -> KMeansResult:
    centres = centres.copy()
    labels, inertia = _assign(x, centres)
    history = [inertia]
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(len(centres)):
            members = x[labels == j]
            if len(members):
                centres[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster with the worst-fit sample
                worst = np.argmax(np.sum((x - centres[labels]) ** 2, axis=1))
                centres[j] = x[worst]
        new_labels, inertia = _assign(x, centres)
        history.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansResult(centres, labels, inertia, history, it)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, n_init: int = 4) -> KMeansResult:
    """Lloyd's algorithm from ``n_init`` farthest-point seedings; keeps the lowest inertia."""
    x = np.asarray(x, dtype=np.float64)
    if k > len(x):
        raise BankBuildError(f"k={k} exceeds {len(x)} samples")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = lloyd(x, farthest_point_init(x, k, rng), max_iter)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# ---------------------------------------------------------------------------
# bank


@dataclass
class BankEntry:
    waypoints: np.ndarray  # (n_long, 2) future in the ego frame of the sample
    feature: np.ndarray  # raw (unnormalised) feature of the medoid sample
    command: Command
    dt: float = 0.5

    def trajectory(self, status: EgoStatus) -> Trajectory:
        """Place the entry on the planning grid of ``status``."""
        h = status.history
        start = h.start_time + (len(h) + 1) * h.dt
        return Trajectory(start, self.dt, self.waypoints, h.frame)


@dataclass
class TrajectoryBank:
    entries: dict  # Command -> list[BankEntry]
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.mean).all() and np.isfinite(self.scale).all() and (self.scale > 0).all()):
            raise BankBuildError("normalisation statistics must be finite with nonzero scale")
        self._norm = {
            c: np.array([self.normalize(e.feature) for e in es]) for c, es in self.entries.items()
        }

    def normalize(self, feature) -> np.ndarray:
        return (np.asarray(feature, dtype=np.float64) - self.mean) / self.scale

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    @property
    def n_long(self) -> int:
        return len(next(iter(self.entries.values()))[0].waypoints)

    def for_command(self, command) -> list:
        try:
            cmd = Command.parse(command)
            return self.entries[cmd]
        except KeyError:
            raise InvalidCommand(f"no bank entries for command {command!r}") from None

    def ranked(self, status: EgoStatus) -> np.ndarray:
        """Entry indices of ``status.command`` by ascending feature distance (stable ties)."""
        self.for_command(status.command)
        q = self.normalize(status.feature())
        d = np.sum((self._norm[status.command] - q) ** 2, axis=1)
        return np.argsort(d, kind="stable")

    def anchors(self, command, n: int | None = None) -> np.ndarray:
        """(k, n, 2) medoid waypoints of ``command`` truncated to ``n`` steps."""
        return np.stack([e.waypoints[:n] for e in self.for_command(command)])

    def to_json(self) -> dict:
        return {
            "format_version": BANK_FORMAT_VERSION,
            "commands": {
                c.value: [
                    {"feature": e.feature.tolist(), "waypoints": e.waypoints.tolist(), "dt": e.dt} for e in es
                ]
                for c, es in self.entries.items()
            },
            "normalization": {"mean": self.mean.tolist(), "scale": self.scale.tolist()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrajectoryBank":
        if d.get("format_version") != BANK_FORMAT_VERSION:
            raise FormatError(f"bank format_version {d.get('format_version')}, expected {BANK_FORMAT_VERSION}")
        entries = {}
        for name, es in d["commands"].items():
            cmd = Command.parse(name)
            entries[cmd] = [
                BankEntry(np.array(e["waypoints"], dtype=np.float64), np.array(e["feature"], dtype=np.float64), cmd,
                          float(e["dt"]))
                for e in es
            ]
        norm = d["normalization"]
        return cls(entries, np.array(norm["mean"], dtype=np.float64), np.array(norm["scale"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrajectoryBank":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: corrupt bank file ({e})") from e


@dataclass
class Sample:
    """One expert frame: the ego status and the long-horizon future."""

    feature: np.ndarray
    future: np.ndarray
    command: Command


def collect_samples(scenarios, history: int = 4, n_long: int = 8) -> list[Sample]:
    out = []
    for s in scenarios:
        for t in range(history, s.n_ticks - n_long):
            st = s.ego_status(t, history)
            out.append(Sample(st.feature(), s.future(t, n_long).waypoints.copy(), st.command))
    return out


def feature_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale = np.where(scale > 1e-8, scale, 1.0)
    return mean, scale


def build_bank(samples, k: int = 36, seed: int = 0, max_iter: int = 100, dt: float = 0.5) -> TrajectoryBank:
    samples = list(samples)
    if not samples:
        raise BankBuildError("no training samples")
    feats = np.array([s.feature for s in samples])
    mean, scale = feature_stats(feats)
    norm = (feats - mean) / scale
    entries = {}
    for ci, cmd in enumerate(COMMANDS):
        idx = np.array([i for i, s in enumerate(samples) if s.command is cmd], dtype=np.int64)
        if len(idx) < k:
            raise BankBuildError(f"command {cmd.value} has {len(idx)} samples, need at least {k}")
        res = kmeans(norm[idx], k, seed=seed * 1000 + ci, max_iter=max_iter)
        es = []
        for j in range(k):
            members = idx[res.labels == j]
            if not len(members):
                members = idx
            d = np.sum((norm[members] - res.centres[j]) ** 2, axis=1)
            m = int(members[np.argmin(d)])
            es.append(BankEntry(samples[m].future.copy(), samples[m].feature.copy(), cmd, dt))
        entries[cmd] = es
    return TrajectoryBank(entries, mean, scale)


# ---------------------------------------------------------------------------
# ego-only MLP candidate


class EgoMLP(Module):
    """Predicts the long-horizon future from the normalised status feature alone."""

    def __init__(self, n_feature: int, n_long: int, rng, hidden: int = 128, dtype=np.float64):
        self.n_long = n_long
        self.net = MLP([n_feature, hidden, hidden, 2 * n_long], rng, dtype=dtype)
        self.mean = np.zeros(n_feature)
        self.scale = np.ones(n_feature)
        self.trained = False
        self.dtype = dtype

    def set_normalization(self, mean, scale) -> None:
        self.mean, self.scale = np.asarray(mean, float), np.asarray(scale, float)

    def forward(self, features) -> Tensor:
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return self.net(Tensor(x.astype(self.dtype))).reshape(-1, self.n_long, 2)

    def predict(self, features) -> np.ndarray:
        if not self.trained:
            raise ModelNotReady("ego MLP has not been trained")
        with no_grad():
            return self.forward(np.atleast_2d(features)).data.astype(np.float64)


def mlp_candidate(status: EgoStatus, model: EgoMLP, dt: float = 0.5) -> Trajectory:
    wp = model.predict(status.feature())[0]
    h = status.history
    return Trajectory(h.start_time + (len(h) + 1) * h.dt, dt, wp, h.frame)


@dataclass
class CandidateSet:
    retrieved: list
    mlp_candidate: Trajectory
    provenance: list

    @property
    def trajectories(self) -> list[Trajectory]:
        return list(self.retrieved) + [self.mlp_candidate]

    def __len__(self) -> int:
        return len(self.retrieved) + 1

    def waypoints(self) -> np.ndarray:
        return np.stack([t.waypoints for t in self.trajectories])


def candidate_batch(bank: TrajectoryBank, model: EgoMLP, feats: np.ndarray, commands: np.ndarray,
                    k_l: int = 5) -> np.ndarray:
    """(F, k_l + 1, n_long, 2) candidate waypoints for many frames at once."""
    feats = np.asarray(feats, dtype=np.float64)
    mlp = model.predict(feats)
    out = np.empty((len(feats), k_l + 1, bank.n_long, 2))
    for ci, cmd in enumerate(COMMANDS):
        rows = np.flatnonzero(np.asarray(commands) == ci)
        if not len(rows):
            continue
        wps = np.stack([e.waypoints for e in bank.entries[cmd]])
        q = bank.normalize(feats[rows])
        d = np.sum((q[:, None, :] - bank._norm[cmd][None]) ** 2, axis=-1)
        top = np.argsort(d, axis=1, kind="stable")[:, :k_l]
        out[rows, :k_l] = wps[top]
    out[:, k_l] = mlp
    return out


def retrieve(bank: TrajectoryBank, status: EgoStatus, k_l: int = 5) -> list[Trajectory]:
    es = bank.for_command(status.command)
    if not 0 < k_l <= len(es):
        raise BankBuildError(f"k_l={k_l} outside 1..{len(es)}")
    return [es[i].trajectory(status) for i in bank.ranked(status)[:k_l]]


def assemble_candidates(bank: TrajectoryBank, status: EgoStatus, model: EgoMLP, k_l: int = 5) -> CandidateSet:
    ranked = bank.ranked(status)[:k_l]
    es = bank.for_command(status.command)
    retrieved = [es[i].trajectory(status) for i in ranked]
    prov = [f"bank:{status.command.value}:{int(i)}" for i in ranked] + ["mlp"]
    return CandidateSet(retrieved, mlp_candidate(status, model, es[0].dt), prov)

"""Trajectory chain-of-thought planner (the slow pathway).

Two steps over shared scene tokens: a scorer picks one of the ``k_l + 1``
candidates from their endpoint tokens, then a refiner reads one token per
waypoint of the chosen reference and regresses per-waypoint offsets. The
refiner's output layer starts at zero, so an untrained refiner returns the
reference unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import MLP, DecoderLayer, Linear, Module, Parameter, Tensor, no_grad
from .autograd import tensor as T
from .bank import CandidateSet
from .compressor import VisionAdapter
from .errors import InvalidCandidates, ShapeError
from .geometry import EgoStatus, Trajectory

COORD_SCALE = 20.0
DELTA_SCALE = 10.0
MAX_CANDIDATES = 16


def endpoint_features(wp: np.ndarray) -> np.ndarray:
    """[x, y, cos h, sin h] of the last waypoint; ``wp`` is (..., n, 2)."""
    wp = np.asarray(wp, dtype=np.float64)
    end = wp[..., -1, :]
    prev = wp[..., -2, :] if wp.shape[-2] > 1 else np.zeros_like(end)
    d = end - prev
    h = np.arctan2(d[..., 1], d[..., 0])
    still = np.hypot(d[..., 0], d[..., 1]) < 1e-3
    h = np.where(still, 0.0, h)
    return np.concatenate([end / COORD_SCALE, np.cos(h)[..., None], np.sin(h)[..., None]], axis=-1)


class TrajectoryAdapter(Module):
    """Endpoint tokens for selection, waypoint tokens for refinement."""

    def __init__(self, d: int, n_long: int, rng, max_candidates: int = MAX_CANDIDATES, dtype=np.float64):
        self.endpoint = MLP([4, d, d], rng, dtype)
        # candidate slots carry provenance: retrieval rank, with the ego-MLP candidate last
        self.slot = Parameter(rng.normal(scale=0.5, size=(max_candidates, d)).astype(dtype))
        self.waypoint = MLP([2, d, d], rng, dtype)
        self.index = Parameter(rng.normal(scale=0.5, size=(n_long, d)).astype(dtype))
        self.dtype = dtype

    def encode_endpoints(self, cands: np.ndarray) -> Tensor:
        """(B, K, n, 2) candidate waypoints -> (B, K, d)."""
        k = cands.shape[1]
        if k > self.slot.shape[0]:
            raise InvalidCandidates(f"{k} candidates, at most {self.slot.shape[0]} supported")
        return self.endpoint(Tensor(endpoint_features(cands).astype(self.dtype))) + self.slot[:k]

    def encode_waypoints(self, ref: np.ndarray) -> Tensor:
        """(B, n, 2) reference waypoints -> (B, n, d)."""
        ref = np.asarray(ref)
        if ref.shape[-2] != self.index.shape[0]:
            raise ShapeError(f"reference has {ref.shape[-2]} waypoints, adapter expects {self.index.shape[0]}")
        return self.waypoint(Tensor((ref / COORD_SCALE).astype(self.dtype))) + self.index


class Scorer(Module):
    def __init__(self, d, heads, layers, ffn, n_feature, rng, dtype=np.float64):
        self.status = MLP([n_feature, d, d], rng, dtype)
        self.blocks = [DecoderLayer(d, heads, rng, ffn, dtype=dtype) for _ in range(layers)]
        self.out = Linear(d, 1, rng, dtype=dtype)
        self.dtype = dtype

    def forward(self, scene: Tensor, status_feature: np.ndarray, cand_tokens: Tensor) -> Tensor:
        st = self.status(Tensor(np.asarray(status_feature, dtype=self.dtype)))
        ctx = T.concat([scene, st.reshape(st.shape[0], 1, -1)], axis=1)
        x = cand_tokens
        for blk in self.blocks:
            x = blk(x, ctx)
        return self.out(x).reshape(x.shape[0], x.shape[1])


class Refiner(Module):
    def __init__(self, d, heads, layers, ffn, rng, dtype=np.float64):
        self.blocks = [DecoderLayer(d, heads, rng, ffn, dtype=dtype) for _ in range(layers)]
        self.out = MLP([d, d, 2], rng, dtype, zero_last=True)
        # linear path from the reference coordinates, so offsets that undo part of the reference are easy to learn
        self.skip = Linear(2, 2, rng, init="zeros", dtype=dtype)
        self.dtype = dtype

    def forward(self, scene: Tensor, wp_tokens: Tensor, ref: np.ndarray) -> Tensor:
        x = wp_tokens
        for blk in self.blocks:
            x = blk(x, scene)
        skip = self.skip(Tensor((np.asarray(ref) / COORD_SCALE).astype(self.dtype)))
        return (self.out(x) + skip) * DELTA_SCALE


class TCoTPlanner(Module):
    def __init__(self, d_collect: int, n_feature: int, n_long: int, rng, d: int = 64, heads: int = 4,
                 layers: int = 2, ffn: int = 128, dtype=np.float64):
        self.n_long, self.dtype = n_long, dtype
        self.vision = VisionAdapter(d_collect, d, n_feature, rng, dtype=dtype)
        self.adapter = TrajectoryAdapter(d, n_long, rng, dtype=dtype)
        self.scorer = Scorer(d, heads, layers, ffn, n_feature, rng, dtype)
        self.refiner = Refiner(d, heads, layers, ffn, rng, dtype)
        self.feature_mean = np.zeros(n_feature)
        self.feature_scale = np.ones(n_feature)
        self.name_parameters()

    def set_normalization(self, mean, scale) -> None:
        self.feature_mean, self.feature_scale = np.asarray(mean, float), np.asarray(scale, float)

    def norm_feature(self, feats) -> np.ndarray:
        return (np.atleast_2d(np.asarray(feats, dtype=np.float64)) - self.feature_mean) / self.feature_scale

    def scene(self, collectors, feats) -> Tensor:
        return self.vision(collectors, self.norm_feature(feats))

    def score(self, scene: Tensor, feats, cands: np.ndarray) -> Tensor:
        """Logits (B, K) for candidates (B, K, n, 2)."""
        cands = np.asarray(cands)
        if cands.ndim != 4 or cands.shape[1] == 0:
            raise InvalidCandidates(f"candidate array must be (B, K>0, n, 2), got {cands.shape}")
        return self.scorer(scene, self.norm_feature(feats), self.adapter.encode_endpoints(cands))

    def deltas(self, scene: Tensor, ref: np.ndarray) -> Tensor:
        return self.refiner(scene, self.adapter.encode_waypoints(ref), ref)


# ---------------------------------------------------------------------------
# single-frame API


@dataclass
class SelectionResult:
    chosen_index: int
    scores: np.ndarray
    reference: Trajectory


@dataclass
class RefinementResult:
    trajectory: Trajectory
    deltas: np.ndarray


def first_argmax(scores) -> int:
    """argmax with ties resolved to the lowest index."""
    scores = np.asarray(scores)
    return int(np.flatnonzero(scores == scores.max())[0])


def select(model: TCoTPlanner, scene: Tensor, status: EgoStatus, cands: CandidateSet | list) -> SelectionResult:
    trajs = cands.trajectories if isinstance(cands, CandidateSet) else list(cands)
    if not trajs:
        raise InvalidCandidates("empty candidate set")
    with no_grad():
        logits = model.score(scene, status.feature(), np.stack([t.waypoints for t in trajs])[None]).data[0]
    logits = logits.astype(np.float64)
    i = first_argmax(logits)
    return SelectionResult(i, logits, trajs[i])


def refine(model: TCoTPlanner, scene: Tensor, sel: SelectionResult, enabled: bool = True) -> RefinementResult:
    ref = sel.reference
    if enabled:
        with no_grad():
            d = model.deltas(scene, ref.waypoints[None]).data[0].astype(np.float64)
    else:
        d = np.zeros_like(ref.waypoints)
    out = ref.waypoints + d
    # store the rounded offsets so that output - reference == deltas holds exactly
    return RefinementResult(ref.with_waypoints(out), out - ref.waypoints)


def plan_tcot(model: TCoTPlanner, collectors, status: EgoStatus, bank, ego_mlp, k_l: int = 5,
              refine_enabled: bool = True) -> tuple[Trajectory, dict]:
    """Candidates -> selection -> refinement. Returns the plan and a JSON-ready trace record."""
    from .bank import assemble_candidates

    cands = assemble_candidates(bank, status, ego_mlp, k_l)
    with no_grad():
        scene = model.scene(collectors, status.feature())
    sel = select(model, scene, status, cands)
    ref = refine(model, scene, sel, refine_enabled)
    trace = {
        "candidates": [t.waypoints.tolist() for t in cands.trajectories],
        "provenance": cands.provenance,
        "scores": sel.scores.tolist(),
        "chosen_index": sel.chosen_index,
        "deltas": ref.deltas.tolist(),
    }
    return ref.trajectory, trace


# ---------------------------------------------------------------------------
# training targets


def candidate_errors(cands: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Mean waypoint L2 of each candidate: (B, K, n, 2) vs (B, n, 2) -> (B, K)."""
    return np.linalg.norm(cands - gt[:, None], axis=-1).mean(-1)


def oracle_best(cands: np.ndarray, gt: np.ndarray) -> np.ndarray:
    err = candidate_errors(cands, gt)
    return np.array([first_argmax(-e) for e in err])


def selection_targets(cands: np.ndarray, gt: np.ndarray, tau: float) -> np.ndarray:
    """Soft labels softmax(-err / tau) over candidates; ``tau <= 0`` gives one-hot oracle-best labels."""
    err = candidate_errors(cands, gt)
    if tau <= 0:
        q = np.zeros_like(err)
        q[np.arange(len(err)), oracle_best(cands, gt)] = 1.0
        return q
    q = np.exp(-(err - err.min(axis=1, keepdims=True)) / tau)
    return q / q.sum(axis=1, keepdims=True)


def tcot_loss(model: TCoTPlanner, scene: Tensor, feats, cands: np.ndarray, gt: np.ndarray, rng,
              select_weight: float = 1.0, refine_weight: float = 1.0, teacher_frac: float = 0.5,
              select_tau: float = 0.0):
    """Selection cross-entropy plus refinement L1. Returns (loss, stats).

    Near-duplicate candidates make the hard oracle label noisy; ``select_tau``
    (metres) softens it towards every candidate that is nearly as good.
    """
    logits = model.score(scene, feats, cands)
    best = oracle_best(cands, gt)
    q = selection_targets(cands, gt, select_tau).astype(logits.dtype)
    sel_loss = T.mean(T.sum_(T.log_softmax(logits, -1) * -q, axis=-1))
    chosen = np.array([first_argmax(r) for r in logits.data])
    use = np.where(rng.random(len(best)) < teacher_frac, best, chosen)
    ref = cands[np.arange(len(use)), use]
    delta = model.deltas(scene, ref)
    ref_loss = T.l1_loss(delta, gt - ref)
    loss = sel_loss * select_weight + ref_loss * refine_weight
    stats = {"select": float(sel_loss.data), "refine": float(ref_loss.data), "acc": float(np.mean(chosen == best))}
    return loss, stats


def direct_loss(model: TCoTPlanner, scene: Tensor, gt: np.ndarray) -> Tensor:
    """No-CoT baseline: the refiner regresses the whole plan from a zero reference."""
    delta = model.deltas(scene, np.zeros_like(gt))
    return T.l1_loss(delta, gt)


def l2_horizons(plan: np.ndarray, gt: np.ndarray, dt: float = 0.5) -> np.ndarray:
    """(B, 3) L2 at 1, 2 and 3 s for (B, n, 2) arrays sampled every ``dt`` after the origin."""
    idx = [int(round(h / dt)) - 1 for h in (1.0, 2.0, 3.0)]
    return np.linalg.norm(plan[:, idx] - gt[:, idx], axis=-1)


"""Fast anchor-query planner.

One planning query per command-matched bank anchor (its first ``n_short``
waypoints, embedded by a small MLP), plus one query from the aligned slow
plan when synergy is available. The queries run a short decoder against
the collector tokens and an ego-status token; the head adds an offset to
each anchor and emits a confidence. The reported plan is the most
confident query.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import MLP, DecoderLayer, LayerNorm, Linear, Module, Parameter, Tensor, no_grad
from .autograd import tensor as T
from .errors import ShapeError
from .geometry import Command, EgoStatus, Trajectory
from .tcot import first_argmax

ANCHOR_SCALE = 20.0
OFFSET_SCALE = 5.0


@dataclass
class PlanningQuery:
    embedding: np.ndarray
    init_source: str  # "anchor:<i>" or "synergy"
    anchor_traj: Trajectory


@dataclass
class PlanOutput:
    trajectories: np.ndarray  # (Q, n, 2)
    confidences: np.ndarray  # (Q,)
    best_index: int
    best: Trajectory
    sources: list


class E2EPlanner(Module):
    def __init__(self, d_collect: int, n_feature: int, n_short: int, rng, d: int = 64, heads: int = 4,
                 layers: int = 2, ffn: int = 128, dtype=np.float64):
        self.n_short, self.d, self.dtype = n_short, d, dtype
        self.scene_proj = Linear(d_collect, d, rng, dtype=dtype)
        self.status = MLP([n_feature, d, d], rng, dtype)
        self.anchor_embed = MLP([2 * n_short, d, d], rng, dtype)
        self.synergy_type = Parameter(rng.normal(scale=0.5, size=(d,)).astype(dtype))
        self.blocks = [DecoderLayer(d, heads, rng, ffn, dtype=dtype) for _ in range(layers)]
        # pre-norm blocks leave the residual stream unnormalised; without this a
        # large shared component can swamp every query and kill the head
        self.final_norm = LayerNorm(d, dtype=dtype)
        self.head = MLP([d, d, 2 * n_short + 1], rng, dtype)
        self.feature_mean = np.zeros(n_feature)
        self.feature_scale = np.ones(n_feature)
        self.name_parameters()

    def set_normalization(self, mean, scale) -> None:
        self.feature_mean, self.feature_scale = np.asarray(mean, float), np.asarray(scale, float)

    def embed_anchors(self, anchors: np.ndarray, synergy: bool = False) -> Tensor:
        """(..., Q, n_short, 2) anchors -> (..., Q, d) query embeddings."""
        a = np.asarray(anchors)
        if a.shape[-2:] != (self.n_short, 2):
            raise ShapeError(f"anchors must end in ({self.n_short}, 2), got {a.shape}")
        flat = (a.reshape(a.shape[:-2] + (-1,)) / ANCHOR_SCALE).astype(self.dtype)
        e = self.anchor_embed(Tensor(flat))
        return e + self.synergy_type if synergy else e

    def context(self, collectors, feats) -> Tensor:
        coll = collectors if isinstance(collectors, Tensor) else Tensor(np.asarray(collectors, dtype=self.dtype))
        f = (np.atleast_2d(np.asarray(feats, dtype=np.float64)) - self.feature_mean) / self.feature_scale
        st = self.status(Tensor(f.astype(self.dtype)))
        return T.concat([self.scene_proj(coll), st.reshape(st.shape[0], 1, -1)], axis=1)

    def forward(self, collectors, feats, anchors: np.ndarray, synergy: np.ndarray | None = None,
                mask_synergy: bool = False):
        """Plan for a batch.

        ``anchors`` (B, K, n, 2); ``synergy`` optional (B, n, 2) aligned slow
        plans, appended as the last query. With ``mask_synergy`` the synergy
        query is withheld from attention entirely, which makes the output
        identical to planning without it. Returns (trajectories (B, Q, n, 2),
        confidence logits (B, Q)) as tensors.
        """
        anchors = np.asarray(anchors, dtype=np.float64)
        ctx = self.context(collectors, feats)
        q = self.embed_anchors(anchors)
        base = anchors
        if synergy is not None and not mask_synergy:
            syn = np.asarray(synergy, dtype=np.float64)[:, None]
            q = T.concat([q, self.embed_anchors(syn, synergy=True)], axis=1)
            base = np.concatenate([anchors, syn], axis=1)
        x = q
        for blk in self.blocks:
            x = blk(x, ctx)
        out = self.head(self.final_norm(x))
        B, Q = out.shape[:2]
        offsets = out[..., : 2 * self.n_short].reshape(B, Q, self.n_short, 2) * OFFSET_SCALE
        trajs = offsets + Tensor(base.astype(self.dtype))
        return trajs, out[..., 2 * self.n_short]


def init_queries(model: E2EPlanner, bank, status: EgoStatus, synergy: Trajectory | None = None) -> list[PlanningQuery]:
    cmd = Command.parse(status.command)
    anchors = bank.anchors(cmd, model.n_short)
    h = status.history
    start = h.start_time + (len(h) + 1) * h.dt
    with no_grad():
        emb = model.embed_anchors(anchors).data
    out = [PlanningQuery(emb[i], f"anchor:{i}", Trajectory(start, h.dt, anchors[i], h.frame)) for i in range(len(anchors))]
    if synergy is not None:
        with no_grad():
            e = model.embed_anchors(synergy.waypoints[None], synergy=True).data[0]
        out.append(PlanningQuery(e, "synergy", synergy))
    return out


def plan_e2e(model: E2EPlanner, collectors, queries: list[PlanningQuery], status: EgoStatus,
             mask_synergy: bool = False) -> PlanOutput:
    anchors = np.stack([q.anchor_traj.waypoints for q in queries if q.init_source != "synergy"])
    syn = [q for q in queries if q.init_source == "synergy"]
    synergy = syn[0].anchor_traj.waypoints[None] if syn else None
    coll = collectors if isinstance(collectors, Tensor) else np.asarray(collectors)
    if not isinstance(coll, Tensor) and coll.ndim == 2:
        coll = coll[None]
    with no_grad():
        trajs, conf = model(coll, status.feature(), anchors[None], synergy, mask_synergy)
    trajs = trajs.data[0].astype(np.float64)
    conf = conf.data[0].astype(np.float64)
    i = first_argmax(conf)
    ref = queries[0].anchor_traj
    sources = [q.init_source for q in queries][: len(conf)]
    return PlanOutput(trajs, conf, i, ref.with_waypoints(trajs[i]), sources)


def wta_loss(trajs: Tensor, conf: Tensor, gt: np.ndarray, conf_weight: float = 1.0, base=None):
    """Winner-take-all L1 on the query closest to ``gt`` plus confidence cross-entropy.

    With ``base`` (B, Q, n, 2) the winner is the query whose initial
    trajectory (anchor or synergy plan) is closest, so the classification
    target does not move as the offsets train. Otherwise it is the closest
    prediction.
    """
    ref = trajs.data if base is None else np.asarray(base, dtype=trajs.data.dtype)
    err = np.abs(ref - gt[:, None].astype(trajs.data.dtype)).sum(-1).mean(-1)  # (B, Q)
    win = err.argmin(axis=1)
    B = len(win)
    best = trajs[np.arange(B), win]
    reg = T.l1_loss(best, gt)
    cls = T.cross_entropy(conf, win)
    return reg + cls * conf_weight, {"reg": float(reg.data), "cls": float(cls.data)}


def best_plans(trajs: Tensor | np.ndarray, conf: Tensor | np.ndarray) -> np.ndarray:
    t = trajs.data if isinstance(trajs, Tensor) else trajs
    c = conf.data if isinstance(conf, Tensor) else conf
    idx = np.array([first_argmax(row) for row in c])
    return t[np.arange(len(idx)), idx].astype(np.float64)

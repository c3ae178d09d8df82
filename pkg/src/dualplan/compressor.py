"""Sequential query compressor.

A fixed set of learned collector tokens first reads the rasterised scene
(static stage), then is concatenated with task queries for each perception
task in a configured order (detection, lane). After each task stage the
task half is split off and supervised by its alignment head while the
collector half carries on. Task stages also read a temporal memory of
detached collector tokens from earlier frames of the same stream.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autograd import MLP, DecoderLayer, Linear, Module, Parameter, Tensor
from .autograd import tensor as T
from .errors import ShapeError, StageOrderError

N_DET_CLASSES = 3  # vehicle, pedestrian, no-object
NO_OBJECT = 2
BOX_SCALE = np.array([50.0, 32.0, 5.0, 5.0, 1.0, 1.0])
N_WEATHER, N_TOD = 3, 2


# ---------------------------------------------------------------------------
# matching


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost assignment of rows to columns (rows >= columns allowed)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return linear_sum_assignment(cost)


def brute_force_assignment(cost: np.ndarray) -> float:
    """Exhaustive minimum over injective column->row maps (test oracle, tiny inputs)."""
    n, m = cost.shape
    if m == 0:
        return 0.0
    return min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def detection_cost(logits: np.ndarray, boxes: np.ndarray, gt_cls: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """(n_query, n_gt) cost: class negative log-likelihood plus L1 box distance."""
    lp = logits - logits.max(-1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(-1, keepdims=True))
    nll = -lp[:, gt_cls]
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    return nll + l1


def lane_cost(exist_logit: np.ndarray, points: np.ndarray, gt_points: np.ndarray) -> np.ndarray:
    nll = np.logaddexp(0.0, -exist_logit)[:, None]
    l1 = np.abs(points[:, None] - gt_points[None]).reshape(len(points), len(gt_points), -1).mean(-1)
    return nll + l1


# ---------------------------------------------------------------------------
# token containers


@dataclass
class CollectorTokens:
    tokens: Tensor  # (B, n_collect, d)
    stage_tag: tuple = ()


class TemporalMemory:
    """Ring buffer of detached collector tokens from prior frames, oldest first."""

    def __init__(self, capacity: int = 4):
        self.capacity = capacity
        self.entries: list[tuple[float, np.ndarray, np.ndarray]] = []  # (time, tokens (B,n,d), weight (B,))

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, time: float, tokens, weight=None) -> None:
        arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
        if self.entries and time < self.entries[-1][0]:
            raise ValueError(f"memory time regression {time} < {self.entries[-1][0]}")
        w = np.ones(arr.shape[0]) if weight is None else np.asarray(weight, dtype=np.float64)
        self.entries.append((float(time), arr.copy(), w))
        if len(self.entries) > self.capacity:
            self.entries.pop(0)

    def clear(self) -> None:
        self.entries.clear()


# ---------------------------------------------------------------------------
# model


class DetectionHead(Module):
    def __init__(self, d, rng, dtype):
        self.net = MLP([d, d, 6 + N_DET_CLASSES], rng, dtype)

    def forward(self, q) -> Tensor:
        return self.net(q)


class LaneHead(Module):
    def __init__(self, d, n_points, rng, dtype):
        self.n_points = n_points
        self.net = MLP([d, d, 2 * n_points + 1], rng, dtype)

    def forward(self, q) -> Tensor:
        return self.net(q)


class SceneHeads(Module):
    """Auxiliary scene-property heads over pooled collectors."""

    def __init__(self, d, rng, dtype):
        self.weather = Linear(d, N_WEATHER, rng, dtype=dtype)
        self.time_of_day = Linear(d, N_TOD, rng, dtype=dtype)
        self.count = Linear(d, 1, rng, dtype=dtype)
        self.nearest = Linear(d, 1, rng, dtype=dtype)

    def forward(self, collectors: Tensor) -> dict:
        pooled = collectors.mean(axis=-2)
        return {
            "weather": self.weather(pooled),
            "time_of_day": self.time_of_day(pooled),
            "count": self.count(pooled),
            "nearest": self.nearest(pooled),
        }


class QueryCompressor(Module):
    def __init__(self, n_channels: int, pos_dim: int, rng, d: int = 64, heads: int = 4, ffn: int = 128,
                 n_collect: int = 48, n_det: int = 32, n_lane: int = 16, lane_points: int = 4,
                 memory_frames: int = 4, stages=("static", "detection", "lane"),
                 memory_stages=("detection", "lane"), dtype=np.float64):
        if "static" not in stages:
            raise StageOrderError("the static stage is required")
        self.stages = tuple(stages)
        self.memory_stages = tuple(memory_stages)
        self.d, self.n_collect, self.memory_frames, self.dtype = d, n_collect, memory_frames, dtype
        self.feat_proj = Linear(n_channels, d, rng, dtype=dtype)
        self.pos_proj = Linear(pos_dim, d, rng, bias=False, dtype=dtype)
        self.collectors = Parameter(rng.normal(scale=0.5, size=(n_collect, d)).astype(dtype))
        self.time_embed = Parameter(rng.normal(scale=0.1, size=(memory_frames, d)).astype(dtype))
        self.blocks = {s: DecoderLayer(d, heads, rng, ffn, dtype=dtype) for s in self.stages}
        self.task_queries = {}
        if "detection" in self.stages:
            self.task_queries["detection"] = Parameter(rng.normal(scale=0.5, size=(n_det, d)).astype(dtype))
            self.det_head = DetectionHead(d, rng, dtype)
        if "lane" in self.stages:
            self.task_queries["lane"] = Parameter(rng.normal(scale=0.5, size=(n_lane, d)).astype(dtype))
            self.lane_head = LaneHead(d, lane_points, rng, dtype)
        self.scene_heads = SceneHeads(d, rng, dtype)
        self.name_parameters()

    # -- pieces -----------------------------------------------------------

    def embed_features(self, tokens: np.ndarray, pos_embed: np.ndarray) -> Tensor:
        """(B, N, C) raw tokens plus (N, E) position encodings -> (B, N, d)."""
        x = self.feat_proj(Tensor(np.asarray(tokens, dtype=self.dtype)))
        return x + self.pos_proj(Tensor(np.asarray(pos_embed, dtype=self.dtype)))

    def fresh(self, batch: int) -> CollectorTokens:
        return CollectorTokens(T.broadcast_to(self.collectors, (batch, self.n_collect, self.d)), ())

    def _expect(self, q: CollectorTokens, stage: str) -> None:
        if stage not in self.stages:
            raise StageOrderError(f"stage {stage!r} not configured (stages: {self.stages})")
        want = self.stages[len(q.stage_tag)] if len(q.stage_tag) < len(self.stages) else None
        if q.stage_tag != self.stages[: len(q.stage_tag)] or want != stage:
            raise StageOrderError(f"stage {stage!r} cannot follow {q.stage_tag or 'nothing'}; order is {self.stages}")

    def memory_tokens(self, memory: TemporalMemory | None, batch: int):
        """(B, F*n, d) memory tensor with age embeddings and its key mask, or (None, None)."""
        if memory is None or not len(memory):
            return None, None
        parts, masks = [], []
        n = len(memory.entries)
        for i, (_, tok, w) in enumerate(memory.entries):
            age = n - 1 - i  # 0 = most recent
            parts.append(Tensor(tok.astype(self.dtype)) + self.time_embed[min(age, self.memory_frames - 1)])
            masks.append(np.repeat((w > 0)[:, None], tok.shape[1], axis=1))
        return T.concat(parts, axis=1), np.concatenate(masks, axis=1)

    def static_stage(self, q: CollectorTokens, feats: Tensor) -> CollectorTokens:
        self._expect(q, "static")
        if q.stage_tag:
            raise StageOrderError("static stage needs fresh collectors")
        out = self.blocks["static"](q.tokens, feats)
        return CollectorTokens(out, q.stage_tag + ("static",))

    def task_stage(self, q: CollectorTokens, task: str, feats: Tensor, memory: TemporalMemory | None = None):
        """Returns (collectors, task query outputs)."""
        self._expect(q, task)
        B = q.tokens.shape[0]
        tq = T.broadcast_to(self.task_queries[task], (B,) + self.task_queries[task].shape)
        x = T.concat([q.tokens, tq], axis=1)
        mem, mask = (None, None)
        if task in self.memory_stages:
            mem, mask = self.memory_tokens(memory, B)
        if mem is not None:
            keys = T.concat([feats, mem], axis=1)
            full = np.concatenate([np.ones((B, feats.shape[1]), bool), mask], axis=1)
            key_mask = full[:, None, None, :]
        else:
            keys, key_mask = feats, None
        out = self.blocks[task](x, keys, key_mask)
        n = self.n_collect
        return CollectorTokens(out[:, :n], q.stage_tag + (task,)), out[:, n:]

    def forward(self, tokens, pos_embed, memory: TemporalMemory | None = None) -> dict:
        """Run every configured stage. Returns collectors plus raw head outputs."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 3:
            raise ShapeError(f"feature tokens must be (B, N, C), got {tokens.shape}")
        feats = self.embed_features(tokens, pos_embed)
        q = self.static_stage(self.fresh(tokens.shape[0]), feats)
        out = {}
        for stage in self.stages[1:]:
            q, task_out = self.task_stage(q, stage, feats, memory)
            out[stage] = self.det_head(task_out) if stage == "detection" else self.lane_head(task_out)
        out["collectors"] = q
        out["scene"] = self.scene_heads(q.tokens)
        return out


class VisionAdapter(Module):
    """Projects collectors to the planner width and appends an ego-status token last."""

    def __init__(self, d_in: int, d_out: int, n_feature: int, rng, identity: bool = False, dtype=np.float64):
        if identity and d_in != d_out:
            raise ShapeError("identity adapter needs equal widths")
        self.proj = Linear(d_in, d_out, rng, init="identity" if identity else "xavier", dtype=dtype)
        self.ego = MLP([n_feature, d_out, d_out], rng, dtype)
        self.dtype = dtype

    def forward(self, collectors: CollectorTokens | Tensor, ego_feature: np.ndarray) -> Tensor:
        if isinstance(collectors, CollectorTokens):
            if not collectors.stage_tag:
                raise StageOrderError("vision adapter needs completed compressor stages")
            collectors = collectors.tokens
        tok = self.proj(collectors)
        ego = self.ego(Tensor(np.asarray(ego_feature, dtype=self.dtype)))
        return T.concat([tok, ego.reshape(ego.shape[0], 1, -1)], axis=1)


# ---------------------------------------------------------------------------
# losses


def detection_loss(pred: Tensor, targets) -> Tensor:
    """Set loss after bipartite matching. ``targets[b] = (classes (M,), boxes (M, 6))``."""
    B, Q, _ = pred.shape
    p = pred.data
    cls_t = np.full((B, Q), NO_OBJECT, dtype=np.int64)
    box_t = np.zeros((B, Q, 6))
    box_w = np.zeros((B, Q, 6))
    ce_w = np.full((B, Q), 0.2)
    for b, (gc, gb) in enumerate(targets):
        if not len(gc):
            continue
        gb = np.asarray(gb) / BOX_SCALE
        rows, cols = hungarian(detection_cost(p[b, :, 6:], p[b, :, :6], np.asarray(gc), gb))
        cls_t[b, rows] = np.asarray(gc)[cols]
        box_t[b, rows] = gb[cols]
        box_w[b, rows] = 1.0
        ce_w[b, rows] = 1.0
    ce = T.cross_entropy(pred[..., 6:], cls_t, ce_w)
    if box_w.any():
        return ce + T.l1_loss(pred[..., :6], box_t, box_w) * 6.0
    return ce


def lane_loss(pred: Tensor, targets, n_points: int) -> Tensor:
    """``targets[b]`` is an (L, n_points, 2) array of lane control points (ego frame)."""
    B, Q, _ = pred.shape
    p = pred.data
    ex_t = np.zeros((B, Q))
    pt_t = np.zeros((B, Q, 2 * n_points))
    pt_w = np.zeros((B, Q, 2 * n_points))
    scale = np.tile([50.0, 32.0], n_points)
    for b, lanes in enumerate(targets):
        if not len(lanes):
            continue
        g = np.asarray(lanes).reshape(len(lanes), -1) / scale
        rows, cols = hungarian(lane_cost(p[b, :, -1], p[b, :, :-1], g))
        ex_t[b, rows] = 1.0
        pt_t[b, rows] = g[cols]
        pt_w[b, rows] = 1.0
    logit = pred[..., -1]
    # binary cross-entropy written through the two-class softmax
    two = T.stack([T.neg(logit) * 0.5, logit * 0.5], axis=-1)
    loss = T.cross_entropy(two, ex_t.astype(np.int64))
    if pt_w.any():
        loss = loss + T.l1_loss(pred[..., :-1], pt_t, pt_w) * 2.0
    return loss


def scene_loss(out: dict, props) -> Tensor:
    weather = np.array([p["weather"] for p in props])
    tod = np.array([p["time_of_day"] for p in props])
    count = np.array([[p["agent_count"] / 5.0] for p in props])
    nearest = np.array([[p["nearest_agent"] / 50.0] for p in props])
    return (
        T.cross_entropy(out["weather"], weather)
        + T.cross_entropy(out["time_of_day"], tod)
        + T.l1_loss(out["count"], count)
        + T.l1_loss(out["nearest"], nearest)
    )


def decode_detections(pred: np.ndarray, threshold: float = 0.5):
    """Per-query (class, box) for queries whose best non-empty class beats ``threshold``."""
    logits = pred[..., 6:]
    prob = np.exp(logits - logits.max(-1, keepdims=True))
    prob /= prob.sum(-1, keepdims=True)
    keep = prob[..., :NO_OBJECT].max(-1) > threshold
    return prob[..., :NO_OBJECT].argmax(-1)[keep], pred[..., :6][keep] * BOX_SCALE

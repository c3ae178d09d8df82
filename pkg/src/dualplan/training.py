"""Staged training of the compressor, the slow planner and the fast planner.

Stages run in a fixed order, each with a declared set of trainable modules;
everything else is frozen for the duration of the stage (frozen parameters
refuse gradient writes and optimizer updates):

  CompressorPretrain  compressor + perception and scene heads
  AdapterTrain        slow planner (vision adapter, trajectory adapters, scorer, refiner)
  E2EHeadTrain        fast planner; compressor and slow planner frozen
  JointTrain          everything, all losses
  SynergyFinetune     fast planner only, with stored slow plans as extra queries

Stages that keep the compressor frozen read cached collector tokens, so the
expensive scene encoding runs once per compressor version.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scenario as sc
from .autograd import Adam, AdamConfig, Tensor, checkpoint, no_grad
from .autograd import tensor as T
from .bank import EgoMLP, TrajectoryBank, build_bank, candidate_batch, collect_samples, feature_stats
from .compressor import QueryCompressor, TemporalMemory, detection_loss, lane_loss, scene_loss
from .config import ExperimentConfig
from .e2e import E2EPlanner, best_plans, wta_loss
from .errors import CheckpointError, NumericsError, StageOrderError
from .geometry import COMMANDS, Trajectory
from .synergy import launch_schedule, schedule_scenario
from .tcot import TCoTPlanner, direct_loss, first_argmax, tcot_loss

STAGES = ("CompressorPretrain", "AdapterTrain", "E2EHeadTrain", "JointTrain", "SynergyFinetune")
MODULES = ("compressor", "tcot", "e2e")


@dataclass
class StageSpec:
    name: str
    epochs: int
    lr: float
    trainable: tuple

    @property
    def frozen(self) -> tuple:
        return tuple(m for m in MODULES if m not in self.trainable)


def stage_plan(cfg: ExperimentConfig) -> list[StageSpec]:
    t = cfg.train
    return [
        StageSpec("CompressorPretrain", t.compressor.epochs, t.compressor.lr, ("compressor",)),
        StageSpec("AdapterTrain", t.adapter.epochs, t.adapter.lr, ("tcot",)),
        StageSpec("E2EHeadTrain", t.e2e_head.epochs, t.e2e_head.lr, ("e2e",)),
        StageSpec("JointTrain", t.joint.epochs, t.joint.lr, ("compressor", "tcot", "e2e")),
        StageSpec("SynergyFinetune", t.synergy.epochs, t.synergy.lr, ("e2e",)),
    ]


# ---------------------------------------------------------------------------
# data


@dataclass(eq=False)
class SplitData:
    """Everything the models need from a list of scenarios, as dense arrays."""

    scenarios: list
    tokens: np.ndarray  # (S, Tn, N, C) rendered features for ticks 0..Tn-1
    pos: np.ndarray  # (N, E)
    feats: np.ndarray  # (S, Tn, F) status features (zero before the history is full)
    commands: np.ndarray  # (S, Tn)
    gt_long: np.ndarray  # (S, Tn, n_long, 2), NaN where unavailable
    gt_short: np.ndarray  # (S, Tn, n_short, 2)
    det: list  # det[s][t] = (classes, boxes)
    lanes: list
    props: list
    history: int
    collectors: np.ndarray | None = None
    collectors_version: tuple = ()  # (pipeline id, compressor version) the cache was computed with

    @property
    def n_stream(self) -> int:
        return self.tokens.shape[1]

    def frames(self, long: bool) -> list[tuple[int, int]]:
        gt = self.gt_long if long else self.gt_short
        return [(i, t) for i in range(len(self.scenarios)) for t in range(self.history, self.n_stream)
                if not np.isnan(gt[i, t, 0, 0])]


def prepare_split(scenarios, cfg: ExperimentConfig, render: bool = True) -> SplitData:
    """Dense arrays for a list of scenarios. ``render=False`` skips the scene
    features and perception targets (enough for the ego MLP and the bank)."""
    scfg = cfg.scenario
    n_stream = scfg.n_ticks - scfg.horizon_short
    grid = scfg.grid
    S = len(scenarios)
    first = sc.render_features(scenarios[0], 0, grid)
    N, C = first.tokens().shape
    tokens = np.zeros((S, n_stream, N, C) if render else (S, n_stream, 0, C), dtype=np.float32)
    nf = 3 + 2 * scfg.history
    feats = np.zeros((S, n_stream, nf))
    cmds = np.zeros((S, n_stream), dtype=np.int64)
    gl = np.full((S, n_stream, scfg.horizon_long, 2), np.nan)
    gs = np.full((S, n_stream, scfg.horizon_short, 2), np.nan)
    det, lanes, props = [], [], []
    for i, s in enumerate(scenarios):
        d_i, l_i, p_i = [], [], []
        for t in range(n_stream):
            if render:
                tokens[i, t] = sc.render_features(s, t, grid).tokens()
                d_i.append(sc.detection_targets(s, t, grid))
                l_i.append(sc.lane_targets(s, t, grid, cfg.model.lane_points))
                p_i.append(sc.scene_properties(s, t, grid))
            cmds[i, t] = s.commands[t]
            if t >= scfg.history:
                feats[i, t] = s.ego_status(t, scfg.history).feature()
                if t + scfg.horizon_long < s.n_ticks:
                    gl[i, t] = s.future(t, scfg.horizon_long).waypoints
                gs[i, t] = s.future(t, scfg.horizon_short).waypoints
        det.append(d_i)
        lanes.append(l_i)
        props.append(p_i)
    return SplitData(list(scenarios), tokens, first.pos_embed, feats, cmds, gl, gs, det, lanes, props, scfg.history)


# ---------------------------------------------------------------------------
# helpers


def _dtype(cfg: ExperimentConfig):
    return np.float32 if cfg.train.dtype == "float32" else np.float64


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, size):
        yield order[i : i + size]


def _step(opt: Adam, loss: Tensor, stage: str) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericsError(f"stage {stage}: loss became {value}")
    opt.zero_grad()
    loss.backward()
    opt.fill_missing_grads()
    opt.step()
    return value


def perception_loss(comp: QueryCompressor, out: dict, split: SplitData, idx, t: int, aux_weight: float) -> Tensor:
    loss = None
    if "detection" in out:
        loss = detection_loss(out["detection"], [split.det[i][t] for i in idx])
    if "lane" in out:
        ll = lane_loss(out["lane"], [split.lanes[i][t] for i in idx], comp.lane_head.n_points)
        loss = ll if loss is None else loss + ll
    if aux_weight > 0:
        sl = scene_loss(out["scene"], [split.props[i][t] for i in idx]) * aux_weight
        loss = sl if loss is None else loss + sl
    return loss


def encode_stream(comp: QueryCompressor, split: SplitData, batch: int = 32) -> np.ndarray:
    """Collector tokens (S, Tn, n_collect, d) with the temporal memory carried along each stream."""
    S, Tn = split.tokens.shape[:2]
    out = np.zeros((S, Tn, comp.n_collect, comp.d), dtype=comp.dtype)
    with no_grad():
        for idx in _batches(S, batch, None):
            mem = TemporalMemory(comp.memory_frames)
            for t in range(Tn):
                res = comp(split.tokens[idx, t], split.pos, mem)
                tok = res["collectors"].tokens.data
                out[idx, t] = tok
                mem.push(t * 0.5, tok)
    return out


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class TrainReport:
    seed: int
    config_hash: str
    curves: dict = field(default_factory=dict)  # stage -> list of epoch-mean losses
    checkpoints: dict = field(default_factory=dict)  # module -> sha256

    def to_csv(self) -> str:
        lines = ["stage,epoch,loss"]
        for stage, vals in self.curves.items():
            lines += [f"{stage},{i},{v!r}" for i, v in enumerate(vals)]
        return "\n".join(lines) + "\n"


_PIPELINE_IDS = itertools.count()


class Pipeline:
    """Owns the models of one seed and runs the stages in order."""

    def __init__(self, cfg: ExperimentConfig, seed: int | None = None, stages=None, plan=STAGES):
        """``stages`` overrides the compressor stage order (e.g. detection only);
        ``plan`` is the subsequence of STAGES this pipeline will run."""
        self.cfg = cfg.validate()
        plan = tuple(plan)
        if not plan or [s for s in STAGES if s in plan] != list(plan) or set(plan) - set(STAGES):
            raise StageOrderError(f"stage plan {plan} is not an ordered subset of {STAGES}")
        self.plan = plan
        self.seed = cfg.seed if seed is None else seed
        m = cfg.model
        dt = _dtype(cfg)
        self.dtype = dt
        self.n_feature = 3 + 2 * cfg.scenario.history
        # one stream per module so that baselines with a different compressor share planner inits
        rng = np.random.default_rng([self.seed, 1])
        grid = cfg.scenario.grid
        pos_dim = 2 * 2 * 4
        self.compressor = QueryCompressor(
            grid.channels, pos_dim, rng, d=m.d, heads=m.heads, ffn=m.ffn, n_collect=m.n_collect, n_det=m.n_det,
            n_lane=m.n_lane, lane_points=m.lane_points, memory_frames=m.memory_frames,
            stages=stages or m.stage_order, memory_stages=m.memory_stages, dtype=dt,
        )
        self.tcot = TCoTPlanner(m.d, self.n_feature, m.n_long, np.random.default_rng([self.seed, 5]), d=m.d, heads=m.heads, layers=m.layers,
                                ffn=m.ffn, dtype=dt)
        self.e2e = E2EPlanner(m.d, self.n_feature, m.n_short, np.random.default_rng([self.seed, 6]), d=m.d, heads=m.heads, layers=m.layers,
                              ffn=m.ffn, dtype=dt)
        self.ego_mlp = EgoMLP(self.n_feature, m.n_long, np.random.default_rng([self.seed, 2]), dtype=dt)
        self.bank = None
        self.done: list[str] = []
        self.compressor_version = 0
        self._uid = next(_PIPELINE_IDS)
        self.report = TrainReport(self.seed, cfg.hash())

    # -- bookkeeping ------------------------------------------------------

    def module(self, name: str):
        return getattr(self, name)

    def _rng(self, tag: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 100 + tag])

    def _optimizer(self, spec: StageSpec) -> Adam:
        for name in MODULES:
            if name in spec.trainable:
                self.module(name).unfreeze()
            else:
                self.module(name).freeze()
        params = [p for name in spec.trainable for p in self.module(name).parameters()]
        return Adam(params, spec.lr, AdamConfig(clip_norm=self.cfg.train.clip_norm))

    def _unfreeze_all(self) -> None:
        for name in MODULES:
            self.module(name).unfreeze()

    def collectors(self, split: SplitData) -> np.ndarray:
        key = (self._uid, self.compressor_version)
        if split.collectors_version != key:
            split.collectors = encode_stream(self.compressor, split)
            split.collectors_version = key
        return split.collectors

    # -- bank and ego MLP -------------------------------------------------

    def build_bank(self, train: SplitData) -> None:
        samples = collect_samples(train.scenarios, self.cfg.scenario.history, self.cfg.model.n_long)
        self.bank = build_bank(samples, self.cfg.bank.k, self.seed, self.cfg.bank.max_iter)
        for model in (self.tcot, self.e2e, self.ego_mlp):
            model.set_normalization(self.bank.mean, self.bank.scale)

    def train_ego_mlp(self, train: SplitData, epochs: int | None = None, lr: float | None = None) -> list[float]:
        return train_ego_mlp(self.ego_mlp, train, epochs or self.cfg.train.ego_mlp.epochs,
                             lr or self.cfg.train.ego_mlp.lr, self.cfg.train.batch * 4, self._rng(0))

    def candidates(self, split: SplitData, frames) -> np.ndarray:
        i, t = np.array(frames).T
        return candidate_batch(self.bank, self.ego_mlp, split.feats[i, t], split.commands[i, t], self.cfg.bank.k_l)

    def anchors(self, split: SplitData, frames) -> np.ndarray:
        table = np.stack([self.bank.anchors(c, self.cfg.model.n_short) for c in COMMANDS])
        i, t = np.array(frames).T
        return table[split.commands[i, t]]

    # -- stages -----------------------------------------------------------

    def run_stage(self, name: str, train: SplitData, **kw) -> list[float]:
        if name not in STAGES:
            raise StageOrderError(f"unknown stage {name!r}")
        k = STAGES.index(name)
        if name not in self.plan:
            raise StageOrderError(f"stage {name} is not part of this pipeline's plan {self.plan}")
        missing = [s for s in self.plan[: self.plan.index(name)] if s not in self.done]
        if missing:
            raise StageOrderError(f"stage {name} needs {missing[0]} first")
        if self.bank is None and name != "CompressorPretrain":
            raise StageOrderError(f"stage {name} needs the trajectory bank")
        spec = stage_plan(self.cfg)[k]
        if "epochs" in kw:
            spec.epochs = kw.pop("epochs")
        if "lr" in kw:
            spec.lr = kw.pop("lr")
        fn = {
            "CompressorPretrain": self._compressor_pretrain,
            "AdapterTrain": self._adapter_train,
            "E2EHeadTrain": self._e2e_train,
            "JointTrain": self._joint_train,
            "SynergyFinetune": self._synergy_finetune,
        }[name]
        opt = self._optimizer(spec)
        try:
            curve = fn(spec, opt, train, self._rng(k + 1), **kw)
        except NumericsError as e:
            if str(e).startswith(f"stage {name}"):
                raise
            raise NumericsError(f"stage {name}: {e}") from e
        finally:
            self._unfreeze_all()
        self.report.curves[name] = curve
        if name not in self.done:
            self.done.append(name)
        return curve

    # -- checkpoints ------------------------------------------------------

    def save(self, directory) -> dict:
        """One checkpoint per module plus the bank; returns {name: sha256}."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        h = self.cfg.hash()
        hashes = {name: checkpoint.save(out / f"{name}.ckpt", self.module(name), h) for name in MODULES + ("ego_mlp",)}
        if self.bank is not None:
            self.bank.save(out / "bank.json")
            hashes["bank"] = hashlib.sha256((out / "bank.json").read_bytes()).hexdigest()
        (out / "stages.json").write_text(json.dumps({"done": self.done, "seed": self.seed, "ego_trained": self.ego_mlp.trained}) + "\n")
        self.report.checkpoints = hashes
        return hashes

    def load(self, directory) -> None:
        d = Path(directory)
        for name in MODULES + ("ego_mlp",):
            path = d / f"{name}.ckpt"
            if not path.exists():
                raise CheckpointError(f"missing checkpoint {path}")
            state, h = checkpoint.load(path)
            if h != self.cfg.hash():
                raise CheckpointError(f"{path} was written under config {h[:12]}, not {self.cfg.hash()[:12]}")
            self.module(name).load_state_dict(state)
        if (d / "bank.json").exists():
            self.bank = TrajectoryBank.load(d / "bank.json")
            for model in (self.tcot, self.e2e, self.ego_mlp):
                model.set_normalization(self.bank.mean, self.bank.scale)
        meta = json.loads((d / "stages.json").read_text())
        self.done = list(meta["done"])
        self.ego_mlp.trained = bool(meta["ego_trained"])
        self.compressor_version += 1

    def _compressor_pretrain(self, spec, opt, train, rng, aux_weight=None):
        aux = self.cfg.train.aux_weight if aux_weight is None else aux_weight
        comp = self.compressor
        curve = []
        for _ in range(spec.epochs):
            losses = []
            for idx in _batches(len(train.scenarios), self.cfg.train.batch, rng):
                mem = TemporalMemory(comp.memory_frames)
                for t in range(train.n_stream):
                    out = comp(train.tokens[idx, t], train.pos, mem)
                    losses.append(_step(opt, perception_loss(comp, out, train, idx, t, aux), spec.name))
                    mem.push(t * 0.5, out["collectors"].tokens.data)
            curve.append(float(np.mean(losses)))
        self.compressor_version += 1
        return curve

    def _tcot_batch_loss(self, coll, split, frames, cands, rng):
        i, t = np.array(frames).T
        scene = self.tcot.scene(coll, split.feats[i, t])
        tw = self.cfg.train
        return tcot_loss(self.tcot, scene, split.feats[i, t], cands, split.gt_long[i, t], rng,
                         tw.select_weight, tw.refine_weight, tw.teacher_frac, tw.select_tau)

    def _adapter_train(self, spec, opt, train, rng):
        coll = self.collectors(train)
        frames = train.frames(long=True)
        cands = self.candidates(train, frames)
        curve = []
        for _ in range(spec.epochs):
            losses = []
            for b in _batches(len(frames), self.cfg.train.batch, rng):
                fr = [frames[j] for j in b]
                i, t = np.array(fr).T
                loss, _ = self._tcot_batch_loss(Tensor(coll[i, t]), train, fr, cands[b], rng)
                losses.append(_step(opt, loss, spec.name))
            curve.append(float(np.mean(losses)))
        return curve

    def _e2e_batch_loss(self, coll, split, frames, anchors, synergy=None):
        i, t = np.array(frames).T
        trajs, conf = self.e2e(coll, split.feats[i, t], anchors, synergy)
        base = np.asarray(anchors) if synergy is None else np.concatenate([anchors, np.asarray(synergy)[:, None]], 1)
        return wta_loss(trajs, conf, split.gt_short[i, t], base=base)

    def _e2e_train(self, spec, opt, train, rng):
        coll = self.collectors(train)
        frames = train.frames(long=False)
        anchors = self.anchors(train, frames)
        curve = []
        for _ in range(spec.epochs):
            losses = []
            for b in _batches(len(frames), self.cfg.train.batch, rng):
                fr = [frames[j] for j in b]
                i, t = np.array(fr).T
                loss, _ = self._e2e_batch_loss(Tensor(coll[i, t]), train, fr, anchors[b])
                losses.append(_step(opt, loss, spec.name))
            curve.append(float(np.mean(losses)))
        return curve

    def _joint_train(self, spec, opt, train, rng):
        comp = self.compressor
        aux = self.cfg.train.aux_weight
        long_ok = ~np.isnan(train.gt_long[:, :, 0, 0])
        curve = []
        for _ in range(spec.epochs):
            losses = []
            for idx in _batches(len(train.scenarios), self.cfg.train.batch, rng):
                mem = TemporalMemory(comp.memory_frames)
                for t in range(train.n_stream):
                    out = comp(train.tokens[idx, t], train.pos, mem)
                    loss = perception_loss(comp, out, train, idx, t, aux)
                    coll = out["collectors"].tokens
                    if t >= train.history:
                        fr = [(i, t) for i in idx]
                        loss = loss + self._e2e_batch_loss(coll, train, fr, self.anchors(train, fr))[0]
                        sel = np.flatnonzero(long_ok[idx, t])
                        if len(sel):
                            frl = [(idx[j], t) for j in sel]
                            l2, _ = self._tcot_batch_loss(coll[sel], train, frl, self.candidates(train, frl), rng)
                            loss = loss + l2
                    losses.append(_step(opt, loss, spec.name))
                    mem.push(t * 0.5, coll.data)
            curve.append(float(np.mean(losses)))
        self.compressor_version += 1
        return curve

    def synergy_inputs(self, split: SplitData, delay: float | None = None) -> dict:
        """Aligned slow plans per fast frame under the configured schedule: {(i, t): (n_short, 2)}."""
        syn_cfg = self.cfg.synergy
        if delay is not None:
            from dataclasses import replace

            syn_cfg = replace(syn_cfg, delay=delay)
        coll = self.collectors(split)
        tick = self.cfg.scenario.tick
        launches = [(i, k) for i, s in enumerate(split.scenarios)
                    for k, _ in launch_schedule(s.n_ticks, syn_cfg, tick, self.seed)
                    if split.history <= k < split.n_stream]
        if not launches:
            return {}
        plans = self.tcot_predict(split, launches, coll)["final"]
        by = {}
        for (i, t), p in zip(launches, plans):
            by.setdefault(i, {})[t] = p
        out = {}
        fast_ticks = list(range(split.history, split.n_stream))
        for i, s in enumerate(split.scenarios):
            poses = [s.pose(t) for t in range(s.n_ticks)]
            slow = {t: Trajectory((t + 1) * s.tick, s.tick, p, poses[t]) for t, p in by.get(i, {}).items()}
            for d in schedule_scenario(s.scenario_id, poses, slow, fast_ticks, syn_cfg, s.tick,
                                       self.cfg.model.n_short, self.seed):
                if d.aligned is not None:
                    out[(i, d.tick)] = d.aligned.waypoints
        return out

    def _synergy_finetune(self, spec, opt, train, rng):
        coll = self.collectors(train)
        syn = self.synergy_inputs(train)
        frames = train.frames(long=False)
        anchors = self.anchors(train, frames)
        with_syn = np.array([f in syn for f in frames])
        curve = []
        for _ in range(spec.epochs):
            losses = []
            for b in _batches(len(frames), self.cfg.train.batch, rng):
                loss = None
                for flag in (True, False):
                    sub = b[with_syn[b] == flag]
                    if not len(sub):
                        continue
                    fr = [frames[j] for j in sub]
                    i, t = np.array(fr).T
                    s_in = np.stack([syn[f] for f in fr]) if flag else None
                    part, _ = self._e2e_batch_loss(Tensor(coll[i, t]), train, fr, anchors[sub], s_in)
                    part = part * (len(sub) / len(b))
                    loss = part if loss is None else loss + part
                losses.append(_step(opt, loss, spec.name))
            curve.append(float(np.mean(losses)))
        return curve

    # -- inference --------------------------------------------------------

    def tcot_predict(self, split: SplitData, frames, coll=None, batch: int = 64) -> dict:
        coll = self.collectors(split) if coll is None else coll
        cands = self.candidates(split, frames)
        chosen, refs, finals = [], [], []
        with no_grad():
            for b in _batches(len(frames), batch, None):
                i, t = np.array([frames[j] for j in b]).T
                scene = self.tcot.scene(Tensor(coll[i, t]), split.feats[i, t])
                logits = self.tcot.score(scene, split.feats[i, t], cands[b]).data
                c = np.array([first_argmax(r) for r in logits])
                ref = cands[b, c]
                d = self.tcot.deltas(scene, ref).data.astype(np.float64)
                chosen.append(c)
                refs.append(ref)
                finals.append(ref + d)
        return {"chosen": np.concatenate(chosen), "reference": np.concatenate(refs), "final": np.concatenate(finals),
                "candidates": cands}

    def e2e_predict(self, split: SplitData, frames, synergy: dict | None = None, batch: int = 64) -> np.ndarray:
        """Best plans (F, n_short, 2). Frames with and without synergy are batched separately."""
        coll = self.collectors(split)
        anchors = self.anchors(split, frames)
        out = np.zeros((len(frames), self.cfg.model.n_short, 2))
        has = np.array([synergy is not None and f in synergy for f in frames], dtype=bool)
        with no_grad():
            for flag in (False, True):
                rows = np.flatnonzero(has == flag)
                for b in _batches(len(rows), batch, None):
                    r = rows[b]
                    i, t = np.array([frames[j] for j in r]).T
                    s_in = np.stack([synergy[frames[j]] for j in r]) if flag else None
                    trajs, conf = self.e2e(Tensor(coll[i, t]), split.feats[i, t], anchors[r], s_in)
                    out[r] = best_plans(trajs, conf)
        return out


def train_ego_mlp(model: EgoMLP, split: SplitData, epochs: int, lr: float, batch: int, rng) -> list[float]:
    """L1 regression of the long-horizon future from the status feature alone."""
    frames = split.frames(long=True)
    i, t = np.array(frames).T
    x, y = split.feats[i, t], split.gt_long[i, t]
    if not model.trained and np.allclose(model.scale, 1.0) and np.allclose(model.mean, 0.0):
        model.set_normalization(*feature_stats(x))
    opt = Adam(model.parameters(), lr, AdamConfig(clip_norm=5.0))
    curve = []
    for _ in range(epochs):
        losses = []
        for b in _batches(len(x), batch, rng):
            pred = model(x[b])
            losses.append(_step(opt, T.l1_loss(pred, y[b]), "EgoMLP"))
        curve.append(float(np.mean(losses)))
    model.trained = True
    return curve


# ---------------------------------------------------------------------------
# no-CoT baseline


def train_direct_baseline(pipe: Pipeline, train: SplitData, epochs: int, lr: float, seed: int) -> TCoTPlanner:
    """A slow planner of the same shape whose refiner regresses from a zero reference."""
    m = pipe.cfg.model
    model = TCoTPlanner(m.d, pipe.n_feature, m.n_long, np.random.default_rng([seed, 3]), d=m.d, heads=m.heads,
                        layers=m.layers, ffn=m.ffn, dtype=pipe.dtype)
    model.set_normalization(pipe.bank.mean, pipe.bank.scale)
    coll = pipe.collectors(train)
    frames = train.frames(long=True)
    opt = Adam(model.parameters(), lr, AdamConfig(clip_norm=pipe.cfg.train.clip_norm))
    rng = np.random.default_rng([seed, 4])
    for _ in range(epochs):
        for b in _batches(len(frames), pipe.cfg.train.batch, rng):
            i, t = np.array([frames[j] for j in b]).T
            scene = model.scene(Tensor(coll[i, t]), train.feats[i, t])
            _step(opt, direct_loss(model, scene, train.gt_long[i, t]), "DirectBaseline")
    return model


def direct_predict(model: TCoTPlanner, pipe: Pipeline, split: SplitData, frames, batch: int = 64) -> np.ndarray:
    coll = pipe.collectors(split)
    out = []
    with no_grad():
        for b in _batches(len(frames), batch, None):
            i, t = np.array([frames[j] for j in b]).T
            scene = model.scene(Tensor(coll[i, t]), split.feats[i, t])
            out.append(model.deltas(scene, np.zeros((len(b), model.n_long, 2))).data.astype(np.float64))
    return np.concatenate(out)


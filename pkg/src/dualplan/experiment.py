"""End-to-end experiments: train one seed, plan the held-out split, score every pathway.

``run_seed`` is what the ablation scripts, the CLI ``train`` command and the
acceptance suite all call. It returns plain numbers so that the comparisons
(slow planner vs direct regression, shared vs detection-only compressor,
fast planner with and without synergy) can be checked across seeds.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import scenario as sc
from .config import ExperimentConfig
from .evaluation import BenchmarkReport, evaluate
from .tcot import l2_horizons
from .training import Pipeline, SplitData, direct_predict, prepare_split, train_direct_baseline

DETECTION_ONLY = ("static", "detection")

# desk-scale profile used for the trend checks: 500 held-out scenarios, about 12 min per seed on one core
ACCEPTANCE_OVERRIDES = {
    "data.n_train": 300, "data.n_val": 60, "data.n_test": 500,
    "train.compressor.epochs": 3, "train.joint.epochs": 1,
}
ACCEPTANCE_SEEDS = (0, 1, 2)


def acceptance_config() -> ExperimentConfig:
    return ExperimentConfig().with_overrides(**ACCEPTANCE_OVERRIDES)


def mean_l2(plan: np.ndarray, gt: np.ndarray) -> float:
    """L2 averaged over the 1, 2 and 3 s horizons and over frames."""
    return float(l2_horizons(plan, gt).mean())


def gt_for(split: SplitData, frames, long: bool) -> np.ndarray:
    i, t = np.array(frames).T
    return (split.gt_long if long else split.gt_short)[i, t]


def traces(split: SplitData, frames, plans: np.ndarray, provenance: str) -> list[dict]:
    return [
        {"scenario_id": split.scenarios[i].scenario_id, "tick": int(t), "provenance": provenance,
         "plan": np.asarray(p, dtype=np.float64).tolist()}
        for (i, t), p in zip(frames, plans)
    ]


def ground_truth(split: SplitData, frames, n: int = 6) -> dict:
    out = {}
    for i, t in frames:
        s = split.scenarios[i]
        out[(s.scenario_id, int(t))] = (s.future(t, n).waypoints, s.future_agent_corners(t, n))
    return out


@dataclass
class SeedResult:
    seed: int
    config_hash: str
    # held-out split
    tcot_l2: float = float("nan")
    reference_l2: float = float("nan")
    direct_l2: float = float("nan")
    e2e_l2: float = float("nan")
    async_l2: float = float("nan")
    starved_identical: bool = False
    synergy_fraction: float = 0.0
    # validation split
    val_e2e_shared: float = float("nan")
    val_e2e_detonly: float = float("nan")
    val_tcot: float = float("nan")
    val_e2e_stage3: float = float("nan")
    n_test_scenarios: int = 0
    n_test_frames: int = 0
    seconds: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class _Clock:
    def __init__(self, log):
        self.t0 = time.perf_counter()
        self.marks = {}
        self.log = log

    def mark(self, name: str) -> None:
        now = time.perf_counter()
        self.marks[name] = round(now - self.t0, 2)
        self.log(f"  {name:<22} {self.marks[name]:8.1f} s")


def build_splits(cfg: ExperimentConfig, seed: int) -> tuple[SplitData, SplitData, SplitData]:
    d = cfg.data
    ds = sc.build_dataset(cfg.scenario, seed, d.n_train, d.n_val, d.n_test)
    return tuple(prepare_split(ds.subset(name), cfg) for name in ("train", "val", "test"))


def train_full(cfg: ExperimentConfig, seed: int, train: SplitData, clock=None) -> Pipeline:
    """Bank, ego MLP and all five stages."""
    pipe = Pipeline(cfg, seed)
    mark = clock.mark if clock else (lambda _n: None)
    pipe.run_stage("CompressorPretrain", train)
    mark("CompressorPretrain")
    pipe.build_bank(train)
    pipe.report.curves["EgoMLP"] = pipe.train_ego_mlp(train)
    mark("bank+ego")
    for name in ("AdapterTrain", "E2EHeadTrain", "JointTrain", "SynergyFinetune"):
        pipe.run_stage(name, train)
        mark(name)
    return pipe


def detection_only_e2e(cfg: ExperimentConfig, seed: int, train: SplitData, bank) -> Pipeline:
    """Compressor trained on detection alone (no lane stage, no auxiliary heads), then the fast planner on top."""
    pipe = Pipeline(cfg, seed, stages=DETECTION_ONLY, plan=("CompressorPretrain", "E2EHeadTrain"))
    pipe.run_stage("CompressorPretrain", train, aux_weight=0.0)
    pipe.bank = bank
    for model in (pipe.tcot, pipe.e2e, pipe.ego_mlp):
        model.set_normalization(bank.mean, bank.scale)
    pipe.run_stage("E2EHeadTrain", train)
    return pipe


def run_seed(cfg: ExperimentConfig, seed: int, log=print, splits=None, out_dir=None,
             baselines: bool = True) -> SeedResult:
    clock = _Clock(log)
    train, val, test = splits or build_splits(cfg, seed)
    clock.mark("data")
    res = SeedResult(seed, cfg.hash())

    # stages 1-3, then record the stage-3 fast planner before joint training changes the compressor
    pipe = Pipeline(cfg, seed)
    pipe.run_stage("CompressorPretrain", train)
    clock.mark("CompressorPretrain")
    pipe.build_bank(train)
    pipe.report.curves["EgoMLP"] = pipe.train_ego_mlp(train)
    clock.mark("bank+ego")
    pipe.run_stage("AdapterTrain", train)
    clock.mark("AdapterTrain")
    pipe.run_stage("E2EHeadTrain", train)
    clock.mark("E2EHeadTrain")
    vs, vl = val.frames(long=False), val.frames(long=True)
    res.val_e2e_shared = mean_l2(pipe.e2e_predict(val, vs), gt_for(val, vs, False))
    # paired with the T-CoT validation score below: same frames, same horizons
    res.val_e2e_stage3 = mean_l2(pipe.e2e_predict(val, vl), gt_for(val, vl, True))

    if baselines:
        det = detection_only_e2e(cfg, seed, train, pipe.bank)
        res.val_e2e_detonly = mean_l2(det.e2e_predict(val, vs), gt_for(val, vs, False))
        res.curves["DetectionOnly"] = det.report.curves
        del det
        clock.mark("detection-only")

    pipe.run_stage("JointTrain", train)
    clock.mark("JointTrain")
    pipe.run_stage("SynergyFinetune", train)
    clock.mark("SynergyFinetune")
    res.curves.update(pipe.report.curves)

    res.val_tcot = mean_l2(pipe.tcot_predict(val, vl)["final"], gt_for(val, vl, True))

    # held-out evaluation
    lf = test.frames(long=True)
    gl = gt_for(test, lf, True)
    slow = pipe.tcot_predict(test, lf)
    res.tcot_l2 = mean_l2(slow["final"], gl)
    res.reference_l2 = mean_l2(slow["reference"], gl)
    if baselines:
        direct = train_direct_baseline(pipe, train, cfg.train.baseline.epochs, cfg.train.baseline.lr, seed)
        res.direct_l2 = mean_l2(direct_predict(direct, pipe, test, lf), gl)
        clock.mark("direct baseline")

    sf = test.frames(long=False)
    gs = gt_for(test, sf, False)
    plain = pipe.e2e_predict(test, sf)
    syn = pipe.synergy_inputs(test)
    fast = pipe.e2e_predict(test, sf, syn)
    starved = pipe.e2e_predict(test, sf, pipe.synergy_inputs(test, delay=float("inf")))
    res.e2e_l2 = mean_l2(plain, gs)
    res.async_l2 = mean_l2(fast, gs)
    res.starved_identical = bool(np.array_equal(starved, plain))
    res.synergy_fraction = len(syn) / len(sf)
    res.n_test_scenarios = len(test.scenarios)
    res.n_test_frames = len(lf)
    clock.mark("evaluation")

    # benchmark table on the frames every pathway can be scored on (3 s of ground truth)
    sf_index = {f: k for k, f in enumerate(sf)}
    rows = [sf_index[f] for f in lf]
    recs = (traces(test, lf, slow["final"][:, :6], "VLM") + traces(test, lf, plain[rows], "E2E")
            + traces(test, lf, fast[rows], "E2E-Async"))
    report, _ = evaluate(recs, ground_truth(test, lf), cfg.hash(), [seed])
    res.report = report.to_dict()
    clock.mark("report")
    res.seconds = dict(clock.marks)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pipe.save(out / f"seed{seed}" / "checkpoints")
        (out / f"seed{seed}" / "result.json").write_text(res.to_json() + "\n")
        (out / f"seed{seed}" / "report.csv").write_text(report.to_csv())
        (out / f"seed{seed}" / "curves.csv").write_text(pipe.report.to_csv())
    return res


def report_from(res: SeedResult) -> BenchmarkReport:
    return BenchmarkReport(**res.report)


@dataclass
class Verdicts:
    """Per-criterion outcomes across seeds for the three trend comparisons."""

    tcot_vs_direct: list
    refine_vs_reference: list
    shared_vs_detonly: list
    async_vs_plain: list

    @classmethod
    def of(cls, results) -> "Verdicts":
        return cls(
            [r.tcot_l2 <= r.direct_l2 for r in results],
            [r.tcot_l2 <= r.reference_l2 for r in results],
            [r.val_e2e_shared <= r.val_e2e_detonly for r in results],
            [r.async_l2 <= r.e2e_l2 for r in results],
        )


def summary_table(results) -> str:
    cols = ("seed", "tcot_l2", "reference_l2", "direct_l2", "e2e_l2", "async_l2", "val_e2e_shared",
            "val_e2e_detonly", "val_tcot")
    lines = [" ".join(f"{c:>15}" for c in cols)]
    for r in results:
        d = asdict(r)
        lines.append(" ".join(f"{d[c]:>15}" if c == "seed" else f"{d[c]:>15.4f}" for c in cols))
    return "\n".join(lines) + "\n"

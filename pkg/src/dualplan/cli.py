"""Command-line entry point.

    dualplan gen-data     synthetic scenarios -> dataset.jsonl (+ expert CSV)
    dualplan build-bank   dataset -> bank.json
    dualplan train        staged training, held-out evaluation, optional collector-count sweep
    dualplan simulate     both planners on the virtual clock -> trace.jsonl
    dualplan evaluate     trace + dataset -> benchmark report
    dualplan plot         trace/report -> SVG + CSV
    dualplan inspect      summarise any artifact

Every command takes --seed, --config and --out and writes manifest.json into
--out. Usage errors exit with 2; errors raised by the library exit with 1
after printing a one-line JSON record naming the module and error type.
"""
from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from . import scenario as sc
from .autograd import checkpoint
from .bank import TrajectoryBank, build_bank, collect_samples
from .config import ENV_CONFIG, ExperimentConfig, load_config, save_config
from .errors import DataError, DualPlanError
from .evaluation import evaluate, write_frame_results
from .experiment import run_seed, summary_table, traces
from .plot import bar_chart_svg, read_rows_csv, rows_csv, trajectory_svg

PROG = "dualplan"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# manifest


def write_manifest(out: Path, argv, cfg: ExperimentConfig, seed: int, dataset=None, checkpoints=None,
                   extra=None) -> dict:
    man = {
        "command_line": [PROG] + list(argv),
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": seed,
        "dataset": str(dataset) if dataset else None,
        "dataset_hash": sha256_file(dataset) if dataset else None,
        "checkpoint_hashes": checkpoints or {},
        "tool_version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        man.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(man, sort_keys=True, indent=2) + "\n")
    return man


def _dataset(args, cfg):
    ds = sc.load_dataset(args.data)
    if ds.config.to_dict() != cfg.scenario.to_dict():
        # the dataset's own scenario settings win; the rest of the config still applies
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "scenario": ds.config.to_dict()})
    return ds, cfg


def _splits(ds, cfg, names=("train", "val", "test")):
    from .training import prepare_split

    return tuple(prepare_split(ds.subset(n), cfg) for n in names)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg, seed, out):
    d = cfg.data
    n_train = d.n_train if args.n_train is None else args.n_train
    n_val = d.n_val if args.n_val is None else args.n_val
    n_test = d.n_test if args.n_test is None else args.n_test
    ds = sc.build_dataset(cfg.scenario, seed, n_train, n_val, n_test)
    path = out / "dataset.jsonl"
    digest = sc.save_dataset(path, ds)
    if args.csv:
        sc.export_expert_csv(out / "expert.csv", [ds.scenarios[i] for i in ds.split.all_ids()])
    print(f"wrote {len(ds.scenarios)} scenarios to {path} (sha256 {digest[:12]})")
    return {"dataset": path}


def cmd_build_bank(args, cfg, seed, out):
    ds, cfg = _dataset(args, cfg)
    k = cfg.bank.k if args.k is None else args.k
    samples = collect_samples(ds.subset("train"), cfg.scenario.history, cfg.model.n_long)
    bank = build_bank(samples, k, seed, cfg.bank.max_iter)
    path = out / "bank.json"
    bank.save(path)
    counts = {c.value: len(es) for c, es in bank.entries.items()}
    print(f"bank with {len(bank)} entries {counts} -> {path}")
    return {"dataset": args.data, "checkpoints": {"bank": sha256_file(path)}, "extra": {"bank_counts": counts}}


def cmd_train(args, cfg, seed, out):
    ds, cfg = _dataset(args, cfg)
    splits = _splits(ds, cfg)
    if args.sweep_collectors:
        rows = {}
        for n in args.sweep_collectors:
            c = cfg.with_overrides(**{"model.n_collect": n})
            print(f"n_collect={n}")
            res = run_seed(c, seed, splits=splits, baselines=False)
            rows[str(n)] = {"tcot_l2": res.tcot_l2, "e2e_l2": res.e2e_l2, "async_l2": res.async_l2,
                            "val_tcot": res.val_tcot, "seconds": res.seconds.get("report", 0.0)}
        cols = ("tcot_l2", "e2e_l2", "async_l2", "val_tcot", "seconds")
        (out / "sweep.csv").write_text(rows_csv(rows, cols))
        lines = [f"{'n_collect':>10}" + "".join(f"{c:>12}" for c in cols)]
        lines += [f"{n:>10}" + "".join(f"{r[c]:>12.4f}" for c in cols) for n, r in rows.items()]
        (out / "sweep.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
        return {"dataset": args.data, "extra": {"sweep": rows}}
    res = run_seed(cfg, seed, splits=splits, out_dir=out, baselines=not args.no_baselines)
    print(summary_table([res]))
    ck = json.loads((out / f"seed{seed}" / "result.json").read_text())
    hashes = {p.name: sha256_file(p) for p in sorted((out / f"seed{seed}" / "checkpoints").iterdir())}
    return {"dataset": args.data, "checkpoints": hashes, "extra": {"result": ck}}


def cmd_simulate(args, cfg, seed, out):
    from .training import Pipeline

    ds, cfg = _dataset(args, cfg)
    (split,) = _splits(ds, cfg, (args.split,))
    pipe = Pipeline(cfg, seed)
    pipe.load(args.checkpoints)
    delay = cfg.synergy.delay if args.latency is None else args.latency
    sf = split.frames(long=False)
    syn = pipe.synergy_inputs(split, delay=delay)
    fast = pipe.e2e_predict(split, sf, syn)
    recs = traces(split, sf, fast, "E2E-Async")
    if args.with_plain:
        recs += traces(split, sf, pipe.e2e_predict(split, sf), "E2E")
    if args.with_slow:
        lf = split.frames(long=True)
        recs += traces(split, lf, pipe.tcot_predict(split, lf)["final"][:, : cfg.model.n_short], "VLM")
    used = {(split.scenarios[i].scenario_id, int(t)) for i, t in syn}
    with open(out / "trace.jsonl", "w") as fh:
        for r in recs:
            r = dict(r, used_synergy=r["provenance"] == "E2E-Async" and (r["scenario_id"], r["tick"]) in used)
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    score(recs, ds, cfg, seed, out)
    print(f"{len(recs)} plans, synergy on {len(syn)}/{len(sf)} fast frames (delay {delay} s) -> {out / 'trace.jsonl'}")
    ckdir = Path(args.checkpoints)
    hashes = {p.name: sha256_file(p) for p in sorted(ckdir.iterdir()) if p.is_file()}
    return {"dataset": args.data, "checkpoints": hashes, "extra": {"latency": delay}}


def read_trace(path) -> list[dict]:
    recs = []
    with open(path) as fh:
        for no, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    recs.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataError(f"{path}: line {no}: {e.msg}") from e
    return recs


def score(recs, ds, cfg, seed, out: Path):
    """Evaluate trace records against the dataset and write report.{csv,txt,json} and frames.jsonl."""
    gt = {}
    for sid, t in sorted({(r["scenario_id"], int(r["tick"])) for r in recs}):
        if sid not in ds.scenarios:
            raise DataError(f"trace refers to unknown scenario {sid}")
        s = ds.scenarios[sid]
        gt[(sid, t)] = (s.future(t, cfg.model.n_short).waypoints, s.future_agent_corners(t, cfg.model.n_short))
    report, frames = evaluate(recs, gt, cfg.hash(), [seed])
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    write_frame_results(out / "frames.jsonl", frames)
    return report


def cmd_evaluate(args, cfg, seed, out):
    ds, cfg = _dataset(args, cfg)
    report = score(read_trace(args.trace), ds, cfg, seed, out)
    print(report.to_text(), end="")
    return {"dataset": args.data}


def cmd_plot(args, cfg, seed, out):
    written = []
    if args.trace:
        recs = read_trace(args.trace)
        ds = sc.load_dataset(args.data) if args.data else None
        frames = {}
        for r in recs:
            frames.setdefault((r["scenario_id"], int(r["tick"])), {})[r["provenance"]] = r["plan"]
        keys = sorted(frames)[: args.frames]
        if not keys:
            (out / "trajectories_empty.svg").write_text(trajectory_svg({}, "empty trace"))
            written.append("trajectories_empty.svg")
        for sid, t in keys:
            plans = {}
            if ds is not None and sid in ds.scenarios:
                plans["GT"] = ds.scenarios[sid].future(t, cfg.model.n_short).waypoints.tolist()
            plans.update(frames[(sid, t)])
            name = f"traj_{sid}_t{t:02d}.svg"
            (out / name).write_text(trajectory_svg(plans, f"{sid} tick {t}"))
            written.append(name)
    for rp in args.report or []:
        rows = read_rows_csv(Path(rp).read_text())
        stem = Path(rp).stem
        cols = list(next(iter(rows.values()))) if rows else []
        metrics = [m for m in ("l2_avg", "col_avg") if m in cols] or [c for c in cols if c != "frames"]
        for metric in metrics:
            if rows:
                name = f"{stem}_{metric}.svg"
                (out / name).write_text(bar_chart_svg(rows, metric, f"{stem}: {metric}"))
                written.append(name)
        (out / f"{stem}_bars.csv").write_text(rows_csv(rows, cols))
        written.append(f"{stem}_bars.csv")
    if not args.trace and not args.report:
        raise DataError("plot needs --trace and/or --report")
    print("\n".join(written))
    return {"extra": {"files": written}}


def cmd_inspect(args, cfg, seed, out):
    path = Path(args.path)
    if not path.exists():
        raise DataError(f"no such artifact {path}")
    info = {"path": str(path), "sha256": sha256_file(path) if path.is_file() else None}
    if path.suffix == ".ckpt":
        state, h = checkpoint.load(path)
        info.update(kind="checkpoint", config_hash=h,
                    tensors={k: list(v.shape) for k, v in state.items()},
                    parameters=int(sum(v.size for v in state.values())))
    elif path.name.endswith("bank.json"):
        bank = TrajectoryBank.load(path)
        info.update(kind="bank", entries={c.value: len(es) for c, es in bank.entries.items()})
    elif path.suffix == ".jsonl" and path.read_text().startswith('{"config"'):
        ds = sc.load_dataset(path)
        info.update(kind="dataset", scenarios=len(ds.scenarios),
                    split={k: len(getattr(ds.split, k)) for k in ("train", "val", "test")})
    elif path.suffix == ".jsonl":
        recs = read_trace(path)
        info.update(kind="trace", records=len(recs),
                    provenances=sorted({r.get("provenance", "?") for r in recs}))
    elif path.is_file() and path.suffix == ".json":
        info.update(kind="json", keys=sorted(json.loads(path.read_text())))
    else:
        info.update(kind="directory" if path.is_dir() else "file")
    print(json.dumps(info, sort_keys=True, indent=2))
    return {}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-bank": cmd_build_bank,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
    "inspect": cmd_inspect,
}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: config seed)")
    common.add_argument("--config", default=None, help=f"config JSON (default: ${ENV_CONFIG} or built-in defaults)")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")

    p = argparse.ArgumentParser(prog=PROG, description="Dual-planner synergy stack on synthetic driving scenarios.")
    p.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic scenario dataset")
    g.add_argument("--n-train", type=int, default=None, help="training scenarios (default: config)")
    g.add_argument("--n-val", type=int, default=None, help="validation scenarios (default: config)")
    g.add_argument("--n-test", type=int, default=None, help="held-out scenarios (default: config)")
    g.add_argument("--csv", action="store_true", help="also export expert trajectories as CSV")

    b = sub.add_parser("build-bank", parents=[common], help="cluster expert trajectories into the per-command bank")
    b.add_argument("--data", required=True, help="dataset.jsonl")
    b.add_argument("--k", type=int, default=None, help="entries per command (default: config, 36)")

    t = sub.add_parser("train", parents=[common], help="run all training stages and evaluate on the held-out split")
    t.add_argument("--data", required=True, help="dataset.jsonl")
    t.add_argument("--no-baselines", action="store_true", help="skip the detection-only and direct-regression baselines")
    t.add_argument("--sweep-collectors", type=int, nargs="+", default=None, metavar="N",
                   help="train once per collector count and write sweep.csv / sweep.txt")

    s = sub.add_parser("simulate", parents=[common], help="run both planners on the virtual clock")
    s.add_argument("--data", required=True, help="dataset.jsonl")
    s.add_argument("--checkpoints", required=True, help="checkpoint directory written by train")
    s.add_argument("--latency", type=float, default=None, help="slow-planner delay in seconds (default: config)")
    s.add_argument("--split", choices=("train", "val", "test"), default="test", help="which split to plan (default: test)")
    s.add_argument("--with-plain", action="store_true", help="also record the fast planner without synergy")
    s.add_argument("--with-slow", action="store_true", help="also record the slow planner's plans")

    e = sub.add_parser("evaluate", parents=[common], help="score a trace against the dataset")
    e.add_argument("--trace", required=True, help="trace.jsonl")
    e.add_argument("--data", required=True, help="dataset.jsonl")

    pl = sub.add_parser("plot", parents=[common], help="write SVG figures and CSV companions")
    pl.add_argument("--trace", default=None, help="trace.jsonl for top-down overlays")
    pl.add_argument("--data", default=None, help="dataset.jsonl (adds ground truth to overlays)")
    pl.add_argument("--report", nargs="+", default=None, help="report or sweep CSV files for bar charts")
    pl.add_argument("--frames", type=int, default=4, help="number of frames to draw (default: 4)")

    i = sub.add_parser("inspect", parents=[common], help="summarise a dataset, bank, checkpoint or trace")
    i.add_argument("path", help="artifact to inspect")
    return p


def _failing_module(exc: BaseException) -> str:
    mod = "dualplan"
    for frame in traceback.extract_tb(exc.__traceback__):
        parts = Path(frame.filename).parts
        if "dualplan" in parts:
            rel = parts[parts.index("dualplan") + 1 :]
            mod = ".".join(["dualplan", *rel])[: -len(".py")]
    return mod


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)  # exits with 2 on usage errors
    try:
        cfg = load_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        np.seterr(all="ignore")
        info = COMMANDS[args.command](args, cfg, seed, out) or {}
        write_manifest(out, argv, cfg, seed, info.get("dataset"), info.get("checkpoints"), info.get("extra"))
        if args.command == "train":
            save_config(out / "config.json", cfg)
    except DualPlanError as e:
        rec = {"module": _failing_module(e), "error": type(e).__name__, "message": str(e)}
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        return 1
    except OSError as e:
        rec = {"module": _failing_module(e), "error": "DataError", "message": str(e)}
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

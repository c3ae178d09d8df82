import json
import os
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from conftest import tiny_config
from dualplan import cli
from dualplan.config import save_config
from dualplan.plot import read_rows_csv, trajectory_svg

GOLDEN = Path(__file__).parent / "golden"
SVG = "{http://www.w3.org/2000/svg}"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Tiny dataset -> train -> simulate, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    save_config(cfg, tiny_config())
    assert run("gen-data", "--config", cfg, "--out", root / "d", "--csv") == 0
    data = root / "d" / "dataset.jsonl"
    assert run("train", "--config", cfg, "--data", data, "--out", root / "t", "--no-baselines") == 0
    ck = root / "t" / "seed0" / "checkpoints"
    assert run("simulate", "--config", cfg, "--data", data, "--checkpoints", ck, "--out", root / "s", "--with-plain") == 0
    return root, cfg, data, ck


def test_help_matches_golden(monkeypatch, capsys):
    monkeypatch.setenv("COLUMNS", "100")
    with pytest.raises(SystemExit) as e:
        cli.main(["--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    golden = GOLDEN / "help.txt"
    if os.environ.get("UPDATE_GOLDEN"):
        golden.write_text(out)
    assert out == golden.read_text()


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["simulate", "--data"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-command"])
    assert e.value.code == 2


def test_module_error_exits_1_with_structured_message(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format_version": 999}\n')
    assert run("build-bank", "--data", bad, "--out", tmp_path) == 1
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["error"] == "FormatError" and rec["module"] == "dualplan.scenario"


def test_config_from_environment(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    save_config(cfg, tiny_config(**{"data.n_train": 3, "data.n_val": 1, "data.n_test": 1}))
    monkeypatch.setenv("DUALPLAN_CONFIG", str(cfg))
    assert run("gen-data", "--out", tmp_path) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config"]["data"]["n_train"] == 3


def test_build_bank_default_size_and_manifest(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--n-train", 60, "--n-val", 1, "--n-test", 1) == 0
    data = tmp_path / "dataset.jsonl"
    assert run("build-bank", "--data", data, "--out", tmp_path / "b") == 0
    bank = json.loads((tmp_path / "b" / "bank.json").read_text())
    man = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man["bank_counts"] == {"Forward": 36, "LeftTurn": 36, "RightTurn": 36}
    assert man["dataset_hash"] == cli.sha256_file(data)
    assert man["checkpoint_hashes"]["bank"] == cli.sha256_file(tmp_path / "b" / "bank.json")
    assert bank and set(man) >= {"command_line", "config", "config_hash", "tool_version", "timestamp", "seed"}


def test_train_writes_checkpoints_and_manifest(work):
    root, *_ = work
    man = json.loads((root / "t" / "manifest.json").read_text())
    assert set(man["checkpoint_hashes"]) >= {"compressor.ckpt", "tcot.ckpt", "e2e.ckpt", "bank.json"}
    assert man["dataset_hash"] == cli.sha256_file(root / "d" / "dataset.jsonl")
    assert (root / "d" / "expert.csv").read_text().startswith("scenario_id,tick")


def test_evaluate_reproduces_stored_report(work, tmp_path):
    root, cfg, data, _ = work
    for k in range(2):
        assert run("evaluate", "--config", cfg, "--data", data, "--trace", root / "s" / "trace.jsonl",
                   "--out", tmp_path / str(k)) == 0
    for name in ("report.csv", "report.json", "frames.jsonl"):
        assert (tmp_path / "0" / name).read_bytes() == (root / "s" / name).read_bytes()
        assert (tmp_path / "1" / name).read_bytes() == (root / "s" / name).read_bytes()


def test_starved_simulation_scores_like_plain(work, tmp_path):
    root, cfg, data, ck = work
    assert run("simulate", "--config", cfg, "--data", data, "--checkpoints", ck, "--out", tmp_path,
               "--latency", 9999, "--with-plain") == 0
    rows = read_rows_csv("\n".join(ln.rsplit(",", 1)[0] for ln in (tmp_path / "report.csv").read_text().splitlines()))
    assert rows["E2E"] == rows["E2E-Async"]
    recs = [json.loads(ln) for ln in (tmp_path / "trace.jsonl").read_text().splitlines()]
    assert not any(r["used_synergy"] for r in recs)


def test_sweep_emits_table(work, tmp_path):
    root, cfg, data, _ = work
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path, "--sweep-collectors", 2, 4) == 0
    rows = read_rows_csv((tmp_path / "sweep.csv").read_text())
    assert list(rows) == ["2", "4"]
    assert len((tmp_path / "sweep.txt").read_text().splitlines()) == 3


def test_inspect_kinds(work, capsys):
    root, _, data, ck = work
    kinds = {}
    for p in (data, ck / "e2e.ckpt", ck / "bank.json", root / "s" / "trace.jsonl"):
        assert run("inspect", p, "--out", root / "i") == 0
        kinds[p.name] = json.loads(capsys.readouterr().out)["kind"]
    assert kinds == {"dataset.jsonl": "dataset", "e2e.ckpt": "checkpoint", "bank.json": "bank", "trace.jsonl": "trace"}


# ---------------------------------------------------------------------------
# plotting


def polylines(svg_text):
    root = ET.fromstring(svg_text)
    out = {}
    for pl in root.iter(SVG + "polyline"):
        pts = [tuple(map(float, p.split(","))) for p in pl.get("points").split()]
        out[pl.get("data-provenance")] = pts
    return out


def test_plot_empty_trace_is_valid_svg(tmp_path):
    trace = tmp_path / "empty.jsonl"
    trace.write_text("")
    assert run("plot", "--trace", trace, "--out", tmp_path) == 0
    root = ET.fromstring((tmp_path / "trajectories_empty.svg").read_text())
    assert root.tag == SVG + "svg"
    assert not list(root.iter(SVG + "polyline"))
    assert [t.text for t in root.iter(SVG + "text")][-4:] == ["GT", "VLM", "E2E", "E2E-Async"]


def test_plot_missing_input_exits_1(tmp_path):
    assert run("plot", "--trace", tmp_path / "nope.jsonl", "--out", tmp_path) == 1
    assert run("plot", "--out", tmp_path) == 1


def test_straight_trajectory_parses_back(tmp_path):
    plan = [[5.0 * i, 0.0] for i in range(1, 7)]
    trace = tmp_path / "t.jsonl"
    trace.write_text(json.dumps({"scenario_id": "x", "tick": 4, "provenance": "E2E", "plan": plan}) + "\n")
    assert run("plot", "--trace", trace, "--out", tmp_path) == 0
    got = polylines((tmp_path / "traj_x_t04.svg").read_text())
    assert got == {"E2E": [tuple(p) for p in plan]}


def test_overlay_transform_maps_forward_to_up():
    svg = trajectory_svg({"GT": [[10.0, 0.0]]})
    g = next(e for e in ET.fromstring(svg).iter(SVG + "g") if e.get("class") == "plans")
    a, b, c, d, e, f = map(float, g.get("transform")[7:-1].split())
    # ego (x, y) -> (a x + c y + e, b x + d y + f): forward decreases pixel y, left decreases pixel x
    assert a == 0 and d == 0 and b < 0 and c < 0


def test_bar_chart_mirrors_csv(work, tmp_path):
    root, *_ = work
    report = root / "s" / "report.csv"
    assert run("plot", "--report", report, "--out", tmp_path) == 0
    rows = read_rows_csv((tmp_path / "report_bars.csv").read_text())
    bars = {r.get("data-name"): float(r.get("data-value"))
            for r in ET.fromstring((tmp_path / "report_l2_avg.svg").read_text()).iter(SVG + "rect")}
    assert bars == {k: v["l2_avg"] for k, v in rows.items()}

import csv
import json
import math

import numpy as np
import pytest

from uasmpc.cli import bundled_scenarios, load_config, main, parse_alpha
from uasmpc.prediction import AgentState, GmmPrediction, constant_velocity_predict, dump_record


def tiny_scenario(tmp_path, name, duration=5):
    d = {
        "id": name,
        "dt": 0.3,
        "duration": duration,
        "expert_progress": 12.0,
        "routes": [{"name": "main", "waypoints": [[0.0, 0.0], [120.0, 0.0]]},
                   {"name": "far", "waypoints": [[0.0, 30.0], [120.0, 30.0]]}],
        "ego": {"position": [0.0, 0.0], "velocity": [8.0, 0.0], "heading": 0.0,
                "half_size": [2.5, 1.0], "route": "main", "goal_s": 10.0},
        "agents": [{"position": [20.0, 30.0], "velocity": [5.0, 0.0], "heading": 0.0,
                    "half_size": [2.5, 1.0], "route": "far"}],
    }
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps(d))
    return p


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_simulate_writes_three_files(tmp_path, capsys):
    sc = tiny_scenario(tmp_path, "tiny")
    assert main(["simulate", str(sc), "--out", str(tmp_path / "o")]) == 0
    for ext in ("jsonl", "csv", "svg"):
        assert (tmp_path / "o" / f"tiny.{ext}").exists()
    rows = read_csv(tmp_path / "o" / "tiny.csv")
    assert len(rows) == 1 and rows[0]["id"] == "tiny"
    lines = (tmp_path / "o" / "tiny.jsonl").read_text().splitlines()
    assert len(lines) == 5
    assert (tmp_path / "o" / "tiny.svg").read_text().startswith("<svg")


def test_simulate_alpha_zero_is_usage_error(tmp_path):
    sc = tiny_scenario(tmp_path, "tiny")
    with pytest.raises(SystemExit) as exc:
        main(["simulate", str(sc), "--alpha", "0"])
    assert exc.value.code == 2


def test_simulate_is_byte_identical(tmp_path):
    sc = tiny_scenario(tmp_path, "tiny", duration=8)
    for out in ("a", "b"):
        assert main(["simulate", str(sc), "--seed", "4", "--alpha", "1/3", "--out", str(tmp_path / out)]) == 0
    for ext in ("csv", "svg", "jsonl"):
        assert (tmp_path / "a" / f"tiny.{ext}").read_bytes() == (tmp_path / "b" / f"tiny.{ext}").read_bytes()


def test_simulate_bad_input_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"id": "x"}')
    assert main(["simulate", str(bad), "--out", str(tmp_path)]) == 1
    assert "dt" in capsys.readouterr().err


def test_sweep_grid_and_aggregate_recomputation(tmp_path):
    for name in ("s1", "s2", "s3"):
        tiny_scenario(tmp_path, name)
    out = tmp_path / "sweep"
    assert main(["sweep", "--scenarios", str(tmp_path / "s*.json"), "--seeds", "0,1",
                 "--speed-jitter", "0.5", "--out", str(out)]) == 0
    rows = read_csv(out / "sweep_runs.csv")
    assert len(rows) == 48
    assert all(r["status"] == "ok" for r in rows)
    agg = read_csv(out / "sweep_aggregate.csv")
    assert len(agg) == 8 * 4
    for a in agg:
        key = {"Progress": "progress", "Jerk": "jerk", "TTC": "min_ttc", "CL Score": "score"}[a["metric"]]
        vals = [min(float(r[key]), 10.0) for r in rows if float(r["alpha"]) == float(a["alpha"])]
        mean = sum(vals) / len(vals)
        se = math.sqrt(sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)) / math.sqrt(len(vals))
        assert float(a["mean"]) == pytest.approx(mean, abs=1e-12)
        assert float(a["stderr"]) == pytest.approx(se, abs=1e-12)
    table = (out / "sweep_table.md").read_text().splitlines()
    assert table[0] == "| Metric | 1/4 | 1/3 | 1/2 | 1 | 2 | 3 | 4 | 5 |"
    assert [line.split("|")[1].strip() for line in table[2:]] == ["Progress", "Jerk", "TTC", "CL Score"]


def test_sweep_single_run_aggregate_equals_run(tmp_path):
    tiny_scenario(tmp_path, "one")
    out = tmp_path / "sw"
    assert main(["sweep", "--scenarios", str(tmp_path / "one.json"), "--alphas", "1", "--out", str(out)]) == 0
    (row,) = read_csv(out / "sweep_runs.csv")
    agg = {a["metric"]: a for a in read_csv(out / "sweep_aggregate.csv")}
    assert float(agg["Progress"]["mean"]) == float(row["progress"])
    assert float(agg["CL Score"]["mean"]) == float(row["score"])
    assert float(agg["Jerk"]["stderr"]) == 0.0


def test_sweep_records_failures_and_continues(tmp_path):
    tiny_scenario(tmp_path, "good")
    (tmp_path / "broken.json").write_text("{not json")
    out = tmp_path / "sw"
    assert main(["sweep", "--scenarios", str(tmp_path / "*.json"), "--alphas", "1", "--out", str(out)]) == 0
    status = {r["id"]: r["status"] for r in read_csv(out / "sweep_runs.csv")}
    assert status == {"broken": "error", "good": "ok"}


def write_dump(path, records):
    path.write_text(json.dumps(records))
    return str(path)


def test_pred_metrics_closed_form_nll(tmp_path, capsys):
    means = np.arange(10, dtype=float).reshape(1, 5, 2)
    pred = GmmPrediction([1.0], means, np.broadcast_to(np.eye(2), (1, 5, 2, 2)))
    dump = write_dump(tmp_path / "d.json", [dump_record(0, t, pred, means[0]) for t in range(3)])
    assert main(["pred-metrics", dump]) == 0
    rows = {r["metric"]: r for r in csv.DictReader(capsys.readouterr().out.splitlines())}
    assert float(rows["NLL"]["mean"]) == pytest.approx(math.log(2 * math.pi), abs=1e-12)
    assert set(rows) == {"minADE5", "minFDE5", "NLL", "Entropy", "ECE"}


def test_pred_metrics_constant_velocity_entropy(tmp_path, capsys):
    recs = []
    for t in range(4):
        pred = constant_velocity_predict(AgentState([t, 0], [3, 1]), 10, 0.3)
        recs.append(dump_record("a", t, pred, pred.means[0] + 0.1))
    dump = write_dump(tmp_path / "d.json", recs)
    assert main(["pred-metrics", dump, "--out", str(tmp_path)]) == 0
    rows = {r["metric"]: r for r in read_csv(tmp_path / "pred_metrics.csv")}
    assert float(rows["Entropy"]["mean"]) == pytest.approx(-1.07, abs=0.01)


def test_pred_metrics_empty_dump_fails(tmp_path):
    assert main(["pred-metrics", write_dump(tmp_path / "d.json", [])]) != 0


def test_check_geometry_quick(capsys):
    assert main(["check-geometry", "--quick"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3


def test_config_layering(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"p": 0.8, "max_agents": 3}))
    cfg = load_config(str(cfg_path), "long", 0.95)
    assert (cfg.N, cfg.dt, cfg.p, cfg.max_agents) == (10, 0.8, 0.95, 3)
    assert load_config().dt == 0.3


def test_alpha_parsing():
    assert parse_alpha("1/3") == pytest.approx(1 / 3)
    assert parse_alpha("2") == 2.0


def test_bundled_suite_present():
    names = [p.rsplit("/", 1)[-1] for p in bundled_scenarios()]
    assert names == ["crossing.json", "lead_brake.json", "oncoming.json"]

import io
import json
import math

import numpy as np
import pytest

from ispalm import harness
from ispalm.errors import ConfigError, FormatError, UsageError
from ispalm.harness import (
    AGG_HEADER,
    RAW_HEADER,
    ExperimentConfig,
    aggregate,
    cmd_compare,
    cmd_gen_data,
    cmd_grad_check,
    cmd_run,
    read_aggregate_csv,
    read_raw_csv,
)
from ispalm.studentt import load_truth, read_tmmd


def tmm_config(tmp_path, **over):
    obj = {
        "problem": "tmm",
        "problem_params": {"n": 200, "d": 2, "K": 3},
        "data_seed": 4,
        "algorithms": [{"algorithm": "PALM"}, {"algorithm": "SPRING", "batch_size": 20}],
        "seeds": [0, 1, 2],
        "epochs": 5,
        "output_dir": str(tmp_path / "out"),
    }
    obj.update(over)
    return ExperimentConfig.from_dict(obj)


def strip_timing(text):
    lines = text.splitlines()
    col = lines[0].split(",").index("wall_seconds" if "wall_seconds" in lines[0] else "mean_wall")
    return [",".join(p for i, p in enumerate(line.split(",")) if i != col) for line in lines]


# -- configuration ---------------------------------------------------------------------------------


def test_config_defaults_and_validation(tmp_path):
    cfg = tmm_config(tmp_path)
    assert cfg.problem_params["eps"] == 1e-3
    assert [a["label"] for a in cfg.algorithms] == ["PALM", "SPRING"]
    assert all(a["epochs"] == 5 for a in cfg.algorithms)
    for bad in ({"seeds": []}, {"seeds": [1, 1]}, {"problem": "svm"}, {"algorithms": []},
                {"algorithms": [{"algorithm": "PALM", "momentum": 1}]},
                {"problem_params": {"n": 10, "colour": 1}},
                {"algorithms": [{"algorithm": "SPRING"}, {"algorithm": "SPRING"}]}):
        with pytest.raises(ConfigError):
            tmm_config(tmp_path, **bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"problem": "tmm", "algorithms": [{"algorithm": "PALM"}], "bogus": 1})
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "c.json")


def test_batch_larger_than_dataset_rejected(tmp_path):
    cfg = tmm_config(tmp_path, algorithms=[{"algorithm": "SPRING", "batch_size": 500}])
    with pytest.raises(ConfigError):
        cmd_run(cfg)


# -- data generation -------------------------------------------------------------------------------


def test_gen_data_deterministic_and_valid(tmp_path):
    obj = {"problem": "tmm", "problem_params": {"n": 10, "d": 1, "K": 1}, "data_seed": 3,
           "algorithms": [{"algorithm": "PALM"}]}
    cfg = ExperimentConfig.from_dict(obj)
    a = cmd_gen_data(cfg, tmp_path / "a")
    b = cmd_gen_data(cfg, tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()
    cfg = tmm_config(tmp_path)
    paths = cmd_gen_data(cfg)
    truth = load_truth(paths["truth"])
    assert np.all((truth.nu >= 1) & (truth.nu <= 100))
    assert abs(truth.alpha.sum() - 1.0) <= 1e-12
    assert read_tmmd(paths["dataset"]).points.shape == (200, 2)


# -- run -------------------------------------------------------------------------------------------


def test_run_file_layout_and_counts(tmp_path):
    cfg = tmm_config(tmp_path)
    summary = cmd_run(cfg)
    out = tmp_path / "out"
    raws = sorted(p.name for p in (out / "raw").iterdir())
    assert len(raws) == 6 and "SPRING_seed2.csv" in raws
    aggs = sorted(p.name for p in (out / "aggregate").iterdir())
    assert aggs == ["PALM.csv", "SPRING.csv"]
    for name in aggs:
        assert len(read_aggregate_csv(out / "aggregate" / name)) == 6
    assert (out / "aggregate" / "PALM.csv").read_text().splitlines()[0] == ",".join(AGG_HEADER)
    assert (out / "raw" / "PALM_seed0.csv").read_text().splitlines()[0] == ",".join(RAW_HEADER)
    saved = json.loads((out / "config.json").read_text())
    assert saved["algorithms"][1]["sarah_p"] == 20.0
    assert set(summary["algorithms"]) == {"PALM", "SPRING"}
    obj = [r["objective"] for r in read_raw_csv(out / "raw" / "PALM_seed1.csv")]
    assert np.all(np.diff(obj) <= 0)


def test_run_is_deterministic(tmp_path):
    cfg = tmm_config(tmp_path)
    cmd_run(cfg, tmp_path / "a")
    cmd_run(cfg, tmp_path / "b")
    for sub in ("raw", "aggregate"):
        for p in sorted((tmp_path / "a" / sub).iterdir()):
            assert strip_timing(p.read_text()) == strip_timing((tmp_path / "b" / sub / p.name).read_text())
    assert (tmp_path / "a" / "data" / "init.json").read_bytes() == (tmp_path / "b" / "data" / "init.json").read_bytes()


def test_seed_override_changes_stochastic_runs_only(tmp_path):
    cfg = tmm_config(tmp_path, seeds=[0, 5])
    cmd_run(cfg)
    raw = tmp_path / "out" / "raw"
    s0 = read_raw_csv(raw / "SPRING_seed0.csv")
    s5 = read_raw_csv(raw / "SPRING_seed5.csv")
    assert s0[-1]["objective"] != s5[-1]["objective"]
    p0 = read_raw_csv(raw / "PALM_seed0.csv")
    p5 = read_raw_csv(raw / "PALM_seed5.csv")
    assert [r["objective"] for r in p0] == [r["objective"] for r in p5]
    assert {r["seed"] for r in p5} == {5}


def test_aggregate_matches_brute_force(tmp_path):
    cfg = tmm_config(tmp_path)
    cmd_run(cfg)
    out = tmp_path / "out"
    raws = [read_raw_csv(out / "raw" / f"SPRING_seed{s}.csv") for s in (0, 1, 2)]
    agg = read_aggregate_csv(out / "aggregate" / "SPRING.csv")
    for e, row in enumerate(agg):
        vals = [r[e]["objective"] for r in raws]
        mean = sum(vals) / 3
        std = math.sqrt(sum((v - mean) ** 2 for v in vals) / 3)
        assert abs(row["mean_obj"] - mean) <= 1e-12
        assert abs(row["std_obj"] - std) <= 1e-12
        assert abs(row["mean_grad_sq"] - sum(r[e]["grad_sq_norm"] for r in raws) / 3) <= 1e-12 * max(1, row["mean_grad_sq"])


def test_aggregate_skips_failed_rows():
    ok = [{"epoch": e, "objective": 2.0 - e, "grad_sq_norm": 1.0, "wall_seconds": 0.1, "seed": 0, "status": "ok"}
          for e in range(3)]
    bad = ok[:1] + [{"epoch": 1, "objective": math.nan, "grad_sq_norm": math.nan, "wall_seconds": 0.1,
                     "seed": 1, "status": "numerical_error"}]
    rows = aggregate([ok, bad], 2)
    assert rows[0]["mean_obj"] == 2.0 and rows[0]["std_obj"] == 0.0
    assert rows[1]["mean_obj"] == 1.0 and rows[2]["mean_obj"] == 0.0


def test_quadratic_and_pnn_problems_run(tmp_path):
    q = ExperimentConfig.from_dict({"problem": "quadratic", "algorithms": [{"algorithm": "iPALM"}],
                                    "epochs": 3, "output_dir": str(tmp_path / "q")})
    cmd_run(q)
    assert len(read_aggregate_csv(tmp_path / "q" / "aggregate" / "iPALM.csv")) == 4
    p = ExperimentConfig.from_dict({"problem": "pnn", "problem_params": {"source": "digits", "widths": [16, 8, 4]},
                                    "algorithms": [{"algorithm": "iSPALM", "batch_size": 500}],
                                    "epochs": 1, "output_dir": str(tmp_path / "p")})
    summary = cmd_run(p)
    info = summary["algorithms"]["iSPALM"]["runs"]["0"]
    assert summary["data_source"] == "digits"
    assert info["orthogonality"] <= 1e-8 and 0 <= info["test_accuracy"] <= 1


# -- grad-check and compare --------------------------------------------------------------------------


def test_grad_check_passes_and_negative_control_fails():
    stream = io.StringIO()
    ok, report = cmd_grad_check(("tmm", "pnn"), {"tmm": 6, "pnn": 2}, stream=stream)
    assert ok
    assert max(max(v.values()) for v in report.values()) <= 1e-5
    assert "alpha" in stream.getvalue() and "T4" in stream.getvalue()
    ok, report = cmd_grad_check(("tmm",), {"tmm": 2}, corrupt=("mu", 1.01))
    assert not ok and report["tmm"]["mu"] > 1e-4 and report["tmm"]["nu"] <= 1e-5


def write_agg(path, means):
    rows = [{"epoch": e, "mean_obj": m, "std_obj": 0.0, "mean_grad_sq": 0.0, "mean_wall": 0.0}
            for e, m in enumerate(means)]
    path.write_text(harness.aggregate_csv_text(rows))


def test_compare_ranks_and_reach(tmp_path):
    write_agg(tmp_path / "a.csv", [10.0, 5.0, 1.0])
    write_agg(tmp_path / "b.csv", [10.0, 1.005, 1.004])
    write_agg(tmp_path / "c.csv", [10.0, 5.0, 1.0])
    res = {r["label"]: r for r in cmd_compare([tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"])}
    assert res["a"]["rank"] == res["c"]["rank"] == 1 and res["b"]["rank"] == 3
    assert res["a"]["reach_epoch"] == res["c"]["reach_epoch"] == 2
    assert res["b"]["reach_epoch"] == 1


def test_compare_errors(tmp_path):
    write_agg(tmp_path / "a.csv", [1.0])
    with pytest.raises(UsageError):
        cmd_compare([tmp_path / "a.csv"])
    (tmp_path / "bad.csv").write_text(",".join(AGG_HEADER) + "\n0,1.0,0.0,0.0,0.0\n1,oops,0,0,0\n")
    with pytest.raises(FormatError) as info:
        cmd_compare([tmp_path / "a.csv", tmp_path / "bad.csv"])
    assert "line 3" in str(info.value)
    (tmp_path / "hdr.csv").write_text("epoch,mean\n")
    with pytest.raises(FormatError):
        cmd_compare([tmp_path / "a.csv", tmp_path / "hdr.csv"])

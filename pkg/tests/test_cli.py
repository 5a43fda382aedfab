import json
import subprocess
import sys

import pytest

from ispalm.cli import main
from ispalm.harness import AGG_HEADER, aggregate_csv_text


def write_config(tmp_path, **over):
    obj = {
        "problem": "tmm",
        "problem_params": {"n": 120, "d": 2, "K": 2},
        "algorithms": [{"algorithm": "PALM"}, {"algorithm": "iSPALM", "batch_size": 12}],
        "seeds": [0, 1],
        "epochs": 2,
        "output_dir": str(tmp_path / "out"),
    }
    obj.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(obj))
    return path


def test_gen_data_and_run(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "data" / "init.json").exists()
    assert main(["run", "--config", str(cfg), "--seeds", "3,4", "--epochs", "1", "--out", str(tmp_path / "o2")]) == 0
    assert sorted(p.name for p in (tmp_path / "o2" / "raw").iterdir()) == [
        "PALM_seed3.csv", "PALM_seed4.csv", "iSPALM_seed3.csv", "iSPALM_seed4.csv"]
    assert len((tmp_path / "o2" / "aggregate" / "PALM.csv").read_text().splitlines()) == 3
    assert "iSPALM: 2 runs" in capsys.readouterr().out


def test_compare_cli(tmp_path, capsys):
    for name, v in (("x", 1.0), ("y", 2.0)):
        rows = [{"epoch": 0, "mean_obj": v, "std_obj": 0.0, "mean_grad_sq": 0.0, "mean_wall": 0.0}]
        (tmp_path / f"{name}.csv").write_text(aggregate_csv_text(rows))
    assert main(["compare", str(tmp_path / "x.csv"), str(tmp_path / "y.csv"), "--json"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert [r["label"] for r in res] == ["x", "y"]


def test_exit_codes(tmp_path, capsys):
    assert main(["compare", str(tmp_path / "only.csv")]) == 2
    bad = write_config(tmp_path, seeds=[1, 1])
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "a.csv").write_text(",".join(AGG_HEADER) + "\n0,1,0,0,0\n")
    (tmp_path / "b.csv").write_text("garbage\n")
    assert main(["compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 4
    assert main(["grad-check", "--problem", "tmm", "--instances", "2"]) == 0
    assert main(["grad-check", "--problem", "tmm", "--instances", "2", "--corrupt", "sigma"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    from ispalm import cli
    from ispalm.errors import NumericalError

    def boom(*args, **kwargs):
        raise NumericalError("nonfinite objective")

    monkeypatch.setattr(cli, "cmd_run", boom)
    assert main(["run", "--config", str(write_config(tmp_path))]) == 3


def test_aborted_run_exits_with_numerical_code(tmp_path, monkeypatch):
    from ispalm import harness
    from ispalm.optim import Trace

    def failing_run(problem, init, prox, config, callback=None):
        from ispalm.errors import NumericalError

        exc = NumericalError("nonfinite iterate")
        exc.trace = Trace(x=init)
        raise exc

    monkeypatch.setattr(harness, "run", failing_run)
    assert main(["run", "--config", str(write_config(tmp_path))]) == 3
    text = (tmp_path / "out" / "raw" / "PALM_seed0.csv").read_text()
    assert text.splitlines()[1].endswith("numerical_error")


def test_usage_errors_exit_through_argparse():
    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ispalm", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "grad-check" in proc.stdout

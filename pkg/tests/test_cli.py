import csv
import json

import pytest

from aoi_harvest.cli import COLUMNS, OUT_ENV, main

FIG4 = ["--u", "30", "--e", "2", "--eta", "0.05", "--theta", "1000", "--noise-db", "-20", "--n", "100", "--rate", "0.8"]


def read_table(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_approx_fig4_rows(tmp_path, capsys):
    code = main(["approx", *FIG4, "--pi", "1,1", "--u-alpha", "0.5,1,2", "--out", str(tmp_path)])
    assert code == 0
    rows = read_table(tmp_path / "approx.csv")
    assert [float(r["u_alpha"]) for r in rows] == [0.5, 1.0, 2.0]
    assert list(rows[0]) == COLUMNS
    assert all(float(r["avg_aoi_approx"]) > 1 for r in rows)
    assert capsys.readouterr().out.splitlines()[0] == ",".join(COLUMNS)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["parameters"]["u"] == 30 and manifest["command"] == "approx"
    assert "approx_aoi.png" in manifest["outputs"]


def test_optimize_lists_baselines(tmp_path):
    argv = ["optimize", "--u", "1000", "--e", "8", "--eta", "0.005", "--u-alpha", "1.5", "--mode", "no-capture",
            "--metric", "throughput", "--restarts", "2", "--max-evals", "150", "--out", str(tmp_path)]
    assert main(argv) == 0
    rows = read_table(tmp_path / "optimize.csv")
    assert [r["label"] for r in rows] == ["optimized", "full-battery-only", "always-transmit"]
    best = float(rows[0]["objective"])
    assert all(best >= float(r["objective"]) for r in rows[1:])
    assert (tmp_path / "optimize_policies.png").exists()


def test_bad_update_probability_names_field(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("u: 30\ne: 2\nalpha: 1.2\n")
    assert main(["approx", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "alpha" in capsys.readouterr().err


@pytest.mark.parametrize(
    "text, field",
    [
        ("channel:\n  noise_db: -20\n  noise_linear: 0.01\n", "noise"),
        ("u: 30\nbogus: 1\n", "bogus"),
        ("u: 30\n  e: [\n", ":2"),
        ("eta: 1.5\n", "eta"),
        ("pi: '0.5,0.5,0.5'\n", "pi"),
        ("u: 2.5\n", "u"),
    ],
)
def test_config_errors(tmp_path, capsys, text, field):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(text)
    assert main(["approx", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert field in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("u: 10\ne: 1\neta: 0.2\nalpha: 0.05\npi: ['1']\nchannel:\n  noise_linear: 0.001\n")
    assert main(["approx", "--config", str(cfg), "--u", "20", "--out", str(tmp_path)]) == 0
    rows = read_table(tmp_path / "approx.csv")
    assert float(rows[0]["u_alpha"]) == pytest.approx(0.05 * 20)
    params = json.loads((tmp_path / "manifest.json").read_text())["parameters"]
    assert params["channel"]["noise_linear"] == 0.001 and "noise_db" not in params["channel"]


def test_state_cap_exit_code(tmp_path):
    assert main(["exact", "--u", "1000", "--e", "8", "--pi", "always-transmit", "--out", str(tmp_path)]) == 3


def test_reruns_are_byte_identical(tmp_path):
    argv = ["sweep", *FIG4, "--u", "8", "--pi", "0,1", "--u-alpha", "0.5,1", "--outputs", "approx,exact,sim",
            "--slots", "20000", "--warmup", "1000", "--seed", "4"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([*argv, "--out", str(a)]) == 0
    assert main([*argv, "--out", str(b)]) == 0
    for name in ("sweep.csv", "sweep_aoi.png", "sweep_avp.png"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    ma.pop("argv"), mb.pop("argv")
    assert ma == mb


def test_worker_pool_keeps_order(tmp_path):
    argv = ["approx", "--u", "10", "--pi", "1,1", "--pi", "0,1", "--u-alpha", "0.5,1,1.5", "--no-figures"]
    assert main([*argv, "--out", str(tmp_path / "serial")]) == 0
    assert main([*argv, "--workers", "2", "--out", str(tmp_path / "pool")]) == 0
    assert (tmp_path / "serial" / "approx.csv").read_text() == (tmp_path / "pool" / "approx.csv").read_text()


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert main(["steady-state", "--u", "5", "--e", "2", "--pi", "full-battery-only"]) == 0
    rows = read_table(tmp_path / "env" / "steady-state.csv")
    assert sum(float(r["nu"]) for r in rows) == pytest.approx(1.0)


def test_simulate_and_validate(tmp_path):
    argv = ["--u", "5", "--u-alpha", "1", "--slots", "30000", "--warmup", "1000", "--noise-db", "-30", "--no-figures"]
    assert main(["simulate", *argv, "--pi", "1,1", "--out", str(tmp_path)]) == 0
    row = read_table(tmp_path / "simulate.csv")[0]
    assert float(row["sim_stderr"]) > 0 and row["seed"] == "0"
    code = main(["validate", *argv, "--out", str(tmp_path)])
    rows = read_table(tmp_path / "validate.csv")
    assert len(rows) == 2 and {r["ok"] for r in rows} <= {"true", "false"}
    assert code == (0 if all(r["ok"] == "true" for r in rows) else 1)


def test_sweep_rejects_unknown_output(tmp_path):
    assert main(["sweep", "--outputs", "approx,magic", "--out", str(tmp_path)]) == 2

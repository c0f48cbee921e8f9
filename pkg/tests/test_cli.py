import copy
import csv
import json

import pytest

from ftlab.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_STAT, Checks, main, parse_sweep
from ftlab.config import read_config


def run(tmp_path, name, *argv):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, out.read_bytes() if out.exists() else b""


def test_verify_bundled(capsys):
    assert main(["verify"]) == EXIT_OK
    err = capsys.readouterr().err
    assert "FAIL" not in err and "dilated classical preset" in err


def test_verify_reports_incomplete_povm(tmp_path, capsys):
    doc = copy.deepcopy(read_config("qubit-classical-single"))
    doc["stages"][0]["kraus"]["1"] = {"diag": ["sqrt(epsilon)", "0.5"]}
    f = tmp_path / "bad.json"
    f.write_text(json.dumps(doc))
    assert main(["verify", "--config", str(f), "--skip-global", "--json", str(tmp_path / "v.json")]) == EXIT_CONFIG
    assert "not complete" in capsys.readouterr().err
    rep = json.loads((tmp_path / "v.json").read_text())
    assert rep["exit_code"] == EXIT_CONFIG


def test_verify_tables(tmp_path):
    code, data = run(tmp_path, "t.csv", "verify-tables", "--epsilon", "0.3")
    assert code == EXIT_OK
    rows = list(csv.DictReader(data.decode().splitlines()))
    assert len(rows) == 8 + 16 + 96 + 96
    first = rows[0]
    assert first["P_formula"] == "p0*(1-eps)*p0" and float(first["residual"]) < 1e-15


def test_discrete_output_independent_of_threads(tmp_path):
    args = ["run-discrete", "--config", "fig1b-classical", "--sweep", "epsilon=0.1", "--n-traj", "5000", "--seed", "3"]
    c1, a = run(tmp_path, "a.csv", *args, "--threads", "1")
    c2, b = run(tmp_path, "b.csv", *args, "--threads", "3")
    assert c1 == c2 == EXIT_OK
    assert a == b
    rows = list(csv.DictReader(a.decode().splitlines()))
    assert [r["source"] for r in rows] == ["exact", "sampled"]
    assert rows[0]["info_kind"] == "i_te"


def test_seed_from_environment(tmp_path, monkeypatch):
    args = ["run-discrete", "--config", "qubit-quantum-single", "--sweep", "epsilon=0.2", "--n-traj", "300"]
    _, flag = run(tmp_path, "a.csv", *args, "--seed", "9")
    monkeypatch.setenv("FTLAB_SEED", "9")
    _, env = run(tmp_path, "b.csv", *args)
    _, other = run(tmp_path, "c.csv", *args, "--seed", "1")
    assert flag == env and flag != other


def test_bad_environment_value(tmp_path, monkeypatch):
    monkeypatch.setenv("FTLAB_THREADS", "many")
    code, _ = run(tmp_path, "a.csv", "run-discrete", "--config", "qubit-quantum-single", "--sweep", "none")
    assert code == EXIT_CONFIG


def test_config_errors(tmp_path):
    assert run(tmp_path, "a.csv", "run-discrete", "--config", "nope")[0] == EXIT_CONFIG
    assert run(tmp_path, "a.csv", "run-continuous", "--config", "qubit-quantum-single")[0] == EXIT_CONFIG
    assert run(tmp_path, "a.csv", "run-discrete", "--config", "qubit-quantum-single",
               "--sweep", "epsilon=a,b")[0] == EXIT_CONFIG
    assert run(tmp_path, "a.csv", "run-discrete", "--config", "qubit-quantum-single",
               "--sweep", "bogus=1")[0] == EXIT_CONFIG


def test_step_cap_is_config_error(tmp_path):
    code, _ = run(tmp_path, "a.csv", "run-continuous", "--config", "fig2-continuous", "--sweep", "kappa_m=5",
                  "--n-traj", "10", "--dt", "1.0")
    assert code == EXIT_CONFIG


def test_statistical_band_exit(tmp_path):
    code, data = run(tmp_path, "a.csv", "run-continuous", "--config", "fig2-continuous", "--sweep", "kappa_m=1",
                     "--set", "steps=100", "--n-traj", "200", "--k-se", "0")
    assert code == EXIT_STAT
    assert len(data.decode().splitlines()) == 3


def test_sample_jsonl(tmp_path):
    code, data = run(tmp_path, "s.jsonl", "sample", "--config", "fig1c-quantum", "--n-traj", "4", "--start", "10")
    assert code == EXIT_OK
    recs = [json.loads(x) for x in data.decode().splitlines()]
    assert [r["index"] for r in recs] == [10, 11, 12, 13]


def test_postselect(tmp_path):
    code, data = run(tmp_path, "p.csv", "postselect", "--config", "qubit-classical-single", "--n-traj", "3000")
    assert code == EXIT_OK
    assert data.decode().splitlines()[0] == "history,runs,accepted,rate,rate_se,p_tr"


def test_sweep_parsing():
    doc = read_config("fig2-continuous")
    assert parse_sweep(None, doc) == ("kappa_m", [0.1, 0.2, 0.5, 1.0, 2.0, 5.0])
    assert parse_sweep("kappa_m=1,2", doc) == ("kappa_m", [1.0, 2.0])
    assert parse_sweep("none", doc) == (None, [None])


def test_check_codes():
    c = Checks()
    c.add("x", "small", 1e-14, 1e-12)
    assert c.code == EXIT_OK
    c.add("x", "large", 1.0, 1e-12)
    assert c.code == EXIT_NUMERIC
    c.add("x", "nan", float("nan"), 1.0)
    assert not c.items[-1]["ok"]


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("run-discrete", "run-continuous", "verify", "verify-tables"):
        assert cmd in out

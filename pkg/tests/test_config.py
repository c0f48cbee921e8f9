import copy
import json
import math

import pytest

from ftlab import ConfigError, load_protocol
from ftlab.config import build_protocol, bundled_names, evaluate, read_config


@pytest.mark.parametrize("name", bundled_names())
def test_bundled_configs_load(name):
    p = load_protocol(name)
    assert p.dim == 2


def test_single_classical_setup():
    p = load_protocol("qubit-classical-single")
    assert p.mode == "discrete" and p.beta == 1.0
    assert len(p.measure_indices) == 1
    k = p.stages[0].kraus
    assert k.outcomes == ("0", "1")
    assert abs(k["0"][1, 1] ** 2 - 0.1) < 1e-15


def test_continuous_parameters():
    doc = read_config("fig2-continuous")
    prm = doc["parameters"]
    assert prm["tau"] == 10 and prm["omega"] == 0.3 and prm["chi"] == 0.04 and prm["epsilon"] == 0.2
    assert prm["steps"] == 1000
    p = load_protocol(doc)
    assert abs(p.tau - 10) < 1e-15 and abs(p.dt - 0.01) < 1e-15
    down = p.controls[0].channels[0].operator
    assert abs(down[0, 1] ** 2 - 0.116 * 0.3) < 1e-15


def test_extends_merges_parameters():
    doc = read_config("fig1c-quantum")
    assert doc["parameters"]["kappa_dt"] == 0.2
    assert doc["parameters"]["beta_omega"] == 1.0
    assert "extends" not in doc


def test_incomplete_povm_rejected():
    doc = copy.deepcopy(read_config("qubit-classical-single"))
    doc["stages"][0]["kraus"]["1"] = {"diag": ["sqrt(epsilon)", "0.5"]}
    with pytest.raises(ConfigError, match="not complete"):
        build_protocol(doc)


def test_unknown_override():
    with pytest.raises(ConfigError):
        load_protocol("qubit-classical-single", {"no_such": 1.0})


def test_circular_parameters():
    doc = copy.deepcopy(read_config("qubit-classical-single"))
    doc["parameters"].update(x="y+1", y="x+1")
    with pytest.raises(ConfigError):
        build_protocol(doc)


def test_detailed_balance_violation_reported():
    doc = copy.deepcopy(read_config("qubit-classical-single"))
    doc["channels"][1]["operator"] = [[0, 0], ["sqrt(kappa)", 0]]
    with pytest.raises(ConfigError, match="detailed balance"):
        build_protocol(doc)


def test_missing_config():
    with pytest.raises(ConfigError):
        read_config("does-not-exist")


def test_file_path(tmp_path):
    doc = read_config("qubit-quantum-single")
    f = tmp_path / "q.json"
    f.write_text(json.dumps(doc))
    assert load_protocol(str(f), {"epsilon": 0.3}).stages[0].kraus.outcomes == ("+", "-")


def test_expressions():
    assert evaluate("sqrt(1-e0)*2", {"e0": 0.36}) == pytest.approx(1.6)
    assert evaluate("pi", {}) == math.pi
    with pytest.raises(ConfigError):
        evaluate("__import__('os')", {})

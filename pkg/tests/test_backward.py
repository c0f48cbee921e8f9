import copy
import dataclasses
import itertools
import math

import numpy as np
import pytest

from ftlab import load_protocol
from ftlab.backward import (
    backward_distribution,
    continuous_passes,
    history_table,
    postselection_simulate,
    validate_backward_measurement,
)
from ftlab.config import read_config
from ftlab.engine import StepKit
from ftlab.oracle import enumerate_protocol, enumerate_single_measurement
from ftlab.propagation import forward_weight, monitor_ops, p_forward_outcomes, p_tr_outcomes, reversed_weight
from ftlab.protocol import Evolve, FeedbackAction, Measure, reverse_protocol
from ftlab.qdyn import KrausSet
from ftlab.thermo import conditional_tree, information_by_history, log_ratio
from known_values import P0, P1, classical_single_rows


def test_projective_set_is_valid():
    r = validate_backward_measurement(KrausSet.from_dict({"0": np.diag([1.0, 0]), "1": np.diag([0, 1.0])}))
    assert r.element_valid and r.unital_complete and not r.dilation_required


@pytest.mark.parametrize("name", ["qubit-classical-single", "qubit-quantum-single"])
def test_measurement_sets_are_unital(name):
    k = load_protocol(name, {"epsilon": 0.23}).stages[0].kraus
    r = validate_backward_measurement(k)
    assert r.unital_complete and r.unitality_residual < 1e-12


def test_amplitude_damping_needs_dilation():
    g = 0.3
    k = KrausSet(("0", "1"), (np.array([[1, 0], [0, math.sqrt(1 - g)]]), np.array([[0, math.sqrt(g)], [0, 0]])))
    r = validate_backward_measurement(k)
    assert r.element_valid and r.dilation_required


def test_backward_distribution_from_hand_columns():
    eps = 0.15
    rows = enumerate_single_measurement("classical", 1.0, eps)
    pb = backward_distribution(rows)
    assert abs(pb.sum() - 1) < 1e-12
    ptr_y = (1 - eps) * P0 + eps * P1
    py0 = ptr_y
    hand = {(a, y, f, q): ptr for a, y, f, q, _, _, ptr in classical_single_rows(eps)}
    for r, b in zip(rows, pb):
        py = py0 if r.y == ("0",) else 1 - py0
        assert abs(b - hand[(r.a, r.y[0], r.f, int(round(r.q)))] * py / ptr_y) < 1e-12


def test_deterministic_protocol_concentrates():
    doc = copy.deepcopy(read_config("qubit-classical-single"))
    doc["stages"] = doc["stages"][:1]
    doc["initial"] = {"type": "pure", "vector": [1, 0]}
    doc["reference"] = {"type": "initial"}
    p = load_protocol(doc, {"epsilon": 0.0})
    rows = enumerate_protocol(p)
    pb = backward_distribution(rows)
    live = [(r, b) for r, b in zip(rows, pb) if b > 0]
    assert len(live) == 1
    r, b = live[0]
    assert (r.a, r.y, r.f) == (0, ("0",), 0) and abs(b - 1) < 1e-15


@pytest.mark.parametrize("name", ["qubit-classical-double", "qubit-quantum-double"])
def test_history_table_matches_direct_weights(name):
    p = load_protocol(name, {"epsilon": 0.2})
    t = history_table(p, 0.05)
    for k, y in enumerate(t["histories"]):
        want = log_ratio(p_forward_outcomes(p, y, "grid", 0.05), p_tr_outcomes(p, y, "grid", 0.05))
        assert abs(t["sigma_cg"][k] - want) < 1e-12


def check_rates(rows, k=4.0):
    for r in rows:
        assert abs(r.rate - r.p_tr) <= k * r.se, (r.y, r.rate, r.p_tr)


def test_postselection_projective():
    rows = postselection_simulate(load_protocol("qubit-classical-single", {"epsilon": 0.0}), 6000, seed=3)
    for r in rows:
        assert abs(r.p_tr - P0) < 1e-12
    check_rates(rows)


def test_postselection_uninformative():
    rows = postselection_simulate(load_protocol("qubit-quantum-single", {"epsilon": 0.5}), 6000, seed=4)
    for r in rows:
        assert abs(r.p_tr - 0.5) < 1e-12
    check_rates(rows)


def test_postselection_trivial_measurement():
    doc = copy.deepcopy(read_config("qubit-classical-single"))
    doc["stages"][0] = {"type": "measure", "kraus": {"only": {"diag": [1, 1]}}}
    rows = postselection_simulate(load_protocol(doc), 500)
    assert len(rows) == 1 and rows[0].accepted == rows[0].runs and abs(rows[0].p_tr - 1) < 1e-12


def test_postselection_two_measurements():
    rows = postselection_simulate(load_protocol("qubit-quantum-double", {"epsilon": 0.1}), 8000, seed=6, dt=0.01)
    assert len(rows) == 4
    check_rates(rows)


def test_continuous_passes_equal_discrete_equivalent():
    """A monitored evolution equals a sequence of one-step evolves each followed by a click/no-click measurement."""
    n = 4
    p = load_protocol("fig2-continuous", {"kappa_m": 3.0, "steps": n, "tau": 0.4})
    h = p.tau / n
    k0m, dets, _ = monitor_ops(p.monitor.scaled(), h)
    ks = KrausSet(("none", "click"), (k0m, dets[0]))
    fb = {"click": FeedbackAction(p.monitor.feedback["click"].unitary)}
    stages = []
    for _ in range(n):
        stages += [Evolve(h), Measure(ks, fb)]
    q = dataclasses.replace(p, stages=tuple(stages), monitor=None, dt=h, _cache={})
    kit = StepKit(p).prepare()
    hs = list(itertools.product([-1, 0], repeat=n))
    lp, lptr, ite = continuous_passes(p, kit, np.array(hs, dtype=np.int16), np.zeros(len(hs), int))
    info = information_by_history(conditional_tree(q, "grid"))
    for j, hh in enumerate(hs):
        y = tuple("click" if v == 0 else "none" for v in hh)
        assert abs(math.log(forward_weight(q, y, "grid")[0]) - lp[j]) < 1e-12
        assert abs(math.log(reversed_weight(reverse_protocol(q, y), "grid")[0]) - lptr[j]) < 1e-12
        assert abs(info[y] - ite[j]) < 1e-12
    assert abs(np.exp(lp).sum() - 1) < 1e-12

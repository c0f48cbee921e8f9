import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftlab import load_protocol
from ftlab.config import read_config
from ftlab.oracle import qubit_propagator_elements
from ftlab.propagation import (
    Propagator,
    average_final_state,
    check_step_cap,
    forward_weight,
    p_forward_outcomes,
    p_tr_outcomes,
)
from ftlab.protocol import ProtocolError
from known_values import P0, P1

DISCRETE = ["qubit-classical-single", "qubit-quantum-single", "qubit-classical-double", "qubit-quantum-double",
            "fig1c-classical", "fig1c-quantum"]


@given(st.floats(0.0, 0.5))
def test_single_outcome_probabilities(eps):
    c = load_protocol("qubit-classical-single", {"epsilon": eps})
    assert abs(p_forward_outcomes(c, "0") - ((1 - eps) * P0 + eps * P1)) < 1e-12
    q = load_protocol("qubit-quantum-single", {"epsilon": eps})
    assert abs(p_forward_outcomes(q, "+") - 0.5) < 1e-12
    assert abs(p_forward_outcomes(q, "-") - 0.5) < 1e-12


@given(st.floats(0.0, 0.5))
def test_single_backward_probabilities(eps):
    want = (1 - eps) * P0 + eps * P1
    c = load_protocol("qubit-classical-single", {"epsilon": eps})
    q = load_protocol("qubit-quantum-single", {"epsilon": eps})
    for y in "01":
        assert abs(p_tr_outcomes(c, y) - want) < 1e-12
    for y in "+-":
        assert abs(p_tr_outcomes(q, y) - want) < 1e-12


@pytest.mark.parametrize("name", DISCRETE)
def test_outcome_probabilities_sum_to_one(name):
    p = load_protocol(name, {"epsilon": 0.17})
    assert abs(sum(p_forward_outcomes(p, y) for y in p.all_histories()) - 1) < 1e-12


def test_no_measurement_backward_weight_is_one():
    doc = copy.deepcopy(read_config("qubit-classical-double"))
    doc["stages"] = [{"type": "evolve", "duration": 0.7}]
    p = load_protocol(doc)
    assert abs(p_tr_outcomes(p, ()) - 1) < 1e-12


@given(st.floats(0.05, 3.0), st.floats(0.0, 3.0))
def test_exact_evolution_matches_closed_form(kdt, bw):
    p = load_protocol("qubit-classical-double", {"kappa_dt": kdt, "beta_omega": bw})
    s = Propagator(p, "exact").evolve(1, 0)
    e = qubit_propagator_elements(bw, 1.0, kdt)
    for (l, m, l2, m2), v in e.items():
        assert abs(s[l2 * 2 + m2, l * 2 + m] - v) < 1e-12


def test_propagator_limits():
    e = qubit_propagator_elements(1.0, 1.0, 0.0)
    assert e[(0, 0, 0, 0)] == 1 and e[(1, 1, 0, 0)] == 0 and e[(0, 1, 0, 1)] == 1
    e = qubit_propagator_elements(1.0, 1.0, 60.0)
    assert abs(e[(0, 0, 0, 0)] - P0) < 1e-12 and abs(e[(1, 1, 0, 0)] - P0) < 1e-12
    assert abs(e[(0, 0, 1, 1)] - P1) < 1e-12


def test_coherence_magnitude():
    bw, k, t = 1.0, 0.7, 1.3
    e = qubit_propagator_elements(bw, k, t)
    assert abs(abs(e[(0, 1, 0, 1)]) - np.exp(-k * (1 + np.exp(-bw)) * t / 2)) < 1e-15


def test_grid_approaches_exact():
    p = load_protocol("qubit-quantum-double", {"epsilon": 0.2})
    y = ("+", "-")
    ex = forward_weight(p, y, "exact")[0]
    errs = [abs(forward_weight(p, y, "grid", dt)[0] - ex) for dt in (0.05, 0.025)]
    assert errs[1] < errs[0] < 1e-2


def test_step_cap():
    p = load_protocol("fig2-continuous", {"kappa_m": 5.0})
    check_step_cap(p)
    with pytest.raises(ProtocolError, match="reduce dt"):
        check_step_cap(p, 0.5)


def test_single_final_state_is_thermal():
    p = load_protocol("qubit-quantum-single", {"epsilon": 0.3})
    assert np.abs(average_final_state(p).mat - np.diag([P0, P1])).max() < 1e-12

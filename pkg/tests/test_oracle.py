import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftlab import load_protocol
from ftlab.oracle import (
    DilatedModel,
    coarse_grained_from_rows,
    dilated_verify,
    enumerate_protocol,
    enumerate_single_measurement,
    enumerate_two_measurements,
    microreversibility_residual,
    random_dilated_preset,
    row_summary,
    single_measurement_closed_forms,
)
from ftlab.qdyn import KrausSet
from known_values import DOUBLE, H_P0, P0, P1, SINGLE, classical_single_rows, quantum_single_rows

EPS_GRID = [0.0, 0.1, 0.3, 0.5]


def keyed(rows):
    return {(r.a, r.y[0], r.f, int(round(r.q))): r for r in rows}


@pytest.mark.parametrize("eps", EPS_GRID)
def test_classical_rows_match_hand_table(eps):
    got = keyed(enumerate_single_measurement("classical", 1.0, eps))
    want = classical_single_rows(eps)
    assert len(got) == len(want) == 8
    for a, y, f, q, p, ems, ptr in want:
        r = got[(a, y, f, q)]
        assert abs(r.probability - p) < 1e-12
        assert abs(r.exp_minus_sigma - ems) < 1e-12
        assert abs(r.p_tr - ptr) < 1e-12


@pytest.mark.parametrize("eps", EPS_GRID)
def test_quantum_rows_match_hand_table(eps):
    got = keyed(enumerate_single_measurement("quantum", 1.0, eps))
    want = quantum_single_rows(eps)
    assert len(got) == len(want) == 16
    for a, y, f, q, p, ems, ptr in want:
        r = got[(a, y, f, q)]
        assert abs(r.probability - p) < 1e-12
        assert abs(r.exp_minus_sigma - ems) < 1e-12
        assert abs(r.p_tr - ptr) < 1e-12


def test_named_rows():
    r = keyed(enumerate_single_measurement("classical", 1.0, 0.2))[(1, "0", 0, 1)]
    assert abs(r.exp_minus_sigma - P0 / P1 * math.exp(-1)) < 1e-15
    r = keyed(enumerate_single_measurement("quantum", 1.0, 0.2))[(0, "+", 1, -1)]
    assert abs(r.exp_minus_sigma - P1 / P0 * math.e) < 1e-15
    r = keyed(enumerate_single_measurement("quantum", 1.0, 0.2))[(1, "+", 1, -1)]
    assert abs(r.probability - P1 * 0.8 * P1 / 2) < 1e-15 and abs(r.p_tr - P1 * 0.8 * P0 / 2) < 1e-15


def test_projective_rows_vanish():
    rows = enumerate_single_measurement("classical", 1.0, 0.0)
    zero = [r for r in rows if (int(r.y[0]) != r.a)]
    assert len(zero) == 4 and all(r.probability == 0 for r in zero)


@given(st.sampled_from(["classical", "quantum"]), st.floats(0.0, 0.5), st.floats(0.1, 3.0))
def test_single_sums(variant, eps, bw):
    s = row_summary(enumerate_single_measurement(variant, bw, eps), bw)
    assert abs(s["total_probability"] - 1) < 1e-12
    assert abs(s["exp_minus_sigma_minus_cg"] - 1) < 1e-12
    assert abs(s["backward_total"] - 1) < 1e-12
    assert s["detailed_residual"] < 1e-15
    cf = single_measurement_closed_forms(variant, bw, eps)
    assert abs(s["sigma"] - cf["sigma"]) < 1e-12
    assert abs(s["sigma_cg"] - cf["sigma_cg"]) < 1e-12
    assert s["sigma"] >= s["sigma_cg"] - 1e-12


def test_frozen_single_averages():
    for v, want in SINGLE.items():
        cf = single_measurement_closed_forms(v, 1.0, 0.1)
        assert abs(cf["sigma"] - want["sigma"]) < 1e-12
        assert abs(cf["sigma_cg"] - want["sigma_cg"]) < 1e-12
        assert abs(cf["mutual_information"] - want["i_mi"]) < 1e-12


def test_projective_saturation():
    cf = single_measurement_closed_forms("classical", 1.0, 0.0)
    assert abs(cf["sigma"] - (-0.26894)) < 1e-5
    assert abs(cf["sigma"] - cf["sigma_cg"]) < 1e-10
    assert abs(cf["mutual_information"] - H_P0) < 1e-12


def test_uninformative_measurement():
    cf = single_measurement_closed_forms("classical", 1.0, 0.5)
    assert abs(cf["sigma_cg"]) < 1e-12 and abs(cf["mutual_information"]) < 1e-12


def test_coarse_grained_by_history():
    eps = 0.25
    cg = coarse_grained_from_rows(enumerate_single_measurement("classical", 1.0, eps))
    ptr = (1 - eps) * P0 + eps * P1
    py0 = (1 - eps) * P0 + eps * P1
    assert abs(cg[("0",)] - math.log(py0 / ptr)) < 1e-12
    assert abs(cg[("1",)] - math.log((1 - py0) / ptr)) < 1e-12


@pytest.mark.parametrize("variant", ["classical", "quantum"])
@pytest.mark.parametrize("kdt", [0.2, 1.0])
def test_two_measurement_rows(variant, kdt):
    rows = enumerate_two_measurements(variant, 1.0, 0.1, kdt)
    assert len(rows) == 96
    s = row_summary(rows)
    assert abs(s["total_probability"] - 1) < 1e-12
    assert abs(s["exp_minus_sigma_minus_cg"] - 1) < 1e-10
    assert s["detailed_residual"] < 1e-12
    sig, cg = DOUBLE[(variant, kdt)]
    assert abs(s["sigma"] - sig) < 1e-12 and abs(s["sigma_cg"] - cg) < 1e-12


@pytest.mark.parametrize("variant", ["classical", "quantum"])
def test_generic_enumeration_matches_closed_forms(variant):
    for name, closed in ((f"qubit-{variant}-single", enumerate_single_measurement(variant, 1.0, 0.3)),
                         (f"qubit-{variant}-double", enumerate_two_measurements(variant, 1.0, 0.3, 1.0))):
        gen = {(r.a, r.y, r.f, r.heats): r for r in enumerate_protocol(load_protocol(name, {"epsilon": 0.3}))}
        for r in closed:
            g = gen.get((r.a, r.y, r.f, r.heats))
            gp = g.probability if g else 0.0
            gt = g.p_tr if g else 0.0
            assert abs(gp - r.probability) < 1e-12 and abs(gt - r.p_tr) < 1e-12


@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 4]))
def test_microreversibility(seed, d):
    rng = np.random.default_rng(seed)
    pieces = []
    for _ in range(3):
        a = rng.normal(size=(d, d))
        pieces.append((a + a.T, rng.uniform(0.1, 1.0)))
    assert microreversibility_residual(pieces) < 1e-8


def test_reversed_schedule_order_matters():
    rng = np.random.default_rng(3)
    hs = [(lambda a: a + a.T)(rng.normal(size=(2, 2))) for _ in range(2)]
    u = microreversibility_residual([(hs[0], 0.5), (hs[1], 0.9)])
    from ftlab.oracle import piecewise_unitary
    # running the pieces in forward order instead is not the inverse
    wrong = np.linalg.norm(np.conj(piecewise_unitary([(hs[0], 0.5), (hs[1], 0.9)])) - piecewise_unitary(
        [(hs[0], 0.5), (hs[1], 0.9)]).conj().T)
    assert u < 1e-12 and wrong > 1e-3


@pytest.mark.parametrize("variant", ["classical", "quantum"])
@pytest.mark.parametrize("seed", [0, 1])
def test_dilated_presets(variant, seed):
    rep = dilated_verify(random_dilated_preset(seed, variant=variant, n_measurements=2))
    assert rep.residual <= 1e-10
    assert abs(rep.total_probability - 1) < 1e-10
    assert abs(rep.mean_heat - rep.reservoir_heat) < 1e-10


def swap_model(beta=1.0, t=0.8):
    hs = np.diag([-0.5, 0.5]).astype(complex)
    er = np.array([0.0, 1.0])
    h0 = np.kron(hs, np.eye(2)) + np.kron(np.eye(2), np.diag(er))
    swap = np.zeros((4, 4))
    swap[1, 2] = swap[2, 1] = 1.0  # |0,1> <-> |1,0>
    proj = KrausSet.from_dict({"0": np.diag([1.0, 0.0]), "1": np.diag([0.0, 1.0])})
    return DilatedModel(hs, er, beta, (proj,), lambda n, y: [(h0 + 0.6 * swap, t)])


def test_swap_reservoir():
    rep = dilated_verify(swap_model())
    assert rep.rows == 32  # (a, E0, y, f, E1)
    assert rep.residual <= 1e-10
    assert abs(rep.mean_heat - rep.reservoir_heat) < 1e-12


def test_identity_dilation():
    hs = np.diag([-0.5, 0.5]).astype(complex)
    m = DilatedModel(hs, np.array([0.0, 1.0]), 1.0, (), lambda n, y: [(np.zeros((4, 4)), 1.0)])
    rep = dilated_verify(m)
    assert rep.residual == 0
    assert abs(rep.exp_minus_sigma - 1) < 1e-12

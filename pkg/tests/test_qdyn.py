import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftlab.qdyn import (
    DensityMatrix,
    KrausSet,
    QdynError,
    apply_kraus,
    dag,
    detailed_balance_residual,
    effective_hamiltonian,
    eigenbasis,
    entropy_stack,
    evolve_nonhermitian,
    lindbladian,
    qubit_hamiltonian,
    qubit_ops,
    reversed_kraus,
    thermal_qubit_channels,
    thermal_state,
    time_reverse,
    validate_density,
    von_neumann_entropy,
)
from known_values import H_P0, P0, P1

O = qubit_ops()


def classical_set(eps):
    return KrausSet.from_dict({"0": np.diag([math.sqrt(1 - eps), math.sqrt(eps)]),
                               "1": np.diag([math.sqrt(eps), math.sqrt(1 - eps)])})


def quantum_set(eps):
    plus, minus = np.array([1, 1]) / math.sqrt(2), np.array([1, -1]) / math.sqrt(2)
    pp, mm = np.outer(plus, plus), np.outer(minus, minus)
    return KrausSet.from_dict({"+": math.sqrt(1 - eps) * pp + math.sqrt(eps) * mm,
                               "-": math.sqrt(1 - eps) * mm + math.sqrt(eps) * pp})


def random_state(rng, d):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    r = a @ dag(a)
    return r / np.trace(r).real


# ---- density validation

def test_maximally_mixed_is_valid():
    chk = validate_density(np.eye(2) / 2)
    assert chk.ok
    assert chk.hermiticity == 0 and chk.trace_error < 1e-15


def test_diagonal_state_is_valid():
    assert validate_density(np.diag([0.7, 0.3])).ok


def test_negative_population_fails_psd():
    chk = validate_density(np.diag([1.2, -0.2]))
    assert not chk.psd
    with pytest.raises(QdynError):
        DensityMatrix(np.diag([1.2, -0.2]))


def test_non_hermitian_rejected():
    assert not validate_density(np.array([[0.5, 0.1], [0.3, 0.5]])).hermitian


# ---- measurements

def test_classical_projective_outcome_zero():
    rho = DensityMatrix(np.diag([P0, P1]))
    r = apply_kraus(rho, classical_set(0.0), "0")
    assert abs(r.probability - 0.73106) < 1e-5
    assert np.abs(r.state.mat - np.diag([1, 0])).max() < 1e-12


def test_half_error_leaves_populations():
    rho = np.diag([0.8, 0.2])
    for y in "01":
        r = apply_kraus(rho, classical_set(0.5), y)
        assert abs(r.probability - 0.5) < 1e-12
        assert np.abs(r.state.mat - rho).max() < 1e-12


def test_trivial_measurement():
    rho = np.diag([0.6, 0.4])
    r = apply_kraus(rho, KrausSet(("only",), (np.eye(2),)), "only")
    assert r.probability == pytest.approx(1.0)
    assert np.abs(r.state.mat - rho).max() < 1e-15


def test_zero_branch_returns_none():
    r = apply_kraus(np.diag([1.0, 0.0]), classical_set(0.0), "1")
    assert r.zero_branch and r.probability == 0


def test_incomplete_set_rejected():
    with pytest.raises(QdynError):
        KrausSet.from_dict({"0": np.diag([1.0, 0.5]), "1": np.diag([0.0, 0.5])})


def test_quantum_set_on_ground_state_is_unbiased():
    p = quantum_set(0.2).probabilities(np.diag([1.0, 0.0]))
    assert np.abs(p - 0.5).max() < 1e-12


@given(st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_born_probabilities_sum_to_one(eps, seed):
    rho = random_state(np.random.default_rng(seed), 2)
    for ks in (classical_set(eps), quantum_set(eps)):
        assert abs(ks.probabilities(rho).sum() - 1) < 1e-12


# ---- effective hamiltonian and non-Hermitian evolution

def test_heff_single_decay():
    down = thermal_qubit_channels(1.3, 1.0, 1.0)[0]
    heff = effective_hamiltonian(np.zeros((2, 2)), [down])
    assert np.abs(heff - (-0.65j) * np.diag([0, 1])).max() < 1e-15


def test_heff_without_channels_is_h():
    h = qubit_hamiltonian(0.7)
    assert np.abs(effective_hamiltonian(h) - h).max() == 0


def test_heff_thermal_pair():
    kappa, bw = 0.8, 1.0
    h = qubit_hamiltonian(1.0)
    heff = effective_hamiltonian(h, thermal_qubit_channels(kappa, 1.0, bw))
    want = h - 0.5j * kappa * (np.diag([0, 1]) + math.exp(-bw) * np.diag([1, 0]))
    assert np.abs(heff - want).max() < 1e-15


def test_unitary_evolution_preserves_norm():
    psi = np.array([0.6, 0.8j])
    out = evolve_nonhermitian(psi, qubit_hamiltonian(1.0) + 0.3 * O["X"], 2.7)
    assert abs(np.linalg.norm(out) - 1) < 1e-12


def test_decay_norm():
    kappa, t = 0.9, 1.7
    out = evolve_nonhermitian(np.array([0, 1.0]), -0.5j * kappa * np.diag([0, 1]), t)
    assert abs(np.linalg.norm(out) ** 2 - math.exp(-kappa * t)) < 1e-13


def test_zero_time_is_identity():
    psi = np.array([0.3, 0.4 + 0.1j])
    assert np.abs(evolve_nonhermitian(psi, -1j * np.eye(2), 0.0) - psi).max() == 0


def test_gain_is_rejected():
    with pytest.raises(QdynError):
        evolve_nonhermitian(np.array([1.0, 0]), 0.5j * np.eye(2), 1.0)


# ---- time reversal

def test_real_operator_unchanged():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.abs(time_reverse(a) - a).max() == 0


def test_sigma_y_flips_sign():
    assert np.abs(time_reverse(O["Y"]) + O["Y"]).max() == 0
    # i sigma_y is a real matrix, so conjugation leaves it alone
    assert np.abs(time_reverse(1j * O["Y"]) - 1j * O["Y"]).max() == 0


@given(st.integers(0, 2**31 - 1))
def test_reversal_is_involution(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    assert np.abs(time_reverse(time_reverse(a)) - a).max() == 0


def test_reversed_classical_operator_is_itself():
    m = classical_set(0.2)["0"]
    assert np.abs(reversed_kraus(m) - m).max() == 0
    p = classical_set(0.0)["1"]
    assert np.abs(reversed_kraus(p) - p).max() == 0


# ---- entropies and thermal states

def test_entropy_values():
    assert von_neumann_entropy(np.diag([1.0, 0.0])) == 0
    assert abs(von_neumann_entropy(np.eye(2) / 2) - math.log(2)) < 1e-15
    assert abs(von_neumann_entropy(np.diag([P0, P1])) - 0.58221) < 1e-5
    assert abs(H_P0 - 0.58221) < 1e-5


@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 3]))
def test_entropy_stack_matches_eigen(seed, d):
    rng = np.random.default_rng(seed)
    rhos = np.stack([random_state(rng, d) for _ in range(5)])
    want = [von_neumann_entropy(r) for r in rhos]
    assert np.abs(entropy_stack(rhos) - want).max() < 1e-12


def test_thermal_qubit():
    rho = thermal_state(qubit_hamiltonian(1.0), 1.0)
    assert np.abs(rho.mat - np.diag([0.73106, 0.26894])).max() < 1e-5
    assert np.abs(rho.probabilities - [P0, P1]).max() < 1e-15


def test_zero_beta_is_mixed():
    assert np.abs(thermal_state(qubit_hamiltonian(1.0), 0.0).mat - np.eye(2) / 2).max() < 1e-15


def test_huge_beta_is_ground_projector():
    rho = thermal_state(qubit_hamiltonian(1.0), 1e4)
    assert np.abs(rho.mat - np.diag([1.0, 0.0])).max() == 0


def test_spectrum_order_is_deterministic():
    s = eigenbasis(np.eye(3))
    assert np.abs(s.vectors - np.eye(3)).max() == 0
    s = eigenbasis(np.diag([0.2, 0.5, 0.3]))
    assert list(s.values) == [0.5, 0.3, 0.2]


# ---- Lindblad generator and detailed balance

def test_detailed_balance_pair():
    assert detailed_balance_residual(thermal_qubit_channels(1.0, 1.0, 1.0), 1.0) < 1e-15
    assert detailed_balance_residual(thermal_qubit_channels(1.0, 1.0, 1.0), 2.0) > 0.1


@given(st.floats(0.1, 3.0), st.floats(0.0, 3.0))
def test_gibbs_state_is_stationary(kappa, bw):
    h = qubit_hamiltonian(1.0)
    gen = lindbladian(h, thermal_qubit_channels(kappa, 1.0, bw))
    rho = thermal_state(h, bw).mat
    assert np.abs(gen @ rho.reshape(-1)).max() < 1e-12


@given(st.floats(0.1, 3.0), st.integers(0, 2**31 - 1))
def test_generator_preserves_trace(kappa, seed):
    gen = lindbladian(qubit_hamiltonian(1.0) + 0.2 * O["X"], thermal_qubit_channels(kappa, 1.0, 1.0))
    rho = random_state(np.random.default_rng(seed), 2)
    assert abs(np.trace((gen @ rho.reshape(-1)).reshape(2, 2))) < 1e-12

"""Exact reference values.

* Closed-form qubit tables for one measurement (classical and quantum variants) and the
  96 grouped trajectories of the two-measurement protocol, written directly from the
  analytic matrix elements.
* A generic heat-resolved enumeration of any discrete protocol whose heats are integer
  multiples of a common quantum; it shares no code with the closed forms.
* A brute-force system + finite reservoir verifier built from joint unitaries.
"""
from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .propagation import (
    HeatQuantizationError,
    Propagator,
    adjoint_superop,
    thermalize_map,
)
from .protocol import Evolve, Kick, Measure, Postselect, Protocol, Thermalize, reverse_protocol
from .qdyn import TOL_HERM, dag, expm, gibbs_weights

# ---------------------------------------------------------------- grouped trajectories


@dataclass(frozen=True)
class GroupedTrajectory:
    a: int
    y: tuple
    f: int
    heats: tuple
    probability: float
    exp_minus_sigma: float
    p_tr: float

    @property
    def q(self) -> float:
        return float(sum(self.heats))

    @property
    def sigma(self) -> float:
        return -math.log(self.exp_minus_sigma) if self.exp_minus_sigma > 0 else math.inf


def qubit_populations(beta_omega: float) -> tuple:
    z = 1.0 + math.exp(-beta_omega)
    return 1.0 / z, math.exp(-beta_omega) / z


def feedback_element(variant: str, y: str, out: int, inp: int, eps: float) -> float:
    """<out| U_y M_y |inp> for the two qubit measurement schemes."""
    if variant == "classical":
        yy = int(y)
        amp = math.sqrt(1 - eps) if yy == inp else math.sqrt(eps)
        return amp * (float(out == inp) if yy == 0 else float(out != inp))
    if variant == "quantum":
        sgn = 1.0 if y == "+" else (-1.0) ** inp
        return sgn * (math.sqrt((1 - eps) / 2) if out == 0 else (-1.0) ** inp * math.sqrt(eps / 2))
    raise ValueError(f"unknown variant {variant!r}")


def outcomes_of(variant: str) -> tuple:
    return ("0", "1") if variant == "classical" else ("+", "-")


def enumerate_single_measurement(variant: str, beta_omega: float, epsilon: float, omega: float = 1.0) -> list:
    """Grouped rows {a, Y, f, q} with q = omega (b - f) and b the post-feedback level.

    Classical: b is fixed by (a, Y) and 8 rows remain. Quantum: b is free and there are 16.
    """
    beta = beta_omega / omega
    p = qubit_populations(beta_omega)
    rows = []
    for a, y, f in itertools.product((0, 1), outcomes_of(variant), (0, 1)):
        bs = [a ^ int(y)] if variant == "classical" else [0, 1]
        for b in bs:
            amp2 = feedback_element(variant, y, b, a, epsilon) ** 2
            q = omega * (b - f)
            rows.append(
                GroupedTrajectory(
                    a, (y,), f, (q,),
                    probability=p[a] * p[f] * amp2,
                    exp_minus_sigma=p[f] / p[a] * math.exp(-beta * q),
                    p_tr=p[f] * p[b] * amp2,
                )
            )
    return rows


def single_measurement_closed_forms(variant: str, beta_omega: float, epsilon: float, omega: float = 1.0) -> dict:
    """Published closed forms for the single-measurement averages (beta = beta_omega / omega)."""
    p0, p1 = qubit_populations(beta_omega)
    e = epsilon

    def hb(x):
        return -sum(v * math.log(v) for v in (x, 1 - x) if v > 0)

    ptr = (1 - e) * p0 + e * p1
    out = {"sigma": beta_omega * (e - p1), "p_tr": ptr}
    if variant == "classical":
        pz = (1 - e) * p0 + e * p1
        out.update(
            P={"0": pz, "1": 1 - pz},
            sigma_cg=-hb(pz) - math.log(ptr),
            mutual_information=-hb(e) + hb(pz),
            beta_work=beta_omega * (p1 - e),
        )
    else:
        lam = (1 + math.sqrt(1 - 4 * e * (1 - e) * (1 - (p0 - p1) ** 2))) / 2
        out.update(
            P={"+": 0.5, "-": 0.5},
            sigma_cg=math.log(0.5) - math.log(ptr),
            mutual_information=hb(p0) - hb(lam),
            beta_work=beta_omega * (0.5 - e),
        )
    return out


def quantum_single_work(beta_omega: float, epsilon: float, omega: float = 1.0) -> float:
    """<W> evaluated from its definition for the quantum scheme; it keeps the coherence term."""
    p0, p1 = qubit_populations(beta_omega)
    e = epsilon
    return omega * ((0.5 - e) - math.sqrt(e * (1 - e)) * (p0 - p1))


def qubit_propagator_elements(beta_omega: float, kappa: float, t: float, omega: float = 1.0) -> dict:
    """Matrix elements <l'| exp(L t){|l><m|} |m'> of the thermal qubit Liouvillian.

    Keys are (l, m, l', m'); the superoperator maps populations among themselves and
    damps each coherence separately.
    """
    x = math.exp(-beta_omega)
    g = math.exp(-kappa * (1 + x) * t)
    z = 1 + x
    coh = math.exp(-kappa * (1 + x) * t / 2)
    return {
        (0, 0, 0, 0): (x * g + 1) / z,
        (0, 0, 1, 1): x * (1 - g) / z,
        (1, 1, 0, 0): (1 - g) / z,
        (1, 1, 1, 1): (g + x) / z,
        (0, 1, 0, 1): complex(math.cos(omega * t), math.sin(omega * t)) * coh,
        (1, 0, 1, 0): complex(math.cos(omega * t), -math.sin(omega * t)) * coh,
    }


def enumerate_two_measurements(
    variant: str, beta_omega: float, epsilon: float, kappa_dt: float, omega_over_kappa: float = 1.0,
    omega: float = 1.0,
) -> list:
    """The 96 grouped rows {a, y1, y2, f, q1, q2} of the two-round protocol.

    q1 is the net heat of the partial relaxation and q2 = omega (b - f) that of the final one.
    """
    kappa = omega / omega_over_kappa
    dt = kappa_dt / kappa
    beta = beta_omega / omega
    p = qubit_populations(beta_omega)
    e = qubit_propagator_elements(beta_omega, kappa, dt, omega)

    def amp(y, out, inp):
        return feedback_element(variant, y, out, inp, epsilon)

    def coherent(c, d):
        return e[(c, d, c, d)] if c != d else e[(c, c, c, c)]

    rows = []
    ys = outcomes_of(variant)
    for a, y1, y2, f in itertools.product((0, 1), ys, ys, (0, 1)):
        for q1n in (1, -1, 0):
            for b in (0, 1):
                if q1n == 1:
                    pf = amp(y2, b, 0) ** 2 * amp(y1, 1, a) ** 2 * e[(1, 1, 0, 0)]
                    pb = amp(y2, b, 0) ** 2 * e[(0, 0, 1, 1)] * amp(y1, 1, a) ** 2
                elif q1n == -1:
                    pf = amp(y2, b, 1) ** 2 * amp(y1, 0, a) ** 2 * e[(0, 0, 1, 1)]
                    pb = amp(y2, b, 1) ** 2 * e[(1, 1, 0, 0)] * amp(y1, 0, a) ** 2
                else:
                    pf = pb = 0.0
                    for c, d in itertools.product((0, 1), repeat=2):
                        pf += (amp(y2, b, c) * amp(y1, c, a) * amp(y1, d, a) * coherent(c, d) * amp(y2, b, d)).real
                        # backward: <a|A1^T|c><c|A2^T|b><b|conj A2|d><d|conj A1|a>, real amplitudes
                        pb += (amp(y1, c, a) * amp(y2, b, c) * amp(y2, b, d) * amp(y1, d, a) * coherent(c, d)).real
                q1, q2 = omega * q1n, omega * (b - f)
                rows.append(
                    GroupedTrajectory(
                        a, (y1, y2), f, (q1, q2),
                        probability=p[a] * p[f] * pf,
                        exp_minus_sigma=p[f] / p[a] * math.exp(-beta * (q1 + q2)),
                        p_tr=p[f] * p[b] * pb,
                    )
                )
    return rows


# ---------------------------------------------------------------- summaries of row lists


def rows_by_history(rows: Sequence[GroupedTrajectory]) -> dict:
    out = {}
    for r in rows:
        out.setdefault(r.y, []).append(r)
    return out


def coarse_grained_from_rows(rows: Sequence[GroupedTrajectory]) -> dict:
    """sigma_cg[Y] = -ln( sum_gamma e^-sigma P[gamma|Y] ) for every Y."""
    out = {}
    for y, rs in rows_by_history(rows).items():
        py = sum(r.probability for r in rs)
        num = sum(r.exp_minus_sigma * r.probability for r in rs)
        out[y] = (math.log(py / num) if num > 0 else math.inf) if py > 0 else math.nan
    return out


def row_summary(rows: Sequence[GroupedTrajectory], beta: float = 1.0) -> dict:
    """Exact ensemble averages and fluctuation-theorem sums over an enumeration."""
    cg = coarse_grained_from_rows(rows)
    py = {y: sum(r.probability for r in rs) for y, rs in rows_by_history(rows).items()}
    ptr_y = {y: sum(r.p_tr for r in rs) for y, rs in rows_by_history(rows).items()}
    tot = sum(r.probability for r in rows)
    live = [r for r in rows if r.probability > 0]
    ft_cg = sum(r.probability * r.exp_minus_sigma * math.exp(cg[r.y]) for r in live if math.isfinite(cg[r.y]))
    pb = sum(r.p_tr * py[r.y] / ptr_y[r.y] for r in rows if ptr_y[r.y] > 0)
    detailed = max(
        (abs(r.p_tr - r.exp_minus_sigma * r.probability) for r in rows), default=0.0
    )
    return {
        "total_probability": tot,
        "sigma": sum(r.probability * r.sigma for r in live),
        "sigma_cg": sum(py[y] * cg[y] for y in py if py[y] > 0),
        "exp_minus_sigma": sum(r.probability * r.exp_minus_sigma for r in rows),
        "exp_minus_sigma_minus_cg": ft_cg,
        "heat": sum(r.probability * r.q for r in rows),
        "backward_total": pb,
        "detailed_residual": detailed,
        "P": py,
        "P_tr": ptr_y,
        "sigma_cg_by_y": cg,
    }


# ---------------------------------------------------------------- generic enumeration


def heat_quantum(protocol: Protocol) -> float:
    """Smallest positive heat among channels and thermalisation gaps; every heat must be a multiple."""
    cands = [abs(ch.heat) for c in protocol.controls for ch in c.channels if abs(ch.heat) > 0]
    times = protocol.stage_times
    gaps = []
    for i, s in enumerate(protocol.stages):
        if isinstance(s, Thermalize):
            for ci in (range(len(protocol.controls)) if s.control is None else [s.control]):
                w = np.linalg.eigvalsh(protocol.controls[ci].hamiltonian(times[i]))
                gaps += [abs(u - v) for u in w for v in w if abs(u - v) > 1e-12]
    cands += gaps
    if not cands:
        return 1.0
    q0 = min(cands)
    for q in cands:
        n = round(q / q0)
        if abs(n * q0 - q) > 1e-9 * max(1.0, q):
            raise HeatQuantizationError(f"heats {q} and {q0} are not commensurate")
    return q0


def enumerate_protocol(protocol: Protocol, nmax: int = 3, tol: float = 0.0) -> list:
    """Every grouped trajectory {a, Y, per-stage net heats, f} of a discrete protocol.

    Forward weights propagate |a><a| through heat-resolved stage maps; backward weights
    propagate p_f Theta|f><f|Theta^-1 through the reversed protocol, selecting the opposite
    heat in each stage.
    """
    if protocol.mode != "discrete":
        raise ValueError("enumeration needs a discrete protocol")
    q0 = heat_quantum(protocol)
    d = protocol.dim
    init = protocol.initial.spectrum
    pa = protocol.initial.probabilities
    fwd = Propagator(protocol, "exact")
    rows = []
    for y in protocol.all_histories():
        fc = protocol.final_control(y)
        ref = protocol.reference_state(fc)
        reig, pf = ref.spectrum, ref.probabilities
        rev = reverse_protocol(protocol, y)
        bwd = Propagator(rev, "exact", order="reversed")
        back = {}
        for f in range(d):
            if pf[f] == 0:
                continue
            v = np.conj(reig.vectors[:, f])
            start = {(): pf[f] * np.outer(v, v.conj()).reshape(-1)}
            back[f] = _heat_resolved_reversed(rev, bwd, start, q0, nmax)
        for a in range(d):
            if pa[a] == 0:
                continue
            va = init.vectors[:, a]
            start = {(): pa[a] * np.outer(va, va.conj()).reshape(-1)}
            out = _heat_resolved_forward(protocol, fwd, y, start, q0, nmax)
            va_bar = np.conj(va)
            for heats, vecr in out.items():
                rho = vecr.reshape(d, d)
                for f in range(d):
                    vf = reig.vectors[:, f]
                    prob = float((vf.conj() @ rho @ vf).real)
                    if pf[f] == 0:
                        continue
                    rb = back[f].get(tuple(-n for n in heats[::-1]))
                    ptr = 0.0 if rb is None else float((va_bar.conj() @ rb.reshape(d, d) @ va_bar).real)
                    if prob <= tol and ptr <= tol:
                        continue
                    qs = tuple(n * q0 for n in heats)
                    rows.append(
                        GroupedTrajectory(
                            a, y, f, qs, prob,
                            pf[f] / pa[a] * math.exp(-protocol.beta * sum(qs)), ptr,
                        )
                    )
    return rows


def _spread(states: dict, pieces) -> dict:
    out = {}
    for key, v in states.items():
        for n, sop in pieces:
            w = sop @ v
            k2 = key + (n,)
            out[k2] = out[k2] + w if k2 in out else w
    return out


def _heat_resolved_forward(protocol, prop, y, states, q0, nmax):
    cur, n = 0, 0
    times = protocol.stage_times
    for i, s in enumerate(protocol.stages):
        if isinstance(s, Evolve):
            c = protocol.active_control(cur, s)
            states = _spread(states, prop.evolve_heat(i, c, q0, nmax).items())
        elif isinstance(s, Thermalize):
            c = protocol.controls[protocol.active_control(cur, s)]
            states = _spread(states, _therm_pieces(c.hamiltonian(times[i]), protocol.beta, q0))
        elif isinstance(s, Measure):
            sop = adjoint_superop(s.kraus[y[n]])
            act, cur = protocol.control_after(list(y[: n + 1]), n, cur)
            if act.unitary is not None:
                sop = adjoint_superop(act.unitary) @ sop
            states = {k: sop @ v for k, v in states.items()}
            n += 1
        elif isinstance(s, Kick):
            sop = adjoint_superop(s.unitary)
            states = {k: sop @ v for k, v in states.items()}
    return states


def _heat_resolved_reversed(rev, prop, states, q0, nmax):
    times = rev.stage_times
    for i, s in enumerate(rev.stages):
        if isinstance(s, Evolve):
            states = _spread(states, prop.evolve_heat(i, s.control, q0, nmax).items())
        elif isinstance(s, Thermalize):
            h = rev.controls[s.control].hamiltonian(times[i])
            states = _spread(states, _therm_pieces(h, rev.beta, q0))
        elif isinstance(s, (Postselect, Kick)):
            op = s.operator if isinstance(s, Postselect) else s.unitary
            sop = adjoint_superop(op)
            states = {k: sop @ v for k, v in states.items()}
    return states


def _therm_pieces(h, beta, q0):
    acc = {}
    for q, sop in thermalize_map(h, beta):
        n = round(q / q0)
        if abs(n * q0 - q) > 1e-9 * max(1.0, abs(q)):
            raise HeatQuantizationError(f"thermalisation heat {q} is not a multiple of {q0}")
        acc[n] = acc[n] + sop if n in acc else sop
    return list(acc.items())


# ---------------------------------------------------------------- dilated verifier


def piecewise_unitary(pieces: Sequence[tuple]) -> np.ndarray:
    """Time-ordered product of exp(-i H_k t_k), the first piece acting first."""
    u = np.eye(np.asarray(pieces[0][0]).shape[0], dtype=complex)
    for h, t in pieces:
        u = expm(-1j * np.asarray(h) * t) @ u
    return u


def reversed_pieces(pieces: Sequence[tuple]) -> list:
    return [(np.conj(np.asarray(h)), t) for h, t in pieces[::-1]]


def microreversibility_residual(pieces: Sequence[tuple]) -> float:
    """|Theta^-1 U_bar Theta - U^dag|_F where U_bar runs the conjugated schedule backwards."""
    u = piecewise_unitary(pieces)
    ubar = piecewise_unitary(reversed_pieces(pieces))
    return float(np.linalg.norm(np.conj(ubar) - dag(u)))


@dataclass(frozen=True)
class DilatedModel:
    """System plus finite reservoir with diagonal H_R, evolving by joint unitaries.

    `segment(n, y_prefix)` returns the piecewise-constant joint Hamiltonian pieces
    [(H, duration), ...] acting after the n-th measurement (n = 0 before the first).
    """

    h_system: np.ndarray
    reservoir_energies: np.ndarray
    beta: float
    measurements: tuple
    segment: Callable
    initial_system: np.ndarray | None = None
    reference_system: np.ndarray | None = None

    @property
    def ds(self) -> int:
        return self.h_system.shape[0]

    @property
    def dr(self) -> int:
        return len(self.reservoir_energies)

    @property
    def reservoir_weights(self) -> np.ndarray:
        return gibbs_weights(self.reservoir_energies, self.beta)


@dataclass(frozen=True)
class DilatedReport:
    residual: float
    total_probability: float
    exp_minus_sigma: float
    mean_heat: float
    reservoir_heat: float
    rows: int
    unitarity: float


def _system_spectrum(rho):
    w, v = np.linalg.eigh(rho)
    order = np.argsort(-w, kind="stable")
    return np.clip(w[order], 0, None), v[:, order]


def dilated_verify(model: DilatedModel, max_dim: int = 64) -> DilatedReport:
    """Enumerate (a, E0, Y, f, E_tau) and compare P_tr of each reversed trajectory with e^-sigma P."""
    ds, dr = model.ds, model.dr
    if ds * dr > max_dim:
        raise ValueError(f"joint dimension {ds * dr} exceeds {max_dim}")
    from .qdyn import thermal_state

    rho0 = model.initial_system if model.initial_system is not None else thermal_state(model.h_system, model.beta).mat
    rhor = model.reference_system if model.reference_system is not None else rho0
    pa, va = _system_spectrum(rho0)
    pf, vf = _system_spectrum(rhor)
    pe = model.reservoir_weights
    er = np.asarray(model.reservoir_energies, dtype=float)
    eye_r = np.eye(dr)
    meas = model.measurements
    hists = list(itertools.product(*[k.outcomes for k in meas]))
    worst, tot, ems, heat, unit = 0.0, 0.0, 0.0, 0.0, 0.0
    rho_fin = np.zeros((ds * dr, ds * dr), dtype=complex)
    nrows = 0
    for y in hists:
        segs = [model.segment(n, tuple(y[:n])) for n in range(len(meas) + 1)]
        us = [piecewise_unitary(s) for s in segs]
        ubars = [piecewise_unitary(reversed_pieces(s)) for s in segs]
        for u in us:
            unit = max(unit, float(np.abs(dag(u) @ u - np.eye(ds * dr)).max()))
        ks = [np.kron(k[y[n]], eye_r) for n, k in enumerate(meas)]
        kbars = [np.kron(np.conj(dag(k[y[n]])), eye_r) for n, k in enumerate(meas)]
        fwd = us[0]
        for n in range(len(meas)):
            fwd = us[n + 1] @ ks[n] @ fwd
        bwd = ubars[-1]
        for n in reversed(range(len(meas))):
            bwd = ubars[n] @ kbars[n] @ bwd
        for a in range(ds):
            for e0 in range(dr):
                psi0 = np.kron(va[:, a], eye_r[e0])
                out = fwd @ psi0
                w0 = pa[a] * pe[e0]
                rho_fin += w0 * np.outer(out, out.conj())
                for f in range(ds):
                    for e1 in range(dr):
                        ket = np.kron(vf[:, f], eye_r[e1])
                        p = w0 * abs(ket.conj() @ out) ** 2
                        back = bwd @ np.conj(ket)
                        # overlap with Theta|a, E0> = conj(psi0)
                        ptr = pf[f] * pe[e1] * abs(psi0 @ back) ** 2
                        if pa[a] == 0 or pe[e0] == 0 or pf[f] == 0 or pe[e1] == 0:
                            ems_row = 0.0
                        else:
                            ems_row = pf[f] * pe[e1] / (pa[a] * pe[e0])
                        worst = max(worst, abs(ptr - ems_row * p))
                        tot += p
                        ems += ems_row * p
                        heat += p * (er[e1] - er[e0])
                        nrows += 1
    hr = np.kron(np.eye(ds), np.diag(er))
    res_heat = float(np.trace(hr @ rho_fin).real - np.trace(np.diag(er) @ np.diag(pe)).real * np.trace(rho_fin).real)
    return DilatedReport(worst, tot, ems, heat, res_heat, nrows, unit)


def energy_conserving(v: np.ndarray, h0: np.ndarray, decimals: int = 9) -> np.ndarray:
    """Pinch v onto the eigenspaces of h0 (diagonal), so the result commutes with h0."""
    e = np.round(np.diag(h0).real, decimals)
    mask = e[:, None] == e[None, :]
    return np.where(mask, v, 0.0)


def random_dilated_preset(seed: int, n_reservoir_qubits: int = 2, omega: float = 1.0, beta: float = 1.0,
                          variant: str = "classical", epsilon: float = 0.2, n_measurements: int = 1,
                          pieces: int = 3) -> DilatedModel:
    """Qubit coupled to reservoir qubits of the same splitting through a random energy-conserving
    real coupling, with outcome-dependent real drives on the system."""
    rng = np.random.default_rng(seed)
    hs = np.diag([-omega / 2, omega / 2]).astype(complex)
    er = np.array([sum(bits) * omega for bits in itertools.product((0, 1), repeat=n_reservoir_qubits)], float)
    dr = len(er)
    h0 = np.kron(hs, np.eye(dr)) + np.kron(np.eye(2), np.diag(er))
    v = rng.normal(size=(2 * dr, 2 * dr))
    v = energy_conserving(v + v.T, h0)
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    if variant == "classical":
        m0 = np.diag([math.sqrt(1 - epsilon), math.sqrt(epsilon)])
        m1 = np.diag([math.sqrt(epsilon), math.sqrt(1 - epsilon)])
        kr = {"0": m0, "1": m1}
    else:
        plus = np.array([1, 1]) / math.sqrt(2)
        minus = np.array([1, -1]) / math.sqrt(2)
        pp, mm = np.outer(plus, plus), np.outer(minus, minus)
        kr = {"+": math.sqrt(1 - epsilon) * pp + math.sqrt(epsilon) * mm,
              "-": math.sqrt(1 - epsilon) * mm + math.sqrt(epsilon) * pp}
    from .qdyn import KrausSet

    meas = tuple(KrausSet.from_dict(kr) for _ in range(n_measurements))
    drive_seed = int(rng.integers(2 ** 31))

    def segment(n, prefix):
        r = np.random.default_rng([drive_seed, n] + [zlib.crc32(y.encode()) for y in prefix])
        out = []
        for _ in range(pieces):
            g = r.normal()
            h = h0 + np.kron(g * sx, np.eye(dr)) + 0.7 * v
            out.append((h, float(r.uniform(0.2, 1.0))))
        return out

    return DilatedModel(hs, er, beta, meas, segment)

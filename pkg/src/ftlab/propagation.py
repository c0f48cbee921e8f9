"""Density-matrix propagation along protocols for a fixed outcome history.

Two time models are available:

``exact``  Liouvillian exponentials. Time-dependent Hamiltonians are held piecewise
           constant on sub-steps of length <= dt (midpoint values).
``grid``   the discrete step model used by the trajectory sampler. One step of length h is
           the unitary exp(-i H(t_mid) h) followed by the complete instrument
           {sqrt(I - h sum L^dag L), sqrt(h) L_j}, and in continuous mode by the monitoring
           instrument {sqrt(I - h sum M^dag M), sqrt(h) V_y M_y}. Reversed stages apply the
           time-reversed pieces in the opposite order, which makes every fluctuation
           relation exact at finite h.

Superoperators act on row-major vectorised matrices, vec(A X B) = (A kron B^T) vec(X).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .protocol import (
    ConstantSchedule,
    Evolve,
    Kick,
    Measure,
    Postselect,
    Protocol,
    ProtocolError,
    ReversedProtocol,
    ReversedSchedule,
    Thermalize,
    reverse_protocol,
)
from .qdyn import (
    DensityMatrix,
    dag,
    eigenbasis,
    expm,
    gibbs_weights,
    lindbladian,
    spre_post,
    unitary_propagator,
)

MODES = ("exact", "grid")


class HeatQuantizationError(ValueError):
    pass


def sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + dag(a)))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ dag(v)


def adjoint_superop(a: np.ndarray) -> np.ndarray:
    """Superoperator of X -> A X A^dag."""
    return spre_post(a, dag(a))


def is_constant(schedule) -> bool:
    if isinstance(schedule, ConstantSchedule):
        return True
    if isinstance(schedule, ReversedSchedule):
        return is_constant(schedule.base)
    return False


@dataclass(frozen=True)
class StepOps:
    """Kraus pieces of one grid step for one control."""

    k0: np.ndarray
    jumps: tuple  # sqrt(h) L_j
    heats: tuple
    p_max: float  # largest total jump probability over states


def dissipation_ops(channels, h: float) -> StepOps:
    d = channels[0].operator.shape[0] if channels else None
    if not channels:
        return StepOps(None, (), (), 0.0)
    r = sum(dag(c.operator) @ c.operator for c in channels)
    pmax = float(np.linalg.eigvalsh(r).max()) * h
    k0 = sqrt_psd(np.eye(d) - h * r)
    return StepOps(k0, tuple(np.sqrt(h) * c.operator for c in channels), tuple(c.heat for c in channels), pmax)


def monitor_ops(ops, h: float) -> tuple:
    """(no-detection operator, sqrt(h) M_y list, max detection probability)."""
    if not ops:
        return None, (), 0.0
    d = ops[0].shape[0]
    r = sum(dag(m) @ m for m in ops)
    pmax = float(np.linalg.eigvalsh(r).max()) * h
    return sqrt_psd(np.eye(d) - h * r), tuple(np.sqrt(h) * m for m in ops), pmax


def check_step_cap(protocol: Protocol, dt: float | None = None) -> None:
    """Config error when one grid step could carry more than p_step_max event probability."""
    for seg in protocol.grid(dt):
        if seg.steps == 0:
            continue
        cs = {protocol.stages[seg.stage].control} if protocol.stages[seg.stage].control is not None else set(
            range(len(protocol.controls))
        )
        for c in cs:
            p = dissipation_ops(protocol.controls[c].channels, seg.h).p_max
            if p > protocol.p_step_max:
                raise ProtocolError(
                    f"stage {seg.stage}: jump probability per step {p:.3g} exceeds {protocol.p_step_max}; "
                    f"reduce dt below {seg.h * protocol.p_step_max / p:.3g}"
                )
        if protocol.monitor is not None:
            p = monitor_ops(protocol.monitor.scaled(), seg.h)[2]
            if p > protocol.p_step_max:
                raise ProtocolError(
                    f"stage {seg.stage}: detection probability per step {p:.3g} exceeds {protocol.p_step_max}; "
                    f"reduce dt below {seg.h * protocol.p_step_max / p:.3g}"
                )


def instrument_superop(ops: StepOps, d: int) -> np.ndarray:
    if ops.k0 is None:
        return np.eye(d * d, dtype=complex)
    s = adjoint_superop(ops.k0)
    for j in ops.jumps:
        s = s + adjoint_superop(j)
    return s


# ---------------------------------------------------------------- stage maps

class Propagator:
    """Caches stage superoperators for one protocol (forward or reversed) in one mode."""

    def __init__(self, protocol, mode: str = "exact", dt: float | None = None, order: str = "forward"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.p = protocol
        self.mode = mode
        self.dt = protocol.step_size(dt)
        self.order = order  # 'forward' (unitary then dissipation) or 'reversed'
        self.d = protocol.dim
        self._grid = {g.stage: g for g in protocol.grid(self.dt)}
        self._cache = {}

    def _substeps(self, stage: int):
        g = self._grid[stage]
        return g.steps, g.h, g.t0

    def evolve(self, stage: int, control: int) -> np.ndarray:
        key = ("ev", stage, control)
        if key not in self._cache:
            self._cache[key] = self._build_evolve(stage, control)
        return self._cache[key]

    def _build_evolve(self, stage: int, control: int) -> np.ndarray:
        d = self.d
        c = self.p.controls[control]
        n, h, t0 = self._substeps(stage)
        if n == 0:
            return np.eye(d * d, dtype=complex)
        if self.mode == "exact":
            if is_constant(c.schedule):
                return expm(lindbladian(c.hamiltonian(t0), c.channels) * (n * h))
            s = np.eye(d * d, dtype=complex)
            for k in range(n):
                s = expm(lindbladian(c.hamiltonian(t0 + (k + 0.5) * h), c.channels) * h) @ s
            return s
        phi = instrument_superop(dissipation_ops(c.channels, h), d)
        if is_constant(c.schedule):
            step = self._grid_step(phi, c.hamiltonian(t0), h)
            return np.linalg.matrix_power(step, n)
        s = np.eye(d * d, dtype=complex)
        for k in range(n):
            s = self._grid_step(phi, c.hamiltonian(t0 + (k + 0.5) * h), h) @ s
        return s

    def _grid_step(self, phi, hmat, h):
        u = adjoint_superop(unitary_propagator(hmat, h))
        return phi @ u if self.order == "forward" else u @ phi

    # heat-resolved maps: dict net quanta -> superoperator
    def evolve_heat(self, stage: int, control: int, quantum: float, nmax: int = 3) -> dict:
        key = ("evh", stage, control, quantum, nmax)
        if key in self._cache:
            return self._cache[key]
        if self.mode != "exact":
            raise ValueError("heat-resolved propagation is implemented for exact mode")
        d, c = self.d, self.p.controls[control]
        n, h, t0 = self._substeps(stage)
        nb = 2 * nmax + 1
        if n == 0:
            out = {0: np.eye(d * d, dtype=complex)}
            self._cache[key] = out
            return out
        shifts = [_quanta(ch.heat, quantum) for ch in c.channels]

        def gen(hmat):
            g = np.zeros((nb * d * d,) * 2, dtype=complex)
            base = lindbladian(hmat, c.channels)
            for ch in c.channels:
                base = base - spre_post(ch.operator, dag(ch.operator))
            for b in range(nb):
                sl = slice(b * d * d, (b + 1) * d * d)
                g[sl, sl] = base
                for ch, s in zip(c.channels, shifts):
                    b2 = b + s
                    if 0 <= b2 < nb:
                        g[b2 * d * d:(b2 + 1) * d * d, sl] += spre_post(ch.operator, dag(ch.operator))
            return g

        if is_constant(c.schedule):
            a = expm(gen(c.hamiltonian(t0)) * (n * h))
        else:
            a = np.eye(nb * d * d, dtype=complex)
            for k in range(n):
                a = expm(gen(c.hamiltonian(t0 + (k + 0.5) * h)) * h) @ a
        col = slice(nmax * d * d, (nmax + 1) * d * d)
        out = {}
        for b in range(nb):
            blk = a[b * d * d:(b + 1) * d * d, col]
            if np.abs(blk).max() > 0:
                out[b - nmax] = blk
        total = sum(out.values())
        leak = np.abs(total - self.evolve(stage, control)).max()
        if leak > 1e-10:
            raise HeatQuantizationError(f"heat truncation at |n| <= {nmax} leaks {leak:.2e}; raise nmax")
        self._cache[key] = out
        return out


def _quanta(q: float, quantum: float) -> int:
    n = round(q / quantum)
    if abs(n * quantum - q) > 1e-9 * max(1.0, abs(q)):
        raise HeatQuantizationError(f"heat {q} is not a multiple of {quantum}")
    return int(n)


def thermalize_map(h: np.ndarray, beta: float) -> list:
    """Gibbs reset as (E_b - E_f, superoperator) pieces: rho -> <b|rho|b> p_f |f><f|."""
    eig = eigenbasis(h, descending=False)
    p = gibbs_weights(eig.values, beta)
    out = []
    for b in range(eig.dim):
        vb = eig.vectors[:, b]
        for f in range(eig.dim):
            if p[f] == 0:
                continue
            vf = eig.vectors[:, f]
            op = np.sqrt(p[f]) * np.outer(vf, vb.conj())
            out.append((float(eig.values[b] - eig.values[f]), adjoint_superop(op)))
    return out


def thermalize_superop(h: np.ndarray, beta: float) -> np.ndarray:
    return sum(s for _, s in thermalize_map(h, beta))


# ---------------------------------------------------------------- fixed-history propagation

def forward_weight(protocol: Protocol, y, mode: str = "exact", dt=None, prop: Propagator | None = None,
                   rho0=None) -> tuple:
    """(P[Y], unnormalised final state) for a discrete protocol."""
    prop = prop or Propagator(protocol, mode, dt)
    d = protocol.dim
    v = (protocol.initial.mat if rho0 is None else np.asarray(rho0)).reshape(-1).astype(complex)
    cur, n = 0, 0
    times = protocol.stage_times
    for i, s in enumerate(protocol.stages):
        if isinstance(s, Evolve):
            v = prop.evolve(i, protocol.active_control(cur, s)) @ v
        elif isinstance(s, Measure):
            m = s.kraus[y[n]]
            v = adjoint_superop(m) @ v
            act, cur = protocol.control_after(list(y[: n + 1]), n, cur)
            if act.unitary is not None:
                v = adjoint_superop(act.unitary) @ v
            n += 1
        elif isinstance(s, Thermalize):
            c = protocol.controls[protocol.active_control(cur, s)]
            v = thermalize_superop(c.hamiltonian(times[i]), protocol.beta) @ v
        elif isinstance(s, Kick):
            v = adjoint_superop(s.unitary) @ v
    rho = v.reshape(d, d)
    return float(np.trace(rho).real), rho


def reversed_weight(rev: ReversedProtocol, mode: str = "exact", dt=None, prop: Propagator | None = None) -> tuple:
    """(P_tr[reversed Y], unnormalised final state) of the backward experiment."""
    fwd = rev.forward
    prop = prop or Propagator(rev, mode, dt, order="reversed")
    d = fwd.dim
    v = rev.initial.mat.reshape(-1).astype(complex)
    times = rev.stage_times
    for i, s in enumerate(rev.stages):
        if isinstance(s, Evolve):
            v = prop.evolve(i, s.control) @ v
        elif isinstance(s, Postselect):
            v = adjoint_superop(s.operator) @ v
        elif isinstance(s, Kick):
            v = adjoint_superop(s.unitary) @ v
        elif isinstance(s, Thermalize):
            v = thermalize_superop(rev.controls[s.control].hamiltonian(times[i]), fwd.beta) @ v
    rho = v.reshape(d, d)
    return float(np.trace(rho).real), rho


def p_forward_outcomes(protocol: Protocol, y, mode: str = "exact", dt=None) -> float:
    return forward_weight(protocol, tuple(str(v) for v in y), mode, dt)[0]


def p_tr_outcomes(protocol: Protocol, y, mode: str = "exact", dt=None) -> float:
    return reversed_weight(reverse_protocol(protocol, tuple(str(v) for v in y)), mode, dt)[0]


def average_final_state(protocol: Protocol, mode: str | None = None, dt=None) -> DensityMatrix:
    """Outcome-averaged state at tau."""
    if protocol.mode == "discrete":
        mode = mode or "exact"
        prop = Propagator(protocol, mode, dt)
        rho = sum(forward_weight(protocol, y, mode, dt, prop)[1] for y in protocol.all_histories())
    else:
        rho = sum(continuous_class_states(protocol, dt).values())
    rho = 0.5 * (rho + dag(rho))
    return DensityMatrix(rho / np.trace(rho).real)


def continuous_class_states(protocol: Protocol, dt=None, with_heat: bool = False):
    """Detection-summed grid propagation keeping one unnormalised state per active control.

    With ``with_heat`` also returns the mean heat released to the bath.
    """
    d = protocol.dim
    mon = protocol.monitor
    heat = 0.0
    states = {0: protocol.initial.mat.astype(complex)}
    times = protocol.stage_times
    for seg_i, s in enumerate(protocol.stages):
        if isinstance(s, Evolve):
            seg = next(g for g in protocol.grid(dt) if g.stage == seg_i)
            for k in range(seg.steps):
                t = seg.t0 + (k + 0.5) * seg.h
                new = {}
                for c, rho in states.items():
                    ctl = protocol.controls[protocol.active_control(c, s)]
                    u = unitary_propagator(ctl.hamiltonian(t), seg.h)
                    rho = u @ rho @ dag(u)
                    ops = dissipation_ops(ctl.channels, seg.h)
                    if ops.k0 is not None:
                        jumped = [j @ rho @ dag(j) for j in ops.jumps]
                        heat += sum(q * np.trace(x).real for q, x in zip(ops.heats, jumped))
                        rho = ops.k0 @ rho @ ops.k0 + sum(jumped)
                    k0m, dets, _ = monitor_ops(mon.scaled(), seg.h)
                    if k0m is None:
                        new[c] = new.get(c, 0) + rho
                        continue
                    new[c] = new.get(c, 0) + k0m @ rho @ k0m
                    for lab, m in zip(mon.labels, dets):
                        a = mon.action(lab)
                        post = m @ rho @ dag(m)
                        if a.unitary is not None:
                            post = a.unitary @ post @ dag(a.unitary)
                        c2 = c if a.control is None else a.control
                        new[c2] = new.get(c2, 0) + post
                states = new
        elif isinstance(s, Thermalize):
            new = {}
            for c, r in states.items():
                hm = protocol.controls[protocol.active_control(c, s)].hamiltonian(times[seg_i])
                out = (thermalize_superop(hm, protocol.beta) @ r.reshape(-1)).reshape(d, d)
                heat += np.trace(hm @ r).real - np.trace(hm @ out).real
                new[c] = out
            states = new
        elif isinstance(s, Kick):
            states = {c: s.unitary @ r @ dag(s.unitary) for c, r in states.items()}
        elif isinstance(s, Measure):
            raise ProtocolError("continuous-mode protocols cannot also contain discrete measurements")
    return (states, float(heat)) if with_heat else states

"""The backward experiment: reversed-outcome probabilities, P_B, postselection, validity checks.

Every forward Kraus piece A (measurement branch, jump, no-jump, unitary) has the reversed
piece Theta A^dag Theta^-1 = A^T (Theta is complex conjugation). The continuous-mode
passes below use that identity directly on the sampler's grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .propagation import p_forward_outcomes, p_tr_outcomes, reversed_weight  # noqa: F401  (re-exported)
from .protocol import Evolve, Kick, Measure, Protocol, ProtocolError, Thermalize, reverse_protocol
from .engine import _groups, _sub
from .qdyn import KrausSet, dag, entropy_stack, thermal_state
from .thermo import conditional_tree, delta_entropy, information_by_history, log_ratio

HISTORY_TABLE_LIMIT = 4096


# ---------------------------------------------------------------- validity of reversed measurements

@dataclass(frozen=True)
class BackwardMeasurementReport:
    element_valid: bool  # every reversed operator B satisfies B^dag B <= I
    unital_complete: bool  # the reversed set is complete iff sum M M^dag = I
    dilation_required: bool
    max_element_eigenvalue: float
    unitality_residual: float


def validate_backward_measurement(kraus: KrausSet, tol: float = 1e-10) -> BackwardMeasurementReport:
    lam = max(float(np.linalg.eigvalsh(m @ dag(m)).max()) for m in kraus.operators)
    s = sum(m @ dag(m) for m in kraus.operators)
    res = float(np.linalg.norm(s - np.eye(kraus.dim)))
    complete = res <= tol
    return BackwardMeasurementReport(lam <= 1 + tol, complete, not complete, lam, res)


# ---------------------------------------------------------------- P_B

def backward_distribution(rows) -> np.ndarray:
    """P_B for enumerated rows: P_tr[reversed trajectory] * P[Y] / P_tr[reversed Y].

    Rows are oracle GroupedTrajectory objects (or anything with y, probability, p_tr).
    Histories with P_tr[reversed Y] = 0 get NaN.
    """
    py, ptr = {}, {}
    for r in rows:
        py[r.y] = py.get(r.y, 0.0) + r.probability
        ptr[r.y] = ptr.get(r.y, 0.0) + r.p_tr
    return np.array([r.p_tr * py[r.y] / ptr[r.y] if ptr[r.y] > 0 else math.nan for r in rows])


# ---------------------------------------------------------------- per-chunk accounting

class Accountant:
    """Adds sigma, sigma_cg and information terms to sampled chunks.

    Discrete protocols use one exact (grid model) table over all histories; continuous
    protocols run a forward and a reversed density-matrix pass per trajectory.
    """

    def __init__(self, protocol: Protocol, kit):
        self.p = protocol
        self.kit = kit
        self.table = None
        if protocol.mode == "discrete":
            sets = protocol.outcome_sets()
            self.shape = tuple(len(s) for s in sets)
            if int(np.prod(self.shape, dtype=np.int64)) <= HISTORY_TABLE_LIMIT:
                self.table = history_table(protocol, kit.dt)
        else:
            self.passkit = PassKit(protocol, kit)
            for i, g in kit.grid.items():
                s = protocol.stages[i]
                for c in ([s.control] if s.control is not None else range(len(protocol.controls))):
                    for k in range(g.steps):
                        self.passkit.step(i, c, k)

    def attach(self, chunk) -> None:
        p = self.p
        with np.errstate(divide="ignore"):
            chunk.extra["sigma"] = delta_entropy(chunk.p_a, chunk.p_f) + p.beta * chunk.heat
        if p.mode == "discrete":
            if len(self.shape) == 0:
                chunk.extra["sigma_cg"] = np.zeros(len(chunk))
                return
            flat = np.ravel_multi_index(chunk.outcomes.T, self.shape)
            if self.table is not None:
                for k in ("sigma_cg", "i_te"):
                    chunk.extra[k] = self.table[k][flat]
            else:
                sets = p.outcome_sets()
                cg = {}
                for f in np.unique(flat):
                    idx = np.unravel_index(f, self.shape)
                    y = tuple(sets[m][i] for m, i in enumerate(idx))
                    cg[int(f)] = log_ratio(p_forward_outcomes(p, y, "grid", self.kit.dt),
                                           p_tr_outcomes(p, y, "grid", self.kit.dt))
                chunk.extra["sigma_cg"] = np.array([cg[int(f)] for f in flat])
            if len(self.shape) == 1 and "i_te" in chunk.extra:
                chunk.extra["i_mi"] = chunk.extra["i_te"]
        else:
            lp, lptr, ite = continuous_passes(p, self.kit, chunk.detections, chunk.final_control,
                                                self.passkit)
            with np.errstate(invalid="ignore"):
                chunk.extra["sigma_cg"] = np.where(np.isfinite(lptr), lp - lptr, math.inf)
            chunk.extra["log_p"] = lp
            chunk.extra["log_p_tr"] = lptr
            chunk.extra["i_te"] = ite


def history_table(protocol: Protocol, dt=None) -> dict:
    """Grid-model sigma_cg[Y] and I_te[Y] as flat arrays in row-major outcome order."""
    tree = conditional_tree(protocol, "grid", dt)
    info = information_by_history(tree)
    hs = protocol.all_histories()
    cg = np.empty(len(hs))
    ite = np.empty(len(hs))
    for k, y in enumerate(hs):
        py = float(np.trace(tree.final[y].rho).real)
        ptr = reversed_weight(reverse_protocol(protocol, y), "grid", dt)[0]
        cg[k] = log_ratio(py, ptr) if py > 0 else 0.0
        ite[k] = info[y]
    return {"histories": hs, "sigma_cg": cg, "i_te": ite}


def _sop(a: np.ndarray) -> np.ndarray:
    """Superoperator of X -> A X A^dag on row-major vec(X)."""
    return np.kron(a, a.conj())


def _vec_entropy(r: np.ndarray, d: int) -> np.ndarray:
    """Entropies of unit-trace states stored as columns of a (d*d, n) array."""
    if d == 2:
        a, c, b = r[0].real, r[3].real, r[1]
        gap = np.sqrt((a - c) ** 2 + 4 * (b.real**2 + b.imag**2))
        lam = np.stack([(a + c + gap) / 2, (a + c - gap) / 2])
        lam = np.clip(lam, 0.0, None)
        with np.errstate(divide="ignore", invalid="ignore"):
            return -np.where(lam > 0, lam * np.log(np.where(lam > 0, lam, 1.0)), 0.0).sum(axis=0)
    return entropy_stack(r.T.reshape(-1, d, d))


class PassKit:
    """Per grid step superoperators for the forward and reversed density passes."""

    def __init__(self, protocol: Protocol, kit):
        self.p, self.kit = protocol, kit
        self.d = protocol.dim
        self.diag = [k * self.d + k for k in range(self.d)]
        self._c = {}

    def step(self, stage, control, k):
        key = self.kit.key(stage, control, k)
        if key not in self._c:
            u, ops, (k0m, dets, _) = self.kit.step(stage, control, k)
            mon = self.p.monitor
            phi = _sop(ops.k0) + sum(_sop(j) for j in ops.jumps) if ops.k0 is not None else None
            phi_r = _sop(np.conj(ops.k0)) + sum(_sop(np.conj(j)) for j in ops.jumps) if ops.k0 is not None else None
            su, su_r = _sop(u), _sop(u.T)
            fwd = su if phi is None else phi @ su
            rev = su_r if phi_r is None else su_r @ phi_r
            br, br_r = [], []
            if k0m is not None:
                pieces = [k0m]
                for y, m in enumerate(dets):
                    act = mon.action(mon.labels[y])
                    pieces.append(m if act.unitary is None else act.unitary @ m)
                br = [_sop(x) for x in pieces]
                br_r = [_sop(x.T) for x in pieces]
            self._c[key] = (fwd, br, rev, br_r)
        return self._c[key]


def continuous_passes(protocol: Protocol, kit, detections: np.ndarray, final_control: np.ndarray,
                      passkit: PassKit | None = None) -> tuple:
    """(ln P[Y], ln P_tr[reversed Y], I_te[Y]) for every trajectory's detection record.

    ``detections[n, k]`` is the label index detected in grid step k, or -1. States are
    kept as columns of a (d*d, n) array so every map is one matrix product.
    """
    p = protocol
    mon = p.monitor
    pk = passkit or PassKit(p, kit)
    n, d = detections.shape[0], p.dim
    diag = pk.diag
    total = detections.shape[1]
    rho = np.repeat(p.initial.mat.astype(complex).reshape(-1, 1), n, axis=1)
    ctl = np.zeros(n, dtype=int)
    ctl_hist = np.zeros((n, total), dtype=np.int16)
    stage_ctl = {}
    logp = np.zeros(n)
    ite = np.zeros(n)
    times = p.stage_times
    base = 0
    starts = {}
    for i, s in enumerate(p.stages):
        if isinstance(s, Evolve):
            g = kit.grid[i]
            starts[i] = base
            for k in range(g.steps):
                col = detections[:, base + k]
                ctl_hist[:, base + k] = ctl if s.control is None else s.control
                for c, idx in _groups(ctl, s.control):
                    fwd, br, _, _ = pk.step(i, c, k)
                    r = fwd @ rho[:, idx]
                    if br:
                        outs = [b @ r for b in br]
                        w = np.stack([o[diag].real.sum(axis=0) for o in outs])
                        avg = np.zeros(r.shape[1])
                        for b_i, o in enumerate(outs):
                            ok = w[b_i] > 0
                            if ok.all():
                                avg += w[b_i] * _vec_entropy(o / w[b_i], d)
                            elif ok.any():
                                avg[ok] += w[b_i, ok] * _vec_entropy(o[:, ok] / w[b_i, ok], d)
                        ite[idx] += _vec_entropy(r, d) - avg
                        ch = col[idx] + 1
                        r = outs[0]
                        for b_i in range(1, len(outs)):
                            m = ch == b_i
                            if m.any():
                                r[:, m] = outs[b_i][:, m]
                                act = mon.action(mon.labels[b_i - 1])
                                if act.control is not None:
                                    ctl[_sub(idx, m)] = act.control
                        wc = np.take_along_axis(w, ch[None, :], axis=0)[0]
                        with np.errstate(divide="ignore"):
                            logp[idx] += np.log(wc)
                        r = r / np.where(wc > 0, wc, 1.0)
                    rho[:, idx] = r
            base += g.steps
        elif isinstance(s, Thermalize):
            stage_ctl[i] = ctl.copy() if s.control is None else np.full(n, s.control)
            for c, idx in _groups(stage_ctl[i]):
                rho[:, idx] = thermal_state(p.controls[c].hamiltonian(times[i]), p.beta).mat.reshape(-1, 1)
        elif isinstance(s, Kick):
            rho = _sop(np.asarray(s.unitary)) @ rho
        elif isinstance(s, Measure):
            raise ProtocolError("continuous-mode protocols cannot also contain discrete measurements")

    # reversed experiment: start from Theta rho_r Theta^-1 and undo every piece
    lptr = np.zeros(n)
    rho = np.empty((d * d, n), dtype=complex)
    for c, idx in _groups(final_control):
        rho[:, idx] = np.conj(p.reference_state(c).mat).reshape(-1, 1)
    for i in range(len(p.stages) - 1, -1, -1):
        s = p.stages[i]
        if isinstance(s, Evolve):
            g = kit.grid[i]
            b0 = starts[i]
            for k in range(g.steps - 1, -1, -1):
                col = detections[:, b0 + k]
                for c, idx in _groups(ctl_hist[:, b0 + k]):
                    _, _, rev, br_r = pk.step(i, c, k)
                    r = rho[:, idx]
                    if br_r:
                        ch = col[idx] + 1
                        new = br_r[0] @ r
                        for b_i in range(1, len(br_r)):
                            m = ch == b_i
                            if m.any():
                                new[:, m] = br_r[b_i] @ r[:, m]
                        w = new[diag].real.sum(axis=0)
                        with np.errstate(divide="ignore"):
                            lptr[idx] += np.log(np.clip(w, 0.0, None))
                        r = new / np.where(w > 0, w, 1.0)
                    rho[:, idx] = rev @ r
        elif isinstance(s, Thermalize):
            for c, idx in _groups(stage_ctl[i]):
                w = rho[diag][:, idx].real.sum(axis=0)
                gibbs = np.conj(thermal_state(p.controls[c].hamiltonian(times[i]), p.beta).mat).reshape(-1, 1)
                rho[:, idx] = gibbs * w
        elif isinstance(s, Kick):
            rho = _sop(np.asarray(s.unitary).T) @ rho
    w = rho[diag].real.sum(axis=0)
    with np.errstate(divide="ignore"):
        lptr += np.log(np.clip(w, 0.0, None))
    return logp, lptr, ite


# ---------------------------------------------------------------- postselection

@dataclass(frozen=True)
class PostselectionRow:
    y: tuple
    runs: int
    accepted: int
    p_tr: float

    @property
    def rate(self) -> float:
        return self.accepted / self.runs if self.runs else math.nan

    @property
    def se(self) -> float:
        if self.runs < 2:
            return math.nan
        q = self.rate
        return math.sqrt(max(q * (1 - q), 1.0 / self.runs) / self.runs)


POSTSELECT_OFFSET = 2**40


def postselection_simulate(protocol: Protocol, n: int, seed: int = 0, dt=None, threads: int = 1) -> list:
    """Sample Y from the forward experiment, then run each backward experiment and count acceptances.

    The backward run for the k-th distinct Y (in sorted order) uses trajectory indices
    starting at (k + 1) * 2**40 of the same seed.
    """
    from .engine import run_batch

    if protocol.mode != "discrete":
        raise ProtocolError("postselection simulation needs a discrete protocol")
    fwd = run_batch(protocol, n, seed, dt, threads, accounting=False)
    sets = protocol.outcome_sets()
    ys = [tuple(sets[m][r] for m, r in enumerate(row)) for row in fwd.column("outcomes")]
    counts = {}
    for y in ys:
        counts[y] = counts.get(y, 0) + 1
    rows = []
    for k, y in enumerate(sorted(counts)):
        rev = reverse_protocol(protocol, y)
        pr = rev.as_protocol()
        b = run_batch(pr, counts[y], seed, dt, threads, start=(k + 1) * POSTSELECT_OFFSET, accounting=False)
        acc = int((b.column("outcomes") == 0).all(axis=1).sum()) if pr.measure_indices else counts[y]
        rows.append(PostselectionRow(y, counts[y], acc, reversed_weight(rev, "exact", dt)[0]))
    return rows


def write_postselection_csv(rows, fh) -> None:
    import csv

    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["history", "runs", "accepted", "rate", "rate_se", "p_tr"])
    for r in rows:
        w.writerow(["/".join(r.y), r.runs, r.accepted, repr(r.rate), repr(r.se), repr(r.p_tr)])

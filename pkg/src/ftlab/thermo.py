"""Thermodynamic bookkeeping: entropy production, coarse-grained entropy, information, work.

Entropies and information are in nats. Heat is energy released to the bath, so
sigma = ln p_a - ln p_f + beta Q.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .propagation import (
    Propagator,
    adjoint_superop,
    continuous_class_states,
    dissipation_ops,
    forward_weight,
    is_constant,
    reversed_weight,
    thermalize_map,
)
from .protocol import Evolve, Kick, Measure, Protocol, Thermalize, reverse_protocol
from .qdyn import (
    dag,
    entropy_of,
    expm,
    lindbladian,
    spre_post,
    unitary_propagator,
)

INF = math.inf


# ---------------------------------------------------------------- single trajectories

@dataclass(frozen=True)
class EntropyLedger:
    delta_s: float
    heat: float
    beta: float
    sigma_cg: float | None = None

    @property
    def sigma(self) -> float:
        return self.delta_s + self.beta * self.heat

    @property
    def infinite(self) -> bool:
        return math.isinf(self.sigma) or (self.sigma_cg is not None and math.isinf(self.sigma_cg))


def delta_entropy(p_a, p_f):
    """-ln p_f + ln p_a, +inf where p_f = 0 (absolute irreversibility)."""
    p_a = np.asarray(p_a, float)
    p_f = np.asarray(p_f, float)
    with np.errstate(divide="ignore"):
        return np.where(p_f > 0, np.log(p_a) - np.log(np.where(p_f > 0, p_f, 1.0)), INF)


def entropy_production(record, protocol: Protocol, sigma_cg: float | None = None) -> EntropyLedger:
    ds = float(delta_entropy(record.p_a, record.p_f))
    return EntropyLedger(ds, float(record.heat), protocol.beta, sigma_cg if sigma_cg is not None else record.sigma_cg)


def log_ratio(p: float, p_tr: float) -> float:
    if p_tr <= 0:
        return INF
    if p <= 0:
        return -INF
    return math.log(p) - math.log(p_tr)


def sigma_cg(protocol: Protocol, y, mode: str = "exact", dt=None) -> float:
    """ln(P[Y] / P_tr[reversed Y]); +inf when the backward experiment cannot produce Y."""
    y = tuple(str(v) for v in y)
    p = forward_weight(protocol, y, mode, dt)[0]
    ptr = reversed_weight(reverse_protocol(protocol, y), mode, dt)[0]
    return log_ratio(p, ptr)


# ---------------------------------------------------------------- estimators

@dataclass(frozen=True)
class EnsembleEstimate:
    """Streaming mean and variance (Chan et al. merge); merge is associative and commutative."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, values) -> "EnsembleEstimate":
        x = np.asarray(values, float).ravel()
        if x.size == 0:
            return cls()
        mu = float(x.mean())
        return cls(int(x.size), mu, float(((x - mu) ** 2).sum()))

    def merge(self, other: "EnsembleEstimate") -> "EnsembleEstimate":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta**2 * self.count * other.count / n
        return EnsembleEstimate(n, mean, m2)

    def push(self, x: float) -> "EnsembleEstimate":
        return self.merge(EnsembleEstimate(1, float(x), 0.0))

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else math.nan

    @property
    def se(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count > 1 else math.nan

    def within(self, target: float, k: float) -> bool:
        return abs(self.mean - target) <= k * self.se


def merged(parts) -> EnsembleEstimate:
    out = EnsembleEstimate()
    for p in parts:
        out = out.merge(p)
    return out


OBSERVABLES = ("sigma", "sigma_cg", "exp_minus_sigma", "exp_minus_sigma_minus_cg", "i_te", "i_mi", "work",
               "heat", "quantum_heat")


def ensemble_averages(batch, protocol: Protocol | None = None) -> dict:
    """Per-observable EnsembleEstimate over a sampled Batch.

    Trajectories with infinite sigma or sigma_cg are excluded from every average and
    counted in ``n_excluded``.
    """
    if len(batch) < 2:
        raise ValueError("need at least two trajectories")
    parts = {k: [] for k in OBSERVABLES}
    excluded, max_ems = 0, 0.0
    for c in batch.chunks:
        ex = c.extra
        s = ex["sigma"]
        cg = ex.get("sigma_cg", np.zeros_like(s))
        ok = np.isfinite(s) & np.isfinite(cg)
        excluded += int((~ok).sum())
        cols = {
            "sigma": s,
            "sigma_cg": cg,
            "exp_minus_sigma": np.exp(-np.where(ok, s, 0.0)),
            "exp_minus_sigma_minus_cg": np.exp(-(np.where(ok, s - cg, 0.0))),
            "work": c.work,
            "heat": c.heat,
            "quantum_heat": c.quantum_heat,
        }
        for k in ("i_te", "i_mi"):
            if k in ex:
                cols[k] = ex[k]
        for k, v in cols.items():
            parts[k].append(EnsembleEstimate.of(np.asarray(v)[ok]))
        if ok.any():
            max_ems = max(max_ems, float(cols["exp_minus_sigma"][ok].max()))
    out = {k: merged(v) for k, v in parts.items() if v}
    out["n_excluded"] = excluded
    ems = out["exp_minus_sigma"]
    out["heavy_tail"] = bool(ems.count and max_ems > 10 * ems.mean * math.sqrt(ems.count))
    if out["heavy_tail"]:
        warnings.warn("e^-sigma sample is heavy tailed; its standard error is unreliable", RuntimeWarning)
    if excluded:
        warnings.warn(f"{excluded} trajectories with infinite sigma or sigma_cg were excluded", RuntimeWarning)
    return out


# ---------------------------------------------------------------- conditional states

def _vn(rho_unnormalised: np.ndarray) -> tuple:
    """(weight, entropy of the normalised state)."""
    w = float(np.trace(rho_unnormalised).real)
    if w <= 0:
        return 0.0, 0.0
    r = rho_unnormalised / w
    return w, entropy_of(np.linalg.eigvalsh(0.5 * (r + dag(r))))


class HeatMaps:
    """Evolve-stage superoperators together with their heat-weighted companions.

    For a stage map S the companion J gives the mean heat tr(unvec(J vec rho)) released
    while S acts on rho.
    """

    def __init__(self, protocol, mode: str = "exact", dt=None):
        self.p = protocol
        self.mode = mode
        self.prop = Propagator(protocol, mode, dt)
        self._c = {}

    def get(self, stage: int, control: int) -> tuple:
        key = (stage, control)
        if key not in self._c:
            self._c[key] = self._build(stage, control)
        return self._c[key]

    def _build(self, stage, control):
        d2 = self.p.dim**2
        c = self.p.controls[control]
        n, h, t0 = self.prop._substeps(stage)
        if n == 0:
            return np.eye(d2, dtype=complex), np.zeros((d2, d2), dtype=complex)

        def generator(t):
            lv = lindbladian(c.hamiltonian(t), c.channels)
            jv = sum((ch.heat * spre_post(ch.operator, dag(ch.operator)) for ch in c.channels),
                     np.zeros((d2, d2), dtype=complex))
            return np.block([[lv, np.zeros_like(lv)], [jv, lv]])

        def grid_step(t):
            u = adjoint_superop(unitary_propagator(c.hamiltonian(t), h))
            ops = dissipation_ops(c.channels, h)
            phi = np.eye(d2, dtype=complex) if ops.k0 is None else adjoint_superop(ops.k0)
            jv = np.zeros((d2, d2), dtype=complex)
            for q, j in zip(ops.heats, ops.jumps):
                phi = phi + adjoint_superop(j)
                jv = jv + q * adjoint_superop(j)
            s = phi @ u
            return np.block([[s, np.zeros_like(s)], [jv @ u, s]])

        if is_constant(c.schedule):
            if self.mode == "exact":
                a = expm(generator(t0) * (n * h))
            else:
                a = np.linalg.matrix_power(grid_step(t0), n)
        else:
            a = np.eye(2 * d2, dtype=complex)
            for k in range(n):
                t = t0 + (k + 0.5) * h
                a = (expm(generator(t) * h) if self.mode == "exact" else grid_step(t)) @ a
        return a[:d2, :d2], a[d2:, :d2]


@dataclass
class Branch:
    rho: np.ndarray  # unnormalised, weight P[prefix]
    control: int
    chi: np.ndarray | None = None  # heat-weighted companion; tr(chi) = P[prefix] * mean heat so far

    def __post_init__(self):
        if self.chi is None:
            self.chi = np.zeros_like(self.rho)

    @property
    def heat(self) -> float:
        return float(np.trace(self.chi).real)


@dataclass
class ConditionalTree:
    """Outcome-conditioned states of a discrete protocol, measurement by measurement."""

    pre: list = field(default_factory=list)  # per measurement: prefix -> state just before it
    post: list = field(default_factory=list)  # per measurement: prefix+y -> state just after M_y
    final: dict = field(default_factory=dict)  # full Y -> Branch at tau
    work: float = 0.0
    quantum_heat: float = 0.0


def conditional_tree(protocol: Protocol, mode: str = "exact", dt=None) -> ConditionalTree:
    if protocol.mode != "discrete":
        raise ValueError("conditional trees are built for discrete protocols")
    p = protocol
    d = p.dim
    maps = HeatMaps(p, mode, dt)
    tree = ConditionalTree()
    branches = {(): Branch(p.initial.mat.astype(complex), 0)}
    times = p.stage_times
    n = 0
    for i, s in enumerate(p.stages):
        if isinstance(s, Evolve):
            for b in branches.values():
                sm, jm = maps.get(i, p.active_control(b.control, s))
                v = b.rho.reshape(-1)
                b.chi = (sm @ b.chi.reshape(-1) + jm @ v).reshape(d, d)
                b.rho = (sm @ v).reshape(d, d)
        elif isinstance(s, Thermalize):
            for b in branches.values():
                hm = p.controls[p.active_control(b.control, s)].hamiltonian(times[i])
                pieces = thermalize_map(hm, p.beta)
                v = b.rho.reshape(-1)
                b.chi = sum(sp @ b.chi.reshape(-1) + q * (sp @ v) for q, sp in pieces).reshape(d, d)
                b.rho = sum(sp @ v for _, sp in pieces).reshape(d, d)
        elif isinstance(s, Kick):
            for b in branches.values():
                b.rho = s.unitary @ b.rho @ dag(s.unitary)
                b.chi = s.unitary @ b.chi @ dag(s.unitary)
        elif isinstance(s, Measure):
            tree.pre.append({k: b.rho.copy() for k, b in branches.items()})
            post, new = {}, {}
            for key, b in branches.items():
                hm = p.controls[b.control].hamiltonian(times[i])
                for y in s.kraus.outcomes:
                    m = s.kraus[y]
                    r = m @ b.rho @ dag(m)
                    chi = m @ b.chi @ dag(m)
                    k2 = key + (y,)
                    post[k2] = r
                    tree.quantum_heat += float(np.trace(hm @ r).real)
                    act, c2 = p.control_after(list(k2), n, b.control)
                    if act.unitary is not None:
                        u = act.unitary
                        r2 = u @ r @ dag(u)
                        tree.work += float(np.trace(hm @ r).real - np.trace(hm @ r2).real)
                        r = r2
                        chi = u @ chi @ dag(u)
                    new[k2] = Branch(r, c2, chi)
                tree.quantum_heat -= float(np.trace(hm @ b.rho).real)
            tree.post.append(post)
            branches = new
            n += 1
    tree.final = branches
    return tree


def b_weight(b: Branch) -> float:
    return float(np.trace(b.rho).real)


def information_by_history(tree: ConditionalTree) -> dict:
    """Transfer-entropy contribution of every full history Y (its average over Y is <I_te>).

    I_te[Y] = sum_n [ S(rho^{Y_n} before measurement n+1) - sum_y P(y|Y_n) S(rho^{Y_n y}) ].
    """
    per_prefix = []
    for pre, post in zip(tree.pre, tree.post):
        gain = {}
        for key, rho in pre.items():
            w, s_pre = _vn(rho)
            if w <= 0:
                gain[key] = 0.0
                continue
            avg = 0.0
            for k2, r in post.items():
                if k2[:-1] == key:
                    wy, sy = _vn(r)
                    avg += wy / w * sy
            gain[key] = s_pre - avg
        per_prefix.append(gain)
    return {y: sum(g[y[:n]] for n, g in enumerate(per_prefix)) for y in tree.final}


def _final_entropy_term(protocol: Protocol, branches) -> float:
    """sum over branches of -sum_f <f|rho|f> ln p_f for the branch's reference state."""
    out = 0.0
    for b in branches:
        ref = protocol.reference_state(b.control).spectrum
        pf = np.array([np.vdot(ref.vectors[:, f], b.rho @ ref.vectors[:, f]).real for f in range(ref.dim)])
        for w, p in zip(pf, ref.values):
            if w > 1e-15:
                if p <= 0:
                    return INF
                out -= w * math.log(p)
    return out


def exact_averages(protocol: Protocol, mode: str = "exact", dt=None, with_enumeration: bool = True) -> dict:
    """Ensemble averages computed by propagation rather than sampling.

    Discrete protocols: <sigma>, <sigma_cg>, <I_te> (and <I_mi> for one measurement),
    <W>, beta<W>, quantum heat, <Q>, and with ``with_enumeration`` the heat-resolved
    averages <e^-sigma> and <e^-(sigma - sigma_cg)>. Continuous protocols: <sigma>, <Q>.
    """
    p = protocol
    pa = np.clip(p.initial.spectrum.values, 0, None)
    s_a = float(sum(x * math.log(x) for x in pa if x > 0))
    out = {"mode": mode}
    if p.mode == "continuous":
        states, heat = continuous_class_states(p, dt, with_heat=True)
        branches = [Branch(r, c) for c, r in states.items()]
        out["heat"] = heat
        out["sigma"] = s_a + _final_entropy_term(p, branches) + p.beta * heat
        return out
    tree = conditional_tree(p, mode, dt)
    heat = sum(b.heat for b in tree.final.values())
    out["heat"] = heat
    out["sigma"] = s_a + _final_entropy_term(p, tree.final.values()) + p.beta * heat
    cg, pys, ptrs = 0.0, {}, {}
    for y, b in tree.final.items():
        py = b_weight(b)
        ptr = reversed_weight(reverse_protocol(p, y), mode, dt)[0]
        pys[y], ptrs[y] = py, ptr
        if py > 0:
            cg += py * log_ratio(py, ptr)
    out["sigma_cg"] = cg
    out["P"] = pys
    out["P_tr"] = ptrs
    info = information_by_history(tree)
    out["i_te"] = float(sum(pys[y] * info[y] for y in info))
    if len(p.measure_indices) == 1:
        out["i_mi"] = out["i_te"]
    out["work"] = tree.work
    out["beta_work"] = p.beta * tree.work
    out["quantum_heat"] = tree.quantum_heat
    out["total_probability"] = float(sum(pys.values()))
    if with_enumeration and mode == "exact":
        from .oracle import enumerate_protocol, row_summary
        from .propagation import HeatQuantizationError

        try:
            rs = row_summary(enumerate_protocol(p), p.beta)
            out["exp_minus_sigma"] = rs["exp_minus_sigma"]
            out["exp_minus_sigma_minus_cg"] = rs["exp_minus_sigma_minus_cg"]
        except HeatQuantizationError:
            pass
    return out


def mutual_information(protocol: Protocol, mode: str = "exact", dt=None) -> float:
    if len(protocol.measure_indices) != 1:
        raise ValueError("mutual information is defined here for exactly one measurement")
    return exact_averages(protocol, mode, dt, with_enumeration=False)["i_te"]


def transfer_entropy(protocol: Protocol, mode: str = "exact", dt=None) -> float:
    return exact_averages(protocol, mode, dt, with_enumeration=False)["i_te"]


def extracted_work(protocol: Protocol, mode: str = "exact", dt=None) -> float:
    return exact_averages(protocol, mode, dt, with_enumeration=False)["work"]


# ---------------------------------------------------------------- CSV

SWEEP_COLUMNS = (
    "parameter", "value", "source", "n", "sigma", "sigma_se", "sigma_cg", "sigma_cg_se", "info", "info_se",
    "info_kind", "beta_work", "beta_work_se", "exp_minus_sigma", "exp_minus_sigma_se",
    "exp_minus_sigma_minus_cg", "exp_minus_sigma_minus_cg_se", "n_excluded",
)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def write_sweep_csv(rows, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in SWEEP_COLUMNS])


def sweep_row(parameter: str, value: float, source: str, stats: dict, beta: float, info_kind: str) -> dict:
    """One CSV row from exact_averages output (source 'exact') or ensemble_averages output."""
    row = {"parameter": parameter, "value": value, "source": source, "info_kind": info_kind}
    if source == "exact":
        row.update(
            n="",
            sigma=stats.get("sigma"),
            sigma_cg=stats.get("sigma_cg"),
            info=stats.get(info_kind),
            beta_work=stats.get("beta_work"),
            exp_minus_sigma=stats.get("exp_minus_sigma"),
            exp_minus_sigma_minus_cg=stats.get("exp_minus_sigma_minus_cg"),
            n_excluded=0,
        )
        return row
    row["n"] = stats["sigma"].count + stats["n_excluded"]
    for k in ("sigma", "sigma_cg", "exp_minus_sigma", "exp_minus_sigma_minus_cg"):
        row[k], row[k + "_se"] = stats[k].mean, stats[k].se
    if info_kind in stats:
        row["info"], row["info_se"] = stats[info_kind].mean, stats[info_kind].se
    row["beta_work"], row["beta_work_se"] = beta * stats["work"].mean, beta * stats["work"].se
    row["n_excluded"] = stats["n_excluded"]
    return row

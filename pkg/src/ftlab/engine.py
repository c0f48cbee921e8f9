"""Monte Carlo sampling of quantum-jump trajectories.

Trajectories are pure states evolved on the grid step model of ``propagation``: per step
a unitary, then one draw that selects either no jump (Kraus sqrt(I - h sum L^dag L)) or
jump j (probability h <L_j^dag L_j>), then in continuous mode one more draw for the
monitored detections. Measurements, Gibbs resets and kicks happen between steps.

Every trajectory owns a Philox stream keyed by (seed, index) and consumes a fixed
number of uniforms, so a trajectory is bit-identical whatever chunk or thread runs it.
Chunks of ``CHUNK`` trajectories are simulated as numpy stacks and merged in index order.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .propagation import check_step_cap, dissipation_ops, is_constant, monitor_ops
from .protocol import Evolve, Kick, Measure, Protocol, Thermalize, lookup_action
from .qdyn import eigenbasis, gibbs_weights, unitary_propagator

CHUNK = 4096
SEED_LIMIT = 2**64


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    if not 0 <= seed < SEED_LIMIT or index < 0:
        raise ValueError("seed must be in [0, 2**64) and index >= 0")
    return np.random.Generator(np.random.Philox(key=seed * SEED_LIMIT + index))


def draws_per_trajectory(protocol: Protocol, dt: float | None = None) -> int:
    n = 2  # initial label a, final label f
    for s in protocol.stages:
        if isinstance(s, Measure):
            n += 1
        elif isinstance(s, Thermalize):
            n += 2
    per_step = 2 if protocol.monitor is not None else 1
    return n + per_step * sum(g.steps for g in protocol.grid(dt))


def draw_matrix(seed: int, start: int, stop: int, width: int) -> np.ndarray:
    """(width, stop - start) uniforms; column i equals trajectory_rng(seed, start + i).random(width)."""
    if not 0 <= seed < SEED_LIMIT or start < 0:
        raise ValueError("seed must be in [0, 2**64) and index >= 0")
    bg = np.random.Philox(key=0)
    gen = np.random.Generator(bg)
    out = np.empty((stop - start, width))
    for r, i in enumerate(range(start, stop)):
        # same state as Philox(key=seed * 2**64 + i), without the constructor overhead
        bg.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.zeros(4, np.uint64), "key": np.array([i, seed], dtype=np.uint64)},
            "buffer": np.zeros(4, np.uint64),
            "buffer_pos": 4,
            "has_uint32": 0,
            "uinteger": 0,
        }
        out[r] = gen.random(width)
    return np.ascontiguousarray(out.T)


def pick(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Per column, the first row whose cumulative probability exceeds u; probs.shape[0] when none does."""
    return (u[None, :] >= np.cumsum(probs, axis=0)).sum(axis=0)


def _norm2(x):
    return (x.real**2 + x.imag**2).sum(axis=0)


def _normalize(x):
    return x / np.sqrt(_norm2(x))[None, :]


def _expect(x, h):
    return (x.conj() * (h @ x)).sum(axis=0).real


class StepKit:
    """Per-step operators (U, dissipation pieces, monitor pieces), shared by all chunks."""

    def __init__(self, protocol: Protocol, dt: float | None = None):
        self.p = protocol
        self.dt = protocol.step_size(dt)
        self.grid = {g.stage: g for g in protocol.grid(self.dt)}
        self.labels = sorted({ch.label for c in protocol.controls for ch in c.channels})
        self.label_id = [[self.labels.index(ch.label) for ch in c.channels] for c in protocol.controls]
        self._c = {}

    def key(self, stage: int, control: int, k: int) -> tuple:
        return (stage, control, None if is_constant(self.p.controls[control].schedule) else k)

    def step(self, stage: int, control: int, k: int) -> tuple:
        c = self.p.controls[control]
        key = self.key(stage, control, k)
        if key not in self._c:
            g = self.grid[stage]
            u = unitary_propagator(c.hamiltonian(g.t0 + (k + 0.5) * g.h), g.h)
            mon = monitor_ops(self.p.monitor.scaled(), g.h) if self.p.monitor is not None else (None, (), 0.0)
            self._c[key] = (u, dissipation_ops(c.channels, g.h), mon)
        return self._c[key]

    def prepare(self) -> "StepKit":
        """Fill the cache up front so worker threads only read it."""
        for i, g in self.grid.items():
            s = self.p.stages[i]
            cs = [s.control] if s.control is not None else range(len(self.p.controls))
            for c in cs:
                for k in range(g.steps):
                    self.step(i, c, k)
        return self


ALL = slice(None)


def _groups(ctl: np.ndarray, override=None):
    """(control, index) pairs; the index is ALL when every trajectory shares one control."""
    if override is not None:
        return [(override, ALL)]
    lo, hi = int(ctl.min()), int(ctl.max())
    if lo == hi:
        return [(lo, ALL)]
    return [(int(c), np.flatnonzero(ctl == c)) for c in np.unique(ctl)]


def _sub(idx, mask):
    return np.flatnonzero(mask) if isinstance(idx, slice) else idx[mask]


@dataclass
class Chunk:
    start: int
    a: np.ndarray
    f: np.ndarray
    p_a: np.ndarray
    p_f: np.ndarray
    heat: np.ndarray
    work: np.ndarray
    quantum_heat: np.ndarray
    final_control: np.ndarray
    outcomes: np.ndarray  # (n, measurements) outcome indices, discrete mode
    detections: np.ndarray  # (n, grid steps) label index or -1, continuous mode
    jumps: tuple  # (trajectory offset, time, channel label id) arrays sorted by trajectory then time
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.a)


def run_chunk(protocol: Protocol, kit: StepKit, seed: int, start: int, stop: int) -> Chunk:
    p = protocol
    n, d = stop - start, p.dim
    u = draw_matrix(seed, start, stop, draws_per_trajectory(p, kit.dt))
    col = 0

    eig = p.initial.spectrum
    w0 = np.clip(eig.values, 0, None)
    a = np.minimum(pick(u[col], w0[:, None]), d - 1)
    col += 1
    psi = eig.vectors[:, a].astype(complex)  # (d, n): one column per trajectory
    p_a = w0[a]

    ctl = np.zeros(n, dtype=int)
    heat = np.zeros(n)
    work = np.zeros(n)
    qheat = np.zeros(n)
    outcomes = np.zeros((n, len(p.measure_indices)), dtype=int)
    total_steps = sum(g.steps for g in kit.grid.values())
    detections = np.full((n, total_steps if p.monitor is not None else 0), -1, dtype=np.int16)
    jt, jtime, jlab = [], [], []
    step_base, meas_n = 0, 0
    times = p.stage_times
    mon = p.monitor
    sets = p.outcome_sets()

    for i, s in enumerate(p.stages):
        if isinstance(s, Evolve):
            g = kit.grid[i]
            for k in range(g.steps):
                t_end = g.t0 + (k + 1) * g.h
                uj = u[col]
                um = u[col + 1] if mon is not None else None
                col += 2 if mon is not None else 1
                for c, idx in _groups(ctl, s.control):
                    uk, ops, (k0m, dets, _) = kit.step(i, c, k)
                    x = uk @ psi[:, idx]
                    if ops.jumps:
                        amps = [j @ x for j in ops.jumps]
                        ch = pick(uj[idx], np.stack([_norm2(v) for v in amps]))
                        new = ops.k0 @ x
                        for j, v in enumerate(amps):
                            m = ch == j
                            if m.any():
                                new[:, m] = v[:, m]
                                sel = _sub(idx, m)
                                heat[sel] += ops.heats[j]
                                jt.append(sel)
                                jtime.append(np.full(len(sel), t_end))
                                jlab.append(np.full(len(sel), kit.label_id[c][j]))
                        x = _normalize(new)
                    if k0m is not None:
                        amps = [m_ @ x for m_ in dets]
                        ch = pick(um[idx], np.stack([_norm2(v) for v in amps]))
                        new = k0m @ x
                        for y, v in enumerate(amps):
                            m = ch == y
                            if not m.any():
                                continue
                            sel = _sub(idx, m)
                            detections[sel, step_base + k] = y
                            post = _normalize(v[:, m])
                            act = mon.action(mon.labels[y])
                            if act.unitary is not None:
                                hm = p.controls[c].hamiltonian(t_end)
                                after = act.unitary @ post
                                work[sel] += _expect(post, hm) - _expect(after, hm)
                                post = after
                            if act.control is not None:
                                ctl[sel] = act.control
                            new[:, m] = post
                        x = _normalize(new)
                    psi[:, idx] = x
            step_base += g.steps
        elif isinstance(s, Measure):
            kr = s.kraus
            amps = [m_ @ psi for m_ in kr.operators]
            y = np.minimum(pick(u[col], np.stack([_norm2(v) for v in amps])), len(kr) - 1)
            col += 1
            post = np.empty_like(psi)
            for k, v in enumerate(amps):
                m = y == k
                post[:, m] = v[:, m]
            post = _normalize(post)
            for c, idx in _groups(ctl):
                hm = p.controls[c].hamiltonian(times[i])
                qheat[idx] += _expect(post[:, idx], hm) - _expect(psi[:, idx], hm)
            psi = post
            outcomes[:, meas_n] = y
            keys, inv = np.unique(outcomes[:, : meas_n + 1], axis=0, return_inverse=True)
            inv = np.asarray(inv).reshape(-1)
            for gi, row in enumerate(keys):
                act = lookup_action(s.feedback, [sets[m][r] for m, r in enumerate(row)])
                sel = np.flatnonzero(inv == gi)
                if act.unitary is not None:
                    for c, sub in _groups(ctl[sel]):
                        tgt = sel[sub]
                        hm = p.controls[c].hamiltonian(times[i])
                        x = psi[:, tgt]
                        after = act.unitary @ x
                        work[tgt] += _expect(x, hm) - _expect(after, hm)
                        psi[:, tgt] = after
                if act.control is not None:
                    ctl[sel] = act.control
            meas_n += 1
        elif isinstance(s, Thermalize):
            for c, idx in _groups(ctl, s.control):
                sp = eigenbasis(p.controls[c].hamiltonian(times[i]), descending=False)
                wb = np.abs(sp.vectors.conj().T @ psi[:, idx]) ** 2
                b = np.minimum(pick(u[col][idx], wb), d - 1)
                gw = gibbs_weights(sp.values, p.beta)
                f2 = np.minimum(pick(u[col + 1][idx], gw[:, None]), d - 1)
                heat[idx] += sp.values[b] - sp.values[f2]
                psi[:, idx] = sp.vectors[:, f2]
            col += 2
        elif isinstance(s, Kick):
            psi = np.asarray(s.unitary) @ psi

    f = np.zeros(n, dtype=int)
    p_f = np.zeros(n)
    for c, idx in _groups(ctl):
        ref = p.reference_state(c).spectrum
        wf = np.abs(ref.vectors.conj().T @ psi[:, idx]) ** 2
        f[idx] = np.minimum(pick(u[col][idx], wf), d - 1)
        p_f[idx] = np.clip(ref.values, 0, None)[f[idx]]
    col += 1
    assert col == u.shape[0]

    if jt:
        tr, tm, lb = (np.concatenate(v) for v in (jt, jtime, jlab))
        order = np.lexsort((tm, tr))
        jumps = (tr[order], tm[order], lb[order])
    else:
        jumps = (np.zeros(0, int), np.zeros(0), np.zeros(0, int))
    return Chunk(start, a, f, p_a, p_f, heat, work, qheat, ctl, outcomes, detections, jumps)


# ---------------------------------------------------------------- records and batches

@dataclass(frozen=True)
class TrajectoryRecord:
    index: int
    a: int
    f: int
    jumps: tuple  # (time, channel label)
    outcomes: tuple  # (time, outcome label)
    heat: float
    p_a: float
    p_f: float
    work: float = 0.0
    sigma: float | None = None
    sigma_cg: float | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "index": self.index,
                "a": self.a,
                "f": self.f,
                "jumps": [[t, j] for t, j in self.jumps],
                "outcomes": [[t, y] for t, y in self.outcomes],
                "heat": self.heat,
                "p_a": self.p_a,
                "p_f": self.p_f,
                "work": self.work,
                "sigma": _finite_or_str(self.sigma),
                "sigma_cg": _finite_or_str(self.sigma_cg),
            },
            separators=(",", ":"),
        )


def _finite_or_str(x):
    if x is None or math.isfinite(x):
        return x
    return "inf" if x > 0 else "-inf"


@dataclass
class Batch:
    protocol: Protocol
    seed: int
    dt: float
    chunks: list
    channel_labels: list = field(default_factory=list)

    def __len__(self):
        return sum(len(c) for c in self.chunks)

    def column(self, name: str) -> np.ndarray:
        if hasattr(self.chunks[0], name):
            return np.concatenate([getattr(c, name) for c in self.chunks])
        return np.concatenate([c.extra[name] for c in self.chunks])

    def has(self, name: str) -> bool:
        return bool(self.chunks) and name in self.chunks[0].extra

    def history_labels(self, chunk: Chunk, j: int) -> tuple:
        p = self.protocol
        if p.mode == "discrete":
            ts, sets = p.measurement_times, p.outcome_sets()
            return tuple((ts[m], sets[m][r]) for m, r in enumerate(chunk.outcomes[j]))
        steps = np.flatnonzero(chunk.detections[j] >= 0)
        ends = _step_end_times(p, self.dt)
        return tuple((float(ends[k]), p.monitor.labels[chunk.detections[j, k]]) for k in steps)

    def records(self):
        for c in self.chunks:
            jt, jtime, jlab = c.jumps
            bounds = np.searchsorted(jt, np.arange(len(c) + 1))
            lab = self.channel_labels
            for j in range(len(c)):
                sl = slice(bounds[j], bounds[j + 1])
                yield TrajectoryRecord(
                    index=c.start + j,
                    a=int(c.a[j]),
                    f=int(c.f[j]),
                    jumps=tuple((float(t), lab[int(q)]) for t, q in zip(jtime[sl], jlab[sl])),
                    outcomes=self.history_labels(c, j),
                    heat=float(c.heat[j]),
                    p_a=float(c.p_a[j]),
                    p_f=float(c.p_f[j]),
                    work=float(c.work[j]),
                    sigma=float(c.extra["sigma"][j]) if "sigma" in c.extra else None,
                    sigma_cg=float(c.extra["sigma_cg"][j]) if "sigma_cg" in c.extra else None,
                )

    def dump_jsonl(self, fh) -> int:
        n = 0
        for r in self.records():
            fh.write(r.to_json() + "\n")
            n += 1
        return n


def _step_end_times(p: Protocol, dt: float) -> np.ndarray:
    out = [g.t0 + (np.arange(g.steps) + 1) * g.h for g in p.grid(dt)]
    return np.concatenate(out) if out else np.zeros(0)


def chunk_ranges(n: int, start: int = 0, chunk: int = CHUNK) -> list:
    return [(s, min(s + chunk, start + n)) for s in range(start, start + n, chunk)]


def run_batch(protocol: Protocol, n: int, seed: int = 0, dt: float | None = None, threads: int = 1,
              start: int = 0, chunk: int = CHUNK, accounting: bool = True) -> Batch:
    """Sample trajectories start .. start+n-1. Results do not depend on ``threads``.

    With ``accounting`` every chunk also gets sigma, sigma_cg and the information terms
    (see ``backward.Accountant``).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    check_step_cap(protocol, dt)
    kit = StepKit(protocol, dt).prepare()
    ranges = chunk_ranges(n, start, chunk)
    post = None
    if accounting:
        from .backward import Accountant

        post = Accountant(protocol, kit)

    def job(r):
        c = run_chunk(protocol, kit, seed, *r)
        if post is not None:
            post.attach(c)
        return c

    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            chunks = list(ex.map(job, ranges))
    else:
        chunks = [job(r) for r in ranges]
    return Batch(protocol, seed, kit.dt, chunks, kit.labels)


def run_trajectory(protocol: Protocol, seed: int = 0, index: int = 0, dt: float | None = None) -> TrajectoryRecord:
    return next(run_batch(protocol, 1, seed, dt, start=index).records())

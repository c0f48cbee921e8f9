"""Forward measurement-and-feedback protocols and their fixed-schedule reversals.

A protocol is a list of stages acting on a d-level system coupled to a thermal bath:

* ``Evolve``     Lindblad evolution for a duration under the active control.
* ``Measure``    a Kraus measurement followed by an outcome-dependent feedback action.
* ``Thermalize`` complete relaxation to the Gibbs state of the current Hamiltonian.
* ``Kick``       an instantaneous unitary (used by reversed protocols).

A *control* bundles a Hamiltonian schedule with the active jump channels. Feedback
actions may apply a unitary and/or switch the control that is used from then on.
In continuous mode a ``Monitor`` adds observed jumps with their own feedback.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .qdyn import (
    THETA,
    DensityMatrix,
    JumpChannel,
    KrausSet,
    QdynError,
    TimeReversal,
    as_matrix,
    dag,
    detailed_balance_residual,
    hermiticity_residual,
    reversed_kraus,
    thermal_state,
    TOL_DB,
    TOL_HERM,
)


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------- schedules

class Schedule:
    """Hamiltonian as a function of absolute protocol time."""

    def __call__(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def matrices(self) -> list:
        """Every matrix the schedule can return (for validation)."""
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantSchedule(Schedule):
    h: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "h", as_matrix(self.h, "hamiltonian"))

    def __call__(self, t):
        return self.h

    def matrices(self):
        return [self.h]


@dataclass(frozen=True)
class CosineDrive(Schedule):
    """H(t) = static + drive * cos(frequency * t + phase)."""

    static: np.ndarray
    drive: np.ndarray
    frequency: float
    phase: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "static", as_matrix(self.static, "static hamiltonian"))
        object.__setattr__(self, "drive", as_matrix(self.drive, "drive hamiltonian"))

    def __call__(self, t):
        return self.static + self.drive * math.cos(self.frequency * t + self.phase)

    def matrices(self):
        return [self.static, self.drive]


@dataclass(frozen=True)
class PiecewiseSchedule(Schedule):
    """Value matrices[k] on [times[k], times[k+1]); the last value holds beyond the table."""

    times: tuple
    mats: tuple

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        if len(ts) != len(self.mats) or not ts:
            raise ProtocolError("piecewise schedule needs one start time per matrix")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ProtocolError("piecewise schedule times must increase strictly")
        object.__setattr__(self, "times", ts)
        object.__setattr__(self, "mats", tuple(as_matrix(m, "hamiltonian") for m in self.mats))

    def __call__(self, t):
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.mats[max(k, 0)]

    def matrices(self):
        return list(self.mats)


@dataclass(frozen=True)
class ReversedSchedule(Schedule):
    """xi(t) = Theta H(tau - t) Theta^-1."""

    base: Schedule
    tau: float
    theta: TimeReversal = THETA

    def __call__(self, t):
        return self.theta.operator(self.base(self.tau - t))

    def matrices(self):
        return [self.theta.operator(m) for m in self.base.matrices()]


@dataclass(frozen=True)
class Control:
    schedule: Schedule
    channels: tuple = ()
    name: str = ""

    def hamiltonian(self, t: float) -> np.ndarray:
        return self.schedule(t)


# ---------------------------------------------------------------- stages

@dataclass(frozen=True)
class FeedbackAction:
    unitary: np.ndarray | None = None
    control: int | None = None

    def __post_init__(self):
        if self.unitary is not None:
            u = as_matrix(self.unitary, "feedback unitary")
            if np.abs(dag(u) @ u - np.eye(u.shape[0])).max() > 1e-10:
                raise ProtocolError("feedback operator is not unitary")
            object.__setattr__(self, "unitary", u)


NO_ACTION = FeedbackAction()


def lookup_action(feedback: Mapping[str, FeedbackAction], labels: Sequence[str]) -> FeedbackAction:
    """Full-history key 'y1/y2/...' first, then the latest outcome, then '*'."""
    if not labels:
        return NO_ACTION
    full = "/".join(labels)
    if full in feedback:
        return feedback[full]
    if labels[-1] in feedback:
        return feedback[labels[-1]]
    return feedback.get("*", NO_ACTION)


@dataclass(frozen=True)
class Evolve:
    duration: float
    control: int | None = None  # stage-level override of the feedback-selected control


@dataclass(frozen=True)
class Measure:
    kraus: KrausSet
    feedback: Mapping[str, FeedbackAction] = field(default_factory=dict)


@dataclass(frozen=True)
class Thermalize:
    control: int | None = None


@dataclass(frozen=True)
class Kick:
    unitary: np.ndarray


@dataclass(frozen=True)
class Monitor:
    """Continuously observed jumps sqrt(rate) * M_y, each followed by feedback V_y."""

    labels: tuple
    operators: tuple
    rate: float
    feedback: Mapping[str, FeedbackAction] = field(default_factory=dict)

    def __post_init__(self):
        if self.rate < 0:
            raise ProtocolError("monitoring rate must be non-negative")
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        object.__setattr__(self, "operators", tuple(as_matrix(m, "monitored operator") for m in self.operators))

    def scaled(self) -> list:
        return [math.sqrt(self.rate) * m for m in self.operators]

    def action(self, label: str) -> FeedbackAction:
        return lookup_action(self.feedback, [label])


@dataclass(frozen=True)
class Reference:
    kind: str = "thermal-final"  # thermal-final | average-final | explicit
    state: DensityMatrix | None = None

    def __post_init__(self):
        if self.kind not in ("thermal-final", "average-final", "explicit"):
            raise ProtocolError(f"unknown reference kind {self.kind!r}")
        if self.kind == "explicit" and self.state is None:
            raise ProtocolError("explicit reference needs a state")


@dataclass(frozen=True)
class GridSegment:
    stage: int
    t0: float
    steps: int
    h: float

    def midpoints(self) -> np.ndarray:
        return self.t0 + (np.arange(self.steps) + 0.5) * self.h


def stage_start_times(stages) -> list:
    t, out = 0.0, []
    for s in stages:
        out.append(t)
        if isinstance(s, Evolve):
            t += s.duration
    return out


def build_grid(stages, step: float) -> list:
    """Per evolve stage: equal sub-steps no longer than step, so stage boundaries are grid points."""
    out = []
    for i, (s, t0) in enumerate(zip(stages, stage_start_times(stages))):
        if isinstance(s, Evolve):
            n = int(math.ceil(s.duration / step - 1e-9)) if s.duration > 0 else 0
            out.append(GridSegment(i, t0, n, s.duration / n if n else 0.0))
    return out


# ---------------------------------------------------------------- protocol

@dataclass(frozen=True)
class Protocol:
    beta: float
    controls: tuple
    stages: tuple
    initial: DensityMatrix
    reference: Reference = Reference()
    monitor: Monitor | None = None
    dt: float | None = None
    p_step_max: float = 0.1
    allow_complex: bool = False
    name: str = ""
    parameters: Mapping = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        object.__setattr__(self, "stages", tuple(self.stages))
        self._validate()

    # -- structure

    @property
    def dim(self) -> int:
        return self.initial.dim

    @property
    def mode(self) -> str:
        return "continuous" if self.monitor is not None else "discrete"

    @property
    def stage_times(self) -> list:
        """Start time of every stage."""
        return stage_start_times(self.stages)

    @property
    def tau(self) -> float:
        return float(sum(s.duration for s in self.stages if isinstance(s, Evolve)))

    @property
    def measure_indices(self) -> list:
        return [i for i, s in enumerate(self.stages) if isinstance(s, Measure)]

    @property
    def measurement_times(self) -> list:
        ts = self.stage_times
        return [ts[i] for i in self.measure_indices]

    def outcome_sets(self) -> list:
        return [self.stages[i].kraus.outcomes for i in self.measure_indices]

    def all_histories(self) -> list:
        """Every outcome tuple Y of a discrete protocol, in lexicographic label order."""
        import itertools

        return [tuple(y) for y in itertools.product(*self.outcome_sets())]

    def step_size(self, dt: float | None = None) -> float:
        if dt is not None:
            return float(dt)
        if self.dt is not None:
            return float(self.dt)
        return self.tau / 1000 if self.tau > 0 else 1.0

    def grid(self, dt: float | None = None) -> list:
        return build_grid(self.stages, self.step_size(dt))

    # -- controls

    def active_control(self, current: int, stage) -> int:
        c = getattr(stage, "control", None)
        return current if c is None else c

    def control_after(self, labels: Sequence[str], measure_number: int, current: int) -> tuple:
        """(feedback action, new control index) after the measure_number-th measurement."""
        stage = self.stages[self.measure_indices[measure_number]]
        act = lookup_action(stage.feedback, labels)
        return act, (current if act.control is None else act.control)

    def controls_along(self, y: Sequence[str]) -> list:
        """Control index in force at every stage for the discrete history y."""
        cur, n, out = 0, 0, []
        for s in self.stages:
            out.append(self.active_control(cur, s))
            if isinstance(s, Measure):
                _, cur = self.control_after(list(y[: n + 1]), n, cur)
                n += 1
        out.append(cur)  # control at tau
        return out

    def actions_along(self, y: Sequence[str]) -> list:
        acts, cur = [], 0
        for n in range(len(y)):
            a, cur = self.control_after(list(y[: n + 1]), n, cur)
            acts.append(a)
        return acts

    def final_control(self, y: Sequence[str]) -> int:
        return self.controls_along(y)[-1]

    # -- states

    def reference_state(self, final_control: int = 0) -> DensityMatrix:
        key = ("ref", final_control)
        if key not in self._cache:
            r = self.reference
            if r.kind == "explicit":
                st = r.state
            elif r.kind == "thermal-final":
                st = thermal_state(self.controls[final_control].hamiltonian(self.tau), self.beta)
            else:
                from .propagation import average_final_state

                st = average_final_state(self)
            self._cache[key] = st
        return self._cache[key]

    def reference_depends_on_history(self) -> bool:
        return self.reference.kind == "thermal-final" and self.reachable_final_controls() != {0}

    def reachable_final_controls(self) -> set:
        cs = {0}
        for i in self.measure_indices:
            cs |= {a.control for a in self.stages[i].feedback.values() if a.control is not None}
        if self.monitor is not None:
            cs |= {a.control for a in self.monitor.feedback.values() if a.control is not None}
        return cs

    # -- validation

    def _validate(self):
        d = self.dim
        if not self.controls:
            raise ProtocolError("protocol needs at least one control")
        if self.beta < 0:
            raise ProtocolError("beta must be non-negative")
        for ci, c in enumerate(self.controls):
            where = f"control {c.name or ci}"
            for m in c.schedule.matrices():
                if m.shape != (d, d):
                    raise ProtocolError(f"{where}: hamiltonian shape {m.shape} != {(d, d)}")
                if hermiticity_residual(m) > TOL_HERM:
                    raise ProtocolError(f"{where}: hamiltonian is not Hermitian")
                if not self.allow_complex and np.abs(m.imag).max() > 0:
                    raise ProtocolError(
                        f"{where}: complex hamiltonian; time reversal is conjugation in the computational "
                        "basis, set allow_complex to accept this"
                    )
            for ch in c.channels:
                if ch.operator.shape != (d, d):
                    raise ProtocolError(f"{where}: jump {ch.label} has shape {ch.operator.shape}")
            if c.channels:
                try:
                    r = detailed_balance_residual(c.channels, self.beta)
                except QdynError as e:
                    raise ProtocolError(f"{where}: {e}") from None
                if r > TOL_DB:
                    raise ProtocolError(f"{where}: local detailed balance violated (residual {r:.3e})")
        nc = len(self.controls)
        for si, s in enumerate(self.stages):
            where = f"stage {si} ({type(s).__name__.lower()})"
            if isinstance(s, Evolve):
                if not (s.duration >= 0 and math.isfinite(s.duration)):
                    raise ProtocolError(f"{where}: duration must be finite and >= 0")
            if isinstance(s, Measure):
                if s.kraus.dim != d:
                    raise ProtocolError(f"{where}: Kraus dimension {s.kraus.dim} != {d}")
                for k, a in s.feedback.items():
                    self._check_action(a, f"{where} feedback {k!r}", nc)
                    last = k.split("/")[-1]
                    if k != "*" and last not in s.kraus.outcomes:
                        raise ProtocolError(f"{where}: feedback key {k!r} is not an outcome")
            if getattr(s, "control", None) is not None and not 0 <= s.control < nc:
                raise ProtocolError(f"{where}: control index {s.control} out of range")
            if isinstance(s, Kick) and np.asarray(s.unitary).shape != (d, d):
                raise ProtocolError(f"{where}: unitary shape mismatch")
        if self.monitor is not None:
            for m in self.monitor.operators:
                if m.shape != (d, d):
                    raise ProtocolError(f"monitor operator shape {m.shape} != {(d, d)}")
            for k, a in self.monitor.feedback.items():
                self._check_action(a, f"monitor feedback {k!r}", nc)
        if self.dt is not None and not self.dt > 0:
            raise ProtocolError("dt must be positive")
        if self.reference.state is not None and self.reference.state.dim != d:
            raise ProtocolError("reference state has the wrong dimension")

    def _check_action(self, a: FeedbackAction, where: str, nc: int):
        if a.unitary is not None and a.unitary.shape != (self.dim, self.dim):
            raise ProtocolError(f"{where}: unitary shape mismatch")
        if a.control is not None and not 0 <= a.control < nc:
            raise ProtocolError(f"{where}: control index {a.control} out of range")

    def with_dt(self, dt: float) -> "Protocol":
        return _replace(self, dt=dt)


def _replace(p: Protocol, **kw) -> Protocol:
    import dataclasses

    return dataclasses.replace(p, _cache={}, **kw)


# ---------------------------------------------------------------- history resolution

@dataclass(frozen=True)
class OutcomeHistory:
    """Ordered (time, label) records. Discrete mode: one per measurement; continuous: detections."""

    events: tuple = ()

    def __post_init__(self):
        ev = tuple((float(t), str(y)) for t, y in self.events)
        if any(b[0] < a[0] for a, b in zip(ev, ev[1:])):
            raise ProtocolError("history times must not decrease")
        object.__setattr__(self, "events", ev)

    @property
    def labels(self) -> tuple:
        return tuple(y for _, y in self.events)

    def before(self, t: float) -> "OutcomeHistory":
        return OutcomeHistory(tuple(e for e in self.events if e[0] < t))


def resolve_controls(protocol: Protocol, history: OutcomeHistory, t: float) -> tuple:
    """(Hamiltonian, jump channels) in force at time t given the outcomes recorded before t."""
    if not 0 <= t <= protocol.tau + 1e-12:
        raise ProtocolError(f"time {t} outside [0, {protocol.tau}]")
    past = history.before(t) if t > 0 else OutcomeHistory()
    cur = 0
    if protocol.mode == "discrete":
        ys = past.labels
        if len(ys) > len(protocol.measure_indices):
            raise ProtocolError("history longer than the number of measurements")
        for n, (tn, y) in enumerate(past.events):
            kr = protocol.stages[protocol.measure_indices[n]].kraus
            if y not in kr.outcomes:
                raise ProtocolError(f"unreachable history: outcome {y!r} at measurement {n}")
            _, cur = protocol.control_after(list(ys[: n + 1]), n, cur)
    else:
        for _, y in past.events:
            if y not in protocol.monitor.labels:
                raise ProtocolError(f"unknown detection label {y!r}")
            a = protocol.monitor.action(y)
            cur = cur if a.control is None else a.control
    # a stage-level override applies to the evolve stage that contains t
    for s, t0 in zip(protocol.stages, protocol.stage_times):
        if isinstance(s, Evolve) and t0 <= t < t0 + s.duration and s.control is not None:
            cur = s.control
            break
    c = protocol.controls[cur]
    return c.hamiltonian(t), c.channels


# ---------------------------------------------------------------- reversal

@dataclass(frozen=True)
class Postselect:
    """Reversed measurement: keep only the branch Theta M(y)^dag Theta^-1."""

    operator: np.ndarray
    label: str


@dataclass(frozen=True)
class ReversedProtocol:
    forward: Protocol
    history: tuple
    stages: tuple
    controls: tuple
    initial: DensityMatrix
    measurement_times: tuple
    detections: tuple = ()  # continuous mode: (forward step index, label)

    @property
    def tau(self) -> float:
        return self.forward.tau

    @property
    def dim(self) -> int:
        return self.forward.dim

    @property
    def beta(self) -> float:
        return self.forward.beta

    @property
    def stage_times(self) -> list:
        return stage_start_times(self.stages)

    def step_size(self, dt: float | None = None) -> float:
        return self.forward.step_size(dt)

    def grid(self, dt: float | None = None) -> list:
        return build_grid(self.stages, self.step_size(dt))

    def as_protocol(self) -> Protocol:
        """A forward-runnable protocol whose measurements are accept/reject tests of the reversed outcomes."""
        if self.forward.mode != "discrete":
            raise ProtocolError("postselection simulation needs a discrete protocol")
        stages = []
        for s in self.stages:
            if isinstance(s, Postselect):
                b = s.operator
                rest = np.eye(b.shape[0]) - dag(b) @ b
                w, v = np.linalg.eigh(0.5 * (rest + dag(rest)))
                rej = (v * np.sqrt(np.clip(w, 0, None))) @ dag(v)
                stages.append(Measure(KrausSet(("accept", "reject"), (b, rej))))
            else:
                stages.append(s)
        return Protocol(
            beta=self.forward.beta,
            controls=self.controls,
            stages=tuple(stages),
            initial=self.initial,
            reference=Reference("explicit", self.initial),
            dt=self.forward.dt,
            allow_complex=True,
            name=f"{self.forward.name}-reversed",
        )


def reverse_schedule(protocol: Protocol, y: Sequence[str], theta: TimeReversal = THETA) -> list:
    """Reversed controls, one per forward stage in reversed order, frozen for history y."""
    along = protocol.controls_along(y)
    out = []
    for s, ci in zip(protocol.stages[::-1], along[-2::-1]):
        c = protocol.controls[ci]
        out.append(
            Control(
                ReversedSchedule(c.schedule, protocol.tau, theta),
                tuple(
                    JumpChannel(ch.label, theta.operator(ch.operator), ch.heat, ch.partner) for ch in c.channels
                ),
                name=f"reversed-{c.name or ci}",
            )
        )
    return out


def reverse_protocol(protocol: Protocol, y, theta: TimeReversal = THETA, detections=()) -> ReversedProtocol:
    """Fixed-schedule backward experiment for the forward outcome history y."""
    y = tuple(str(v) for v in (y.labels if isinstance(y, OutcomeHistory) else y))
    if protocol.mode == "discrete":
        sets = protocol.outcome_sets()
        if len(y) != len(sets) or any(v not in s for v, s in zip(y, sets)):
            raise ProtocolError(f"history {y} is not reachable")
    fc = protocol.final_control(y) if protocol.mode == "discrete" else 0
    rho_r = protocol.reference_state(fc)
    init = DensityMatrix(theta.operator(rho_r.mat))
    rcontrols = reverse_schedule(protocol, y if protocol.mode == "discrete" else (), theta)
    acts = protocol.actions_along(y) if protocol.mode == "discrete" else []
    stages, n = [], len(acts)
    for k, s in enumerate(protocol.stages[::-1]):
        if isinstance(s, Evolve):
            stages.append(Evolve(s.duration, control=k))
        elif isinstance(s, Thermalize):
            stages.append(Thermalize(control=k))
        elif isinstance(s, Kick):
            stages.append(Kick(theta.operator(dag(s.unitary))))
        elif isinstance(s, Measure):
            n -= 1
            u = acts[n].unitary
            if u is not None:
                stages.append(Kick(theta.operator(dag(u))))
            stages.append(Postselect(reversed_kraus(s.kraus[y[n]], theta), y[n]))
    tau = protocol.tau
    times = tuple(tau - t for t in protocol.measurement_times[::-1])
    return ReversedProtocol(protocol, y, tuple(stages), tuple(rcontrols), init, times, tuple(detections))

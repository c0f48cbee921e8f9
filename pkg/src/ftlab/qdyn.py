"""Small dense quantum objects: states, Kraus sets, jump channels, time reversal.

Everything here works on plain complex numpy arrays of shape (d, d). The
wrapper types freeze their arrays so they can be shared between threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

TOL_HERM = 1e-10
TOL_TRACE = 1e-10
TOL_PSD = 1e-9
TOL_COMPLETE = 1e-10
TOL_DB = 1e-10
P_FLOOR = 1e-14
# beta*gap above which Gibbs weights underflow; the state is then a ground projector
BETA_GAP_GUARD = 700.0


class QdynError(ValueError):
    pass


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Copy `a` into a read-only square complex array, checking finiteness."""
    m = np.array(a, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise QdynError(f"{name}: expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise QdynError(f"{name}: non-finite entries")
    m.setflags(write=False)
    return m


def dag(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def hermiticity_residual(a: np.ndarray) -> float:
    return float(np.abs(a - dag(a)).max()) if a.size else 0.0


def phase_fix(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Rotate the global phase so the first non-negligible component is real positive."""
    idx = np.flatnonzero(np.abs(v) > tol)
    if idx.size == 0:
        return v
    c = v[idx[0]]
    return v * (abs(c) / c)


@dataclass(frozen=True)
class Spectrum:
    """Eigen-decomposition in the canonical order: descending eigenvalue, phase fixed vectors.

    `vectors[:, k]` is the eigenvector with label k.
    """

    values: np.ndarray
    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.values)

    def projector(self, k: int) -> np.ndarray:
        v = self.vectors[:, k]
        return np.outer(v, v.conj())


def eigenbasis(h: np.ndarray, descending: bool = True, decimals: int = 10) -> Spectrum:
    """Deterministic eigen-decomposition of a Hermitian matrix.

    Degenerate eigenvalues (equal after rounding to `decimals`) are ordered by the
    phase-fixed eigenvector components, so the labelling does not depend on LAPACK.
    """
    w, v = np.linalg.eigh(np.asarray(h))
    vecs = [phase_fix(v[:, k]) for k in range(len(w))]
    sign = -1.0 if descending else 1.0

    def key(k):
        comps = []
        for c in vecs[k]:
            comps += [-round(abs(c), decimals), round(float(np.angle(c)), decimals)]
        return (sign * round(float(w[k]), decimals), tuple(comps))

    order = sorted(range(len(w)), key=key)
    values = np.array([w[k] for k in order])
    vectors = np.column_stack([vecs[k] for k in order])
    values.setflags(write=False)
    vectors.setflags(write=False)
    return Spectrum(values, vectors)


@dataclass(frozen=True)
class DensityCheck:
    hermiticity: float
    trace_error: float
    min_eigenvalue: float
    tol_herm: float = TOL_HERM
    tol_trace: float = TOL_TRACE
    tol_psd: float = TOL_PSD

    @property
    def hermitian(self) -> bool:
        return self.hermiticity <= self.tol_herm

    @property
    def unit_trace(self) -> bool:
        return self.trace_error <= self.tol_trace

    @property
    def psd(self) -> bool:
        return self.min_eigenvalue >= -self.tol_psd

    @property
    def ok(self) -> bool:
        return self.hermitian and self.unit_trace and self.psd


def validate_density(rho, tol_herm=TOL_HERM, tol_trace=TOL_TRACE, tol_psd=TOL_PSD) -> DensityCheck:
    m = rho.mat if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    herm = hermiticity_residual(m)
    tr = abs(np.trace(m) - 1.0)
    lam = float(np.linalg.eigvalsh(0.5 * (m + dag(m))).min())
    return DensityCheck(herm, float(tr), lam, tol_herm, tol_trace, tol_psd)


@dataclass(frozen=True)
class DensityMatrix:
    mat: np.ndarray
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        m = as_matrix(self.mat, "density matrix")
        object.__setattr__(self, "mat", m)
        if self.validate:
            chk = validate_density(m)
            if not chk.ok:
                raise QdynError(f"invalid density matrix: {chk}")

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @cached_property
    def spectrum(self) -> Spectrum:
        """Eigenlabels a with probabilities p_a, computed once."""
        return eigenbasis(0.5 * (self.mat + dag(self.mat)))

    @property
    def probabilities(self) -> np.ndarray:
        return np.clip(self.spectrum.values.real, 0.0, None)

    @classmethod
    def pure(cls, psi) -> "DensityMatrix":
        v = np.asarray(psi, dtype=complex)
        v = v / np.linalg.norm(v)
        return cls(np.outer(v, v.conj()))

    @classmethod
    def maximally_mixed(cls, d: int) -> "DensityMatrix":
        return cls(np.eye(d) / d)


@dataclass(frozen=True)
class KrausSet:
    """Labelled measurement operators M(y) with sum M^dag M = I."""

    outcomes: tuple
    operators: tuple
    tol: float = field(default=TOL_COMPLETE, repr=False, compare=False)
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        outs = tuple(str(y) for y in self.outcomes)
        ops = tuple(as_matrix(m, f"Kraus operator {y}") for y, m in zip(outs, self.operators))
        if len(outs) != len(self.operators) or not outs:
            raise QdynError("KrausSet needs one operator per outcome label")
        if len(set(outs)) != len(outs):
            raise QdynError(f"duplicate outcome labels {outs}")
        if len({m.shape for m in ops}) != 1:
            raise QdynError("Kraus operators have inconsistent dimensions")
        object.__setattr__(self, "outcomes", outs)
        object.__setattr__(self, "operators", ops)
        if self.check and self.completeness_residual() > self.tol:
            raise QdynError(
                f"Kraus set {outs} is not complete: |sum M^dag M - I|_F = {self.completeness_residual():.3e}"
            )

    @classmethod
    def from_dict(cls, ops: dict, **kw) -> "KrausSet":
        return cls(tuple(ops), tuple(ops.values()), **kw)

    @property
    def dim(self) -> int:
        return self.operators[0].shape[0]

    def __len__(self):
        return len(self.outcomes)

    def index(self, y) -> int:
        try:
            return self.outcomes.index(str(y))
        except ValueError:
            raise QdynError(f"unknown outcome {y!r}; known {self.outcomes}") from None

    def __getitem__(self, y) -> np.ndarray:
        return self.operators[self.index(y)]

    def completeness_residual(self) -> float:
        s = sum(dag(m) @ m for m in self.operators)
        return float(np.linalg.norm(s - np.eye(self.dim)))

    def probabilities(self, rho) -> np.ndarray:
        m = rho.mat if isinstance(rho, DensityMatrix) else np.asarray(rho)
        return np.array([np.trace(dag(k) @ k @ m).real for k in self.operators])


@dataclass(frozen=True)
class KrausResult:
    state: DensityMatrix | None
    probability: float

    @property
    def zero_branch(self) -> bool:
        return self.state is None


def apply_kraus(rho, kraus: KrausSet, y, p_floor: float = P_FLOOR) -> KrausResult:
    """Born rule update. A branch with p <= p_floor returns state None instead of renormalising."""
    m = rho.mat if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    k = kraus[y]
    post = k @ m @ dag(k)
    p = float(np.trace(post).real)
    if p <= p_floor:
        return KrausResult(None, max(p, 0.0))
    return KrausResult(DensityMatrix(post / p, validate=False), p)


@dataclass(frozen=True)
class JumpChannel:
    """Dissipative jump L_j that releases heat q_j to the bath; `partner` names j~."""

    label: str
    operator: np.ndarray
    heat: float
    partner: str

    def __post_init__(self):
        object.__setattr__(self, "operator", as_matrix(self.operator, f"jump operator {self.label}"))
        object.__setattr__(self, "label", str(self.label))
        object.__setattr__(self, "partner", str(self.partner))


def detailed_balance_residual(channels: Sequence[JumpChannel], beta: float) -> float:
    """max_j |L_{j~} - L_j^dag exp(-beta q_j / 2)|_F, plus a heat antisymmetry check."""
    by = {c.label: c for c in channels}
    worst = 0.0
    for c in channels:
        if c.partner not in by:
            raise QdynError(f"jump channel {c.label}: partner {c.partner!r} missing")
        p = by[c.partner]
        if abs(c.heat + p.heat) > TOL_DB * max(1.0, abs(c.heat)):
            raise QdynError(f"jump channel {c.label}: heat {c.heat} is not minus partner heat {p.heat}")
        worst = max(worst, float(np.linalg.norm(p.operator - dag(c.operator) * np.exp(-beta * c.heat / 2))))
    return worst


def check_detailed_balance(channels: Sequence[JumpChannel], beta: float, tol: float = TOL_DB) -> None:
    r = detailed_balance_residual(channels, beta)
    if r > tol:
        raise QdynError(f"local detailed balance violated: residual {r:.3e}")


@dataclass(frozen=True)
class TimeReversal:
    """Antiunitary time reversal, realised as complex conjugation in the computational basis."""

    basis: str = "computational"

    def operator(self, a):
        return np.conj(np.asarray(a))

    def state(self, psi):
        return np.conj(np.asarray(psi))


THETA = TimeReversal()


def time_reverse(op, theta: TimeReversal = THETA) -> np.ndarray:
    return theta.operator(op)


def reversed_kraus(m, theta: TimeReversal = THETA) -> np.ndarray:
    """Theta M^dag Theta^-1, the backward counterpart of a forward operator."""
    return theta.operator(dag(np.asarray(m)))


def effective_hamiltonian(h, jumps: Iterable[JumpChannel] = (), monitored: Iterable[np.ndarray] = ()) -> np.ndarray:
    h = np.asarray(h, dtype=complex)
    out = h.copy()
    for c in jumps:
        if c.operator.shape != h.shape:
            raise QdynError(f"jump {c.label}: dimension {c.operator.shape} != {h.shape}")
        out -= 0.5j * dag(c.operator) @ c.operator
    for m in monitored:
        m = np.asarray(m)
        if m.shape != h.shape:
            raise QdynError(f"monitored operator dimension {m.shape} != {h.shape}")
        out -= 0.5j * dag(m) @ m
    return out


def expm(a: np.ndarray) -> np.ndarray:
    return scipy.linalg.expm(np.asarray(a, dtype=complex))


def unitary_propagator(h: np.ndarray, dt: float) -> np.ndarray:
    """exp(-i H dt) for Hermitian H via the eigendecomposition."""
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * w * dt)) @ dag(v)


def evolve_nonhermitian(state, h_eff, dt: float, substeps: int = 1, tol: float = 1e-12):
    """Apply exp(-i H_eff dt) to a vector or (d, d) density matrix; the result is not renormalised.

    `h_eff` may be a matrix or a callable t -> matrix sampled at sub-step midpoints.
    """
    if dt < 0:
        raise QdynError("dt must be non-negative")
    x = np.asarray(state, dtype=complex)
    is_vec = x.ndim == 1
    norm0 = np.linalg.norm(x) ** 2 if is_vec else np.trace(x).real
    h = dt / substeps
    for k in range(substeps):
        hk = h_eff((k + 0.5) * h) if callable(h_eff) else h_eff
        u = expm(-1j * np.asarray(hk) * h)
        x = u @ x if is_vec else u @ x @ dag(u)
    norm1 = np.linalg.norm(x) ** 2 if is_vec else np.trace(x).real
    if norm1 > norm0 * (1 + tol) + tol:
        raise QdynError(f"norm grew from {norm0:.3e} to {norm1:.3e}: H_eff has a positive anti-Hermitian part")
    return x


def entropy_of(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def von_neumann_entropy(rho) -> float:
    m = rho.mat if isinstance(rho, DensityMatrix) else np.asarray(rho)
    return entropy_of(np.linalg.eigvalsh(0.5 * (m + dag(m))))


def entropy_stack(rhos: np.ndarray) -> np.ndarray:
    """Von Neumann entropies of a (n, d, d) stack of unit-trace states."""
    r = np.asarray(rhos)
    if r.shape[1] == 2:
        a, d_, b = r[:, 0, 0].real, r[:, 1, 1].real, r[:, 0, 1]
        gap = np.sqrt((a - d_) ** 2 + 4 * (b.real**2 + b.imag**2))
        lam = np.stack([(a + d_ + gap) / 2, (a + d_ - gap) / 2], axis=1)
    else:
        lam = np.linalg.eigvalsh(0.5 * (r + np.conj(np.swapaxes(r, 1, 2))))
    lam = np.clip(lam, 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(lam > 0, lam * np.log(np.where(lam > 0, lam, 1.0)), 0.0)
    return -terms.sum(axis=1)


def binary_entropy(x: float) -> float:
    return entropy_of([x, 1.0 - x])


def gibbs_weights(energies: np.ndarray, beta: float) -> np.ndarray:
    e = np.asarray(energies, dtype=float)
    x = -beta * (e - e.min())
    x = np.where(x < -BETA_GAP_GUARD, -np.inf, x)
    w = np.exp(x)
    return w / w.sum()


def thermal_state(h, beta: float) -> DensityMatrix:
    """Gibbs state exp(-beta H)/Z. Past the overflow guard the excited weights are exactly zero."""
    h = np.asarray(h, dtype=complex)
    if hermiticity_residual(h) > TOL_HERM:
        raise QdynError("thermal_state needs a Hermitian H")
    if beta < 0:
        raise QdynError("beta must be non-negative")
    eig = eigenbasis(h, descending=False)
    p = gibbs_weights(eig.values, beta)
    rho = (eig.vectors * p) @ dag(eig.vectors)
    return DensityMatrix(0.5 * (rho + dag(rho)))


def mean_energy(h, rho) -> float:
    m = rho.mat if isinstance(rho, DensityMatrix) else np.asarray(rho)
    return float(np.trace(np.asarray(h) @ m).real)


# Liouville space helpers, row-major vectorisation: vec(A X B) = (A kron B^T) vec(X)

def spre_post(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.kron(a, b.T)


def lindbladian(h: np.ndarray, channels: Sequence[JumpChannel] = ()) -> np.ndarray:
    d = h.shape[0]
    eye = np.eye(d)
    heff = effective_hamiltonian(h, channels)
    gen = -1j * spre_post(heff, eye) + 1j * spre_post(eye, dag(heff))
    for c in channels:
        gen = gen + spre_post(c.operator, dag(c.operator))
    return gen


def vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho).reshape(-1)


def unvec(v: np.ndarray, d: int) -> np.ndarray:
    return np.asarray(v).reshape(d, d)


# Qubit conventions: |0> ground, |1> excited

def qubit_ops() -> dict:
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sy = np.array([[0, -1j], [1j, 0]], dtype=complex)
    sz = np.array([[1, 0], [0, -1]], dtype=complex)
    sm = np.array([[0, 1], [0, 0]], dtype=complex)  # |0><1|
    return {"I": np.eye(2, dtype=complex), "X": sx, "Y": sy, "Z": sz, "sm": sm, "sp": sm.T.copy()}


def qubit_hamiltonian(omega: float) -> np.ndarray:
    """Level splitting omega with |1> the excited state: diag(-omega/2, omega/2)."""
    return np.diag([-omega / 2, omega / 2]).astype(complex)


def thermal_qubit_channels(kappa: float, omega: float, beta: float) -> tuple:
    """Emission sqrt(kappa) sigma_- (heat +omega) and absorption with the detailed-balance factor."""
    o = qubit_ops()
    down = JumpChannel("down", np.sqrt(kappa) * o["sm"], omega, "up")
    up = JumpChannel("up", np.sqrt(kappa) * np.exp(-beta * omega / 2) * o["sp"], -omega, "down")
    return down, up

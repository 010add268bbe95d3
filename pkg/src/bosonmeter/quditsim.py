"""Dense statevector simulation of small qudit registers."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .clifford import CliffordCircuit, Gate
from .observables import GGB, HERMITIAN_TOL, MAX_DIM, Observable, ggb_labels, ggb_matrix, reconstruct


class SimulationError(ValueError):
    pass


@dataclass
class QuditState:
    d: int
    n: int
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if self.d ** self.n != self.amplitudes.size:
            raise SimulationError(f"{self.amplitudes.size} amplitudes for d={self.d}, n={self.n}")
        if self.amplitudes.size > MAX_DIM:
            raise SimulationError(f"register dimension {self.amplitudes.size} exceeds {MAX_DIM}")
        norm = np.linalg.norm(self.amplitudes)
        if abs(norm - 1.0) > 1e-10:
            raise SimulationError(f"state norm {norm} is not 1")

    @property
    def dim(self) -> int:
        return self.amplitudes.size

    def density_matrix(self) -> np.ndarray:
        return np.outer(self.amplitudes, self.amplitudes.conj())

    def tensor(self) -> np.ndarray:
        return self.amplitudes.reshape((self.d,) * self.n)


def basis_state(d: int, n: int, index: int = 0) -> QuditState:
    amps = np.zeros(d ** n, dtype=complex)
    amps[index] = 1.0
    return QuditState(d, n, amps)


def random_state(d: int, n: int, rng: np.random.Generator) -> QuditState:
    v = rng.normal(size=d ** n) + 1j * rng.normal(size=d ** n)
    return QuditState(d, n, v / np.linalg.norm(v))


def _fix_phase(v: np.ndarray) -> np.ndarray:
    k = np.argmax(np.abs(v) > 1e-12)
    return v * (abs(v[k]) / v[k])


def ground_state(h: np.ndarray, d: int, n: int) -> QuditState:
    """Lowest eigenvector of a dense Hermitian matrix.

    In a degenerate ground space the first eigenvector returned by ``eigh`` is
    used, with its global phase fixed so the first nonzero amplitude is real
    and positive.
    """
    h = np.asarray(h)
    if np.linalg.norm(h - h.conj().T) > HERMITIAN_TOL:
        raise SimulationError("Hamiltonian is not Hermitian")
    if h.shape != (d ** n, d ** n):
        raise SimulationError("Hamiltonian dimension does not match the register")
    _, vecs = np.linalg.eigh(h)
    return QuditState(d, n, _fix_phase(vecs[:, 0]))


def ghz_state(n: int, d: int) -> QuditState:
    amps = np.zeros(d ** n, dtype=complex)
    step = sum(d ** i for i in range(n))
    amps[np.arange(d) * step] = 1 / np.sqrt(d)
    return QuditState(d, n, amps)


def exact_expectation(state: QuditState, obs: Observable | np.ndarray) -> float:
    m = reconstruct(obs) if isinstance(obs, Observable) else np.asarray(obs)
    if np.linalg.norm(m - m.conj().T) > HERMITIAN_TOL:
        raise SimulationError("observable is not Hermitian")
    val = np.vdot(state.amplitudes, m @ state.amplitudes)
    if abs(val.imag) > 1e-9:
        raise SimulationError(f"expectation has imaginary part {val.imag}")
    return float(val.real)


# --------------------------------------------------------------------------
# local operators and Clifford gates
# --------------------------------------------------------------------------


def apply_local(amps: np.ndarray, op: np.ndarray, mode: int, d: int, n: int) -> np.ndarray:
    """Apply a d x d operator to one mode of a state vector (or stacked columns)."""
    extra = amps.shape[1:] if amps.ndim > 1 else ()
    t = amps.reshape((d,) * n + extra)
    t = np.moveaxis(np.tensordot(op, t, axes=([1], [mode])), 0, mode)
    return t.reshape(amps.shape)


@lru_cache(maxsize=None)
def gate_matrices(d: int) -> dict[str, np.ndarray]:
    w = np.exp(2j * np.pi / d)
    s = np.arange(d)
    mats = {
        "F": np.exp(2j * np.pi * np.outer(s, s) / d) / np.sqrt(d),
        "P": np.diag(w ** (s * (s + 1) // 2)),
        "X": np.roll(np.eye(d), 1, axis=0).astype(complex),
        "Z": np.diag(w ** s),
    }
    return mats


def _apply_gate(amps: np.ndarray, gate: Gate, d: int, n: int) -> np.ndarray:
    if gate.name == "CNOT":
        k, l = gate.qudits
        extra = amps.shape[1:] if amps.ndim > 1 else ()
        t = amps.reshape((d,) * n + extra)
        out = np.empty_like(t)
        # |s, t> -> |s, t + s>
        for sval in range(d):
            src = [slice(None)] * t.ndim
            src[k] = sval
            moved = np.roll(t[tuple(src)], sval, axis=l if l < k else l - 1)
            out[tuple(src)] = moved
        return out.reshape(amps.shape)
    return apply_local(amps, gate_matrices(d)[gate.name], gate.qudits[0], d, n)


def apply_clifford(state: QuditState, circuit: CliffordCircuit) -> QuditState:
    if (circuit.d, circuit.n) != (state.d, state.n):
        raise SimulationError("circuit and state registers differ")
    amps = state.amplitudes
    for g in circuit.gates:
        amps = _apply_gate(amps, g, state.d, state.n)
    return QuditState(state.d, state.n, amps)


def circuit_unitary(circuit: CliffordCircuit) -> np.ndarray:
    d, n = circuit.d, circuit.n
    u = np.eye(d ** n, dtype=complex)
    for g in circuit.gates:
        u = _apply_gate(u, g, d, n)
    return u


# --------------------------------------------------------------------------
# GGB measurements
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def ggb_eigenbasis(d: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Unitary whose columns diagonalize a GGB element, and the matching eigenvalues.

    The zero eigenspace of the off-diagonal elements is completed with the
    computational basis vectors outside span{|j>, |k>}.
    """
    family, j, k = ggb_labels(d)[index]
    u = np.eye(d, dtype=complex)
    if family in ("I", "diag"):
        vals = np.real(np.diag(ggb_matrix(d, index))).copy()
    else:
        vals = np.zeros(d)
        phase = 1.0 if family == "s" else 1j
        u[:, j] = 0
        u[:, k] = 0
        u[j, j], u[k, j] = 1 / np.sqrt(2), phase / np.sqrt(2)
        u[j, k], u[k, k] = 1 / np.sqrt(2), -phase / np.sqrt(2)
        vals[j], vals[k] = 1.0, -1.0
    u.setflags(write=False)
    vals.setflags(write=False)
    return u, vals


def _check_dims(state: QuditState, labels: Sequence[int]) -> None:
    if len(labels) != state.n:
        raise SimulationError(f"measurement has {len(labels)} modes, state has {state.n}")


def ggb_probabilities(state: QuditState, labels: Sequence[int]) -> np.ndarray:
    """Outcome probabilities in the product eigenbasis of a GGB measurement string."""
    _check_dims(state, labels)
    amps = state.amplitudes
    for mode, lab in enumerate(labels):
        if lab:
            u, _ = ggb_eigenbasis(state.d, int(lab))
            amps = apply_local(amps, u.conj().T, mode, state.d, state.n)
    p = np.abs(amps) ** 2
    return p / p.sum()


def measure_ggb(state: QuditState, labels: Sequence[int], rng: np.random.Generator,
                shots: int = 1) -> np.ndarray:
    """Sample per-mode eigenvalue outcomes, shape (shots, n); unmeasured modes read 0."""
    d, n = state.d, state.n
    p = ggb_probabilities(state, labels)
    idx = rng.choice(p.size, size=shots, p=p)
    digits = np.stack(np.unravel_index(idx, (d,) * n), axis=1)
    out = np.zeros((shots, n))
    for mode, lab in enumerate(labels):
        if lab:
            _, vals = ggb_eigenbasis(d, int(lab))
            out[:, mode] = vals[digits[:, mode]]
    return out


def ggb_sampler(state: QuditState) -> Callable[[Sequence[int], int, np.random.Generator], np.ndarray]:
    """Outcome sampler for the estimation framework: ``(labels, shots, rng) -> outcomes``."""

    def sample(labels, shots, rng):
        return measure_ggb(state, labels, rng, shots)

    return sample


def clifford_sampler(state: QuditState) -> Callable[[np.ndarray, int, np.random.Generator], np.ndarray]:
    """Computational-basis sampler after a unitary: ``(U, shots, rng) -> basis indices``."""

    def sample(u, shots, rng):
        p = np.abs(u @ state.amplitudes) ** 2
        return rng.choice(p.size, size=shots, p=p / p.sum())

    return sample


def ggb_term_vectors(state: QuditState, obs: Observable) -> np.ndarray:
    """Columns ``Q_j |psi>`` for every term of a GGB observable, shape (d^n, M)."""
    if obs.kind != GGB or (obs.d, obs.n) != (state.d, state.n):
        raise SimulationError("observable does not match the register")
    cols = []
    for string, _ in obs.terms:
        v = state.amplitudes
        for mode, lab in enumerate(string):
            if lab:
                v = apply_local(v, ggb_matrix(state.d, lab), mode, state.d, state.n)
        cols.append(v)
    return np.stack(cols, axis=1) if cols else np.zeros((state.dim, 0), dtype=complex)


class DenseMoments:
    """Exact ``tr(rho Q_j)`` and ``tr(rho Q_j Q_k)`` for GGB term tables."""

    def __init__(self, state: QuditState):
        self.state = state

    def _vectors(self, table) -> np.ndarray:
        d, n = self.state.d, self.state.n
        cols = []
        for lab in table.labels:
            v = self.state.amplitudes
            for mode, l in enumerate(lab):
                if l:
                    v = apply_local(v, ggb_matrix(d, int(l)), mode, d, n)
            cols.append(v)
        return np.stack(cols, axis=1) if cols else np.zeros((self.state.dim, 0), complex)

    def moments(self, table) -> np.ndarray:
        return np.real(self.state.amplitudes.conj() @ self._vectors(table))

    def pair_moments(self, table, mask=None) -> np.ndarray:
        v = self._vectors(table)
        return np.real(v.conj().T @ v)

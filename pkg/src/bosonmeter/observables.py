"""Observable algebra for truncated qudits and continuous p-x strings.

GGB indices for a d-level mode are enumerated as

* ``0``: the plain identity,
* ``1 .. d(d-1)/2``: symmetric elements ``|j><k| + |k><j|`` (j < k, lexicographic),
* next ``d(d-1)/2``: antisymmetric elements ``-i|j><k| + i|k><j|``,
* last ``d - 1``: diagonal elements ``Lambda^l`` for ``l = 1 .. d-1``.

At d = 2 this reproduces (I, X, Y, Z).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

HERMITIAN_TOL = 1e-10
MAX_DIM = 4096

GGB = "ggb"
PX = "px"


class ObservableError(ValueError):
    """Raised for malformed observables, configs or dimension mismatches."""


def _check_dim(d: int) -> None:
    if int(d) != d or d < 2:
        raise ObservableError(f"dimension must be an integer >= 2, got {d}")


@lru_cache(maxsize=None)
def ggb_labels(d: int) -> tuple[tuple[str, int, int], ...]:
    """Return ``(family, j, k)`` for every GGB index; family is one of I/s/a/diag."""
    _check_dim(d)
    pairs = list(itertools.combinations(range(d), 2))
    labels = [("I", 0, 0)]
    labels += [("s", j, k) for j, k in pairs]
    labels += [("a", j, k) for j, k in pairs]
    labels += [("diag", l, 0) for l in range(1, d)]
    return tuple(labels)


def ggb_index(d: int, family: str, j: int, k: int = 0) -> int:
    """Inverse of :func:`ggb_labels` (``family='diag'`` takes ``j = l``)."""
    try:
        return ggb_labels(d).index((family, j, k))
    except ValueError:
        raise ObservableError(f"no GGB element {family}{(j, k)} for d={d}") from None


@lru_cache(maxsize=None)
def _ggb_matrix_cached(d: int, index: int) -> np.ndarray:
    family, j, k = ggb_labels(d)[index]
    m = np.zeros((d, d), dtype=complex)
    if family == "I":
        m = np.eye(d, dtype=complex)
    elif family == "s":
        m[j, k] = m[k, j] = 1.0
    elif family == "a":
        m[j, k] = -1j
        m[k, j] = 1j
    else:
        l = j
        m[np.arange(l), np.arange(l)] = 1.0
        m[l, l] = -l
        m *= math.sqrt(2.0 / (l * (l + 1)))
    m.setflags(write=False)
    return m


def ggb_matrix(d: int, index: int) -> np.ndarray:
    """Dense d x d matrix of GGB element ``index`` (read-only array)."""
    _check_dim(d)
    if not 0 <= index < d * d:
        raise ObservableError(f"GGB index {index} out of range for d={d}")
    return _ggb_matrix_cached(int(d), int(index))


@lru_cache(maxsize=None)
def ggb_basis(d: int) -> np.ndarray:
    """All d^2 GGB matrices stacked, shape (d^2, d, d)."""
    b = np.stack([ggb_matrix(d, i) for i in range(d * d)])
    b.setflags(write=False)
    return b


# --------------------------------------------------------------------------
# strings and observables
# --------------------------------------------------------------------------


def px_is_pure(string: Sequence[tuple[int, int]]) -> bool:
    return all(l * m == 0 for l, m in string)


def px_degree(string: Sequence[tuple[int, int]]) -> int:
    return sum(l + m for l, m in string)


def string_support(kind: str, string: Sequence) -> tuple[int, ...]:
    if kind == GGB:
        return tuple(i for i, s in enumerate(string) if s != 0)
    return tuple(i for i, (l, m) in enumerate(string) if l + m > 0)


def _normalize_string(kind: str, string: Iterable) -> tuple:
    if kind == GGB:
        return tuple(int(s) for s in string)
    out = []
    for pair in string:
        l, m = (int(v) for v in pair)
        if l < 0 or m < 0:
            raise ObservableError(f"negative exponent in p-x string: {pair}")
        out.append((l, m))
    return tuple(out)


@dataclass(frozen=True)
class Observable:
    """Real-weighted sum of GGB strings (``kind='ggb'``) or p-x strings (``kind='px'``).

    ``terms`` is a tuple of ``(string, coefficient)`` pairs with unique strings.
    GGB strings are tuples of GGB indices; p-x strings are tuples of
    ``(l_i, m_i)`` pairs meaning ``x_i^l p_i^m``.
    """

    kind: str
    n: int
    d: int | None
    terms: tuple[tuple[tuple, float], ...]

    @classmethod
    def from_terms(cls, kind: str, n: int, terms: Iterable[tuple[Iterable, float]],
                   d: int | None = None, tol: float = 0.0) -> "Observable":
        """Build an observable, merging duplicate strings and dropping |coeff| <= tol."""
        if kind not in (GGB, PX):
            raise ObservableError(f"unknown observable kind {kind!r}")
        if kind == GGB:
            if d is None:
                raise ObservableError("GGB observables need a dimension d")
            _check_dim(d)
        merged: dict[tuple, float] = {}
        for string, coeff in terms:
            s = _normalize_string(kind, string)
            if len(s) != n:
                raise ObservableError(f"string {s} has {len(s)} modes, expected {n}")
            if kind == GGB and any(not 0 <= v < d * d for v in s):
                raise ObservableError(f"GGB index out of range in {s}")
            c = complex(coeff)
            if abs(c.imag) > HERMITIAN_TOL:
                raise ObservableError(f"coefficient {coeff} is not real")
            merged[s] = merged.get(s, 0.0) + c.real
        kept = tuple((s, c) for s, c in merged.items() if abs(c) > tol)
        return cls(kind, int(n), None if kind == PX else int(d), kept)

    @property
    def strings(self) -> list[tuple]:
        return [s for s, _ in self.terms]

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([c for _, c in self.terms], dtype=float)

    def support(self, string: tuple) -> tuple[int, ...]:
        return string_support(self.kind, string)

    @property
    def locality(self) -> int:
        return max((len(self.support(s)) for s in self.strings), default=0)

    @property
    def degree(self) -> int:
        """Maximum p-x degree (GGB observables report their locality)."""
        if self.kind == GGB:
            return self.locality
        return max((px_degree(s) for s in self.strings), default=0)

    @property
    def identity_coeff(self) -> float:
        return sum(c for s, c in self.terms if not self.support(s))

    def is_pure(self) -> bool:
        return self.kind == GGB or all(px_is_pure(s) for s in self.strings)

    def scaled(self, factor: float) -> "Observable":
        return Observable(self.kind, self.n, self.d, tuple((s, factor * c) for s, c in self.terms))

    def __add__(self, other: "Observable") -> "Observable":
        if (self.kind, self.n, self.d) != (other.kind, other.n, other.d):
            raise ObservableError("cannot add observables over different registers")
        return Observable.from_terms(self.kind, self.n, self.terms + other.terms, d=self.d)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "n": self.n,
            "terms": [{"string": [list(p) if self.kind == PX else p for p in s], "coeff": c}
                      for s, c in self.terms],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Observable":
        try:
            return cls.from_terms(data["kind"], data["n"],
                                  [(t["string"], t["coeff"]) for t in data["terms"]],
                                  d=data.get("d"))
        except (KeyError, TypeError) as exc:
            raise ObservableError(f"malformed observable: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


# --------------------------------------------------------------------------
# dense decomposition
# --------------------------------------------------------------------------


def _register_shape(dim: int, n: int, d: int) -> None:
    if d ** n != dim:
        raise ObservableError(f"matrix dimension {dim} != d^n = {d}^{n}")
    if dim > MAX_DIM:
        raise ObservableError(f"dense dimension {dim} exceeds limit {MAX_DIM}")


def decompose_ggb(matrix: np.ndarray, n: int, d: int, tol: float = 1e-13) -> Observable:
    """Expand a Hermitian ``d^n x d^n`` matrix over GGB strings.

    Coefficients are taken against plain identity factors, so
    ``alpha = tr(M Q) / (2^k d^(n-k))`` with ``k = |supp Q|``.
    """
    _check_dim(d)
    m = np.asarray(matrix, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ObservableError("expected a square matrix")
    _register_shape(m.shape[0], n, d)
    if np.linalg.norm(m - m.conj().T) > HERMITIAN_TOL:
        raise ObservableError("matrix is not Hermitian")

    coeffs = _finish_contraction(m, n, d)
    norms = np.array([2.0 if j else float(d) for j in range(d * d)])
    scale = norms
    for _ in range(n - 1):
        scale = np.multiply.outer(scale, norms)
    alpha = coeffs / scale
    if np.max(np.abs(alpha.imag), initial=0.0) > 1e-8:
        raise ObservableError("decomposition produced complex coefficients")
    terms = [(idx, float(alpha[idx].real)) for idx in zip(*np.nonzero(np.abs(alpha) > tol))]
    return Observable.from_terms(GGB, n, terms, d=d)


def _finish_contraction(m: np.ndarray, n: int, d: int) -> np.ndarray:
    """Tensor of tr(M Q_j) over all GGB strings j, shape (d^2,)*n."""
    basis = ggb_basis(d)
    t = m.reshape((d,) * (2 * n))  # axes r_1..r_n, c_1..c_n
    for i in range(n):
        # the current mode's row axis is 0, its column axis is (n - i)
        t = np.tensordot(t, basis, axes=([0, n - i], [2, 1]))
    return t


def ggb_string_matrix(string: Sequence[int], d: int) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for s in string:
        out = np.kron(out, ggb_matrix(d, s))
    return out


def reconstruct(obs: Observable) -> np.ndarray:
    """Dense matrix ``sum_j alpha_j (x)_i Lambda_{j_i}`` of a GGB observable."""
    if obs.kind != GGB:
        raise ObservableError("reconstruct needs a GGB observable")
    dim = obs.d ** obs.n
    _register_shape(dim, obs.n, obs.d)
    out = np.zeros((dim, dim), dtype=complex)
    for string, coeff in obs.terms:
        out += coeff * ggb_string_matrix(string, obs.d)
    return out


def spectral_norm(obs: Observable) -> float:
    """Operator norm of a GGB observable via its dense reconstruction."""
    return float(np.max(np.abs(np.linalg.eigvalsh(reconstruct(obs)))))


# --------------------------------------------------------------------------
# truncated bosonic modes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModeOperators:
    a: np.ndarray
    adag: np.ndarray
    x: np.ndarray
    p: np.ndarray
    N: np.ndarray


@lru_cache(maxsize=None)
def truncated_mode_ops(d: int) -> ModeOperators:
    """Ladder and quadrature operators on the lowest d Fock levels.

    ``x = a + a^dagger`` and ``p = -i(a - a^dagger)`` so the vacuum has
    ``<x^2> = 1``.
    """
    _check_dim(d)
    a = np.diag(np.sqrt(np.arange(1, d)), k=1).astype(complex)
    adag = a.conj().T
    ops = ModeOperators(a=a, adag=adag, x=a + adag, p=-1j * (a - adag), N=adag @ a)
    for m in (ops.a, ops.adag, ops.x, ops.p, ops.N):
        m.setflags(write=False)
    return ops


def embed(ops: Mapping[int, np.ndarray], n: int, d: int) -> np.ndarray:
    """Tensor product placing ``ops[i]`` on mode i and identities elsewhere."""
    out = np.ones((1, 1), dtype=complex)
    eye = np.eye(d, dtype=complex)
    for i in range(n):
        out = np.kron(out, ops.get(i, eye))
    return out


@dataclass(frozen=True)
class VibrationalConfig:
    """Harmonic frequencies plus polynomial couplings ``k * q_i1 ... q_ij``.

    ``modes`` lists 0-based mode indices with repetition encoding powers.
    ``quadrature`` selects ``q = x/sqrt(2)`` (default) or ``q = x``.
    ``zero_point`` adds the constant ``sum_i omega_i / 2``.
    """

    frequencies: tuple[float, ...]
    couplings: tuple[tuple[tuple[int, ...], float], ...] = ()
    quadrature: str = "x_over_sqrt2"
    zero_point: bool = False

    @property
    def n(self) -> int:
        return len(self.frequencies)

    @classmethod
    def from_dict(cls, data: Mapping) -> "VibrationalConfig":
        try:
            freqs = tuple(float(w) for w in data["frequencies"])
            couplings = tuple(
                (tuple(int(m) for m in c["modes"]), float(c["coefficient"]))
                for c in data.get("couplings", ())
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ObservableError(f"malformed Hamiltonian config: {exc}") from exc
        quad = data.get("quadrature", "x_over_sqrt2")
        if quad not in ("x_over_sqrt2", "x"):
            raise ObservableError(f"unknown quadrature convention {quad!r}")
        if not freqs:
            raise ObservableError("Hamiltonian config lists no frequencies")
        for modes, _ in couplings:
            if not modes or any(not 0 <= m < len(freqs) for m in modes):
                raise ObservableError(f"coupling modes {modes} out of range")
        return cls(freqs, couplings, quad, bool(data.get("zero_point", False)))

    @classmethod
    def load(cls, path) -> "VibrationalConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ObservableError(f"{path}: {exc}") from exc
        return cls.from_dict(data)


def build_vibrational_hamiltonian(config: VibrationalConfig | Mapping, d: int) -> np.ndarray:
    """Dense truncated Hamiltonian ``sum_i w_i N_i + sum k q...q`` on (C^d)^n."""
    if not isinstance(config, VibrationalConfig):
        config = VibrationalConfig.from_dict(config)
    ops = truncated_mode_ops(d)
    n = config.n
    _register_shape(d ** n, n, d)
    q = ops.x / math.sqrt(2.0) if config.quadrature == "x_over_sqrt2" else ops.x
    h = np.zeros((d ** n, d ** n), dtype=complex)
    for i, w in enumerate(config.frequencies):
        h += w * embed({i: ops.N}, n, d)
    for modes, k in config.couplings:
        local = {}
        for m in modes:
            local[m] = local.get(m, np.eye(d, dtype=complex)) @ q
        h += k * embed(local, n, d)
    if config.zero_point:
        h += 0.5 * sum(config.frequencies) * np.eye(d ** n)
    return h

"""Stabilizer tableaus and uniform Clifford sampling for odd prime qudit dimension.

A Pauli word ``(a, b, c)`` denotes ``w^c X^a1 Z^b1 (x) ... (x) X^an Z^bn`` with
``w = exp(2 pi i / d)``. Tableau rows are stored as integer arrays of length
``2n + 1`` laid out ``a_1..a_n, b_1..b_n, c``.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

GATES = ("F", "P", "CNOT", "X", "Z")


class CliffordError(ValueError):
    """Raised for unsupported dimensions or malformed circuits."""


def is_odd_prime(d: int) -> bool:
    if d < 3 or d % 2 == 0:
        return False
    return all(d % q for q in range(3, int(d ** 0.5) + 1, 2))


def require_odd_prime(d: int) -> None:
    if not is_odd_prime(d):
        raise CliffordError(f"qudit Clifford routines need an odd prime dimension, got d={d}")


def inv_mod(a: int, d: int) -> int:
    return pow(int(a) % d, -1, d)


def solve_mod(a: int, b: int, d: int) -> int:
    """The x in [0, d) with ``a x = b (mod d)`` (a invertible)."""
    return (inv_mod(a, d) * b) % d


# --------------------------------------------------------------------------
# Pauli words
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PauliWord:
    d: int
    a: tuple[int, ...]
    b: tuple[int, ...]
    c: int = 0

    def __post_init__(self):
        if len(self.a) != len(self.b):
            raise CliffordError("X and Z exponent lists differ in length")
        object.__setattr__(self, "a", tuple(int(v) % self.d for v in self.a))
        object.__setattr__(self, "b", tuple(int(v) % self.d for v in self.b))
        object.__setattr__(self, "c", int(self.c) % self.d)

    @property
    def n(self) -> int:
        return len(self.a)

    @classmethod
    def from_row(cls, d: int, row: Sequence[int]) -> "PauliWord":
        n = (len(row) - 1) // 2
        return cls(d, tuple(row[:n]), tuple(row[n:2 * n]), int(row[-1]))

    def row(self) -> np.ndarray:
        return np.array(self.a + self.b + (self.c,), dtype=np.int64)

    @classmethod
    def single(cls, d: int, n: int, k: int, kind: str, power: int = 1) -> "PauliWord":
        a = [0] * n
        b = [0] * n
        (a if kind == "X" else b)[k] = power
        return cls(d, tuple(a), tuple(b))

    def matrix(self) -> np.ndarray:
        return pauli_matrix(self.d, self.a, self.b, self.c)

    def __mul__(self, other: "PauliWord") -> "PauliWord":
        return PauliWord.from_row(self.d, row_mul(self.row(), other.row(), self.d))


def pauli_matrix(d: int, a: Sequence[int], b: Sequence[int], c: int = 0) -> np.ndarray:
    w = np.exp(2j * np.pi / d)
    shift = np.roll(np.eye(d), 1, axis=0)  # X|s> = |s+1>
    clock = np.diag(w ** np.arange(d))
    out = np.ones((1, 1), dtype=complex)
    for ai, bi in zip(a, b):
        out = np.kron(out, np.linalg.matrix_power(shift, ai) @ np.linalg.matrix_power(clock, bi))
    return (w ** c) * out


def row_mul(r1: np.ndarray, r2: np.ndarray, d: int) -> np.ndarray:
    """Product of two words: Z^b X^a' = w^(b.a') X^a' Z^b supplies the phase."""
    n = (len(r1) - 1) // 2
    out = (r1 + r2) % d
    out[-1] = (r1[-1] + r2[-1] + r1[n:2 * n] @ r2[:n]) % d
    return out


def row_pow(r: np.ndarray, m: int, d: int) -> np.ndarray:
    """``(w^c X^a Z^b)^m`` with phase ``m c + (a.b) m (m-1)/2``."""
    n = (len(r) - 1) // 2
    m %= d
    out = (m * r) % d
    # m(m-1)/2 is an integer; reducing it mod d is the same as multiplying by 2^-1
    out[-1] = (m * r[-1] + (r[:n] @ r[n:2 * n]) * (m * (m - 1) // 2)) % d
    return out


def symp(r1: np.ndarray, r2: np.ndarray, d: int) -> int:
    """Symplectic form: ``P1 P2 = w^symp(P1, P2) P2 P1``."""
    n = (len(r1) - 1) // 2
    return int((r1[n:2 * n] @ r2[:n] - r1[:n] @ r2[n:2 * n]) % d)


# --------------------------------------------------------------------------
# gates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Gate:
    name: str
    qudits: tuple[int, ...]

    def __str__(self) -> str:
        return " ".join([self.name, *map(str, self.qudits)])


def _conjugate_rows(rows: np.ndarray, gate: Gate, d: int) -> None:
    """In-place conjugation ``R -> G R G^dagger`` of every row."""
    n = (rows.shape[1] - 1) // 2
    name = gate.name
    if name == "CNOT":
        k, l = gate.qudits
        rows[:, l] = (rows[:, l] + rows[:, k]) % d
        rows[:, n + k] = (rows[:, n + k] - rows[:, n + l]) % d
        return
    (k,) = gate.qudits
    a = rows[:, k].copy()
    b = rows[:, n + k].copy()
    if name == "F":
        rows[:, -1] = (rows[:, -1] - a * b) % d
        rows[:, k] = (-b) % d
        rows[:, n + k] = a
    elif name == "P":
        # rho_d = d mod 2 = 1 for odd d, so a(a+1)/2 is an integer
        rows[:, -1] = (rows[:, -1] + a * (a + 1) // 2) % d
        rows[:, n + k] = (a + b) % d
    elif name == "X":
        rows[:, -1] = (rows[:, -1] - b) % d
    elif name == "Z":
        rows[:, -1] = (rows[:, -1] + a) % d
    else:
        raise CliffordError(f"unknown gate {name!r}")


@dataclass
class CliffordCircuit:
    d: int
    n: int
    gates: list[Gate] = field(default_factory=list)

    def __post_init__(self):
        require_odd_prime(self.d)
        for g in self.gates:
            self._check(g)

    def _check(self, g: Gate) -> None:
        if g.name not in GATES:
            raise CliffordError(f"unknown gate {g.name!r}")
        arity = 2 if g.name == "CNOT" else 1
        if len(g.qudits) != arity or any(not 0 <= q < self.n for q in g.qudits):
            raise CliffordError(f"bad qudit indices for {g}")
        if arity == 2 and g.qudits[0] == g.qudits[1]:
            raise CliffordError(f"CNOT control equals target in {g}")

    def append(self, name: str, *qudits: int, times: int = 1) -> "CliffordCircuit":
        g = Gate(name, tuple(int(q) for q in qudits))
        self._check(g)
        self.gates.extend([g] * times)
        return self

    def __len__(self) -> int:
        return len(self.gates)

    def inverse(self) -> "CliffordCircuit":
        order = {"F": 4, "P": self.d, "CNOT": self.d, "X": self.d, "Z": self.d}
        out = CliffordCircuit(self.d, self.n)
        for g in reversed(self.gates):
            out.gates.extend([g] * (order[g.name] - 1))
        return out

    def dumps(self) -> str:
        return "\n".join([f"{self.d} {self.n}", *map(str, self.gates)]) + "\n"

    @classmethod
    def loads(cls, text: str) -> "CliffordCircuit":
        lines = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not lines or len(lines[0]) != 2:
            raise CliffordError("circuit text needs a 'd n' header")
        d, n = map(int, lines[0])
        circ = cls(d, n)
        for parts in lines[1:]:
            circ.append(parts[0], *map(int, parts[1:]))
        return circ


def random_circuit(n: int, d: int, depth: int, rng: np.random.Generator) -> CliffordCircuit:
    """Random gate sequence over {F, P, CNOT, X, Z} (test workload, not uniform)."""
    circ = CliffordCircuit(d, n)
    names = GATES if n > 1 else ("F", "P", "X", "Z")
    for _ in range(depth):
        name = names[rng.integers(len(names))]
        if name == "CNOT":
            k, l = rng.choice(n, size=2, replace=False)
            circ.append(name, k, l)
        else:
            circ.append(name, rng.integers(n))
    return circ


# --------------------------------------------------------------------------
# tableau
# --------------------------------------------------------------------------


class StabilizerTableau:
    """Destabilizer/stabilizer tableau; rows ``0..n-1`` destabilize, ``n..2n-1`` stabilize."""

    def __init__(self, n: int, d: int):
        require_odd_prime(d)
        if n < 1:
            raise CliffordError(f"need at least one qudit, got n={n}")
        self.n = n
        self.d = d
        self.rows = np.zeros((2 * n, 2 * n + 1), dtype=np.int64)
        for i in range(n):
            self.rows[i, i] = 1
            self.rows[n + i, n + i] = 1

    def copy(self) -> "StabilizerTableau":
        t = StabilizerTableau.__new__(StabilizerTableau)
        t.n, t.d, t.rows = self.n, self.d, self.rows.copy()
        return t

    def destabilizer(self, i: int) -> PauliWord:
        return PauliWord.from_row(self.d, self.rows[i])

    def stabilizer(self, i: int) -> PauliWord:
        return PauliWord.from_row(self.d, self.rows[self.n + i])

    def check_invariants(self) -> None:
        n, d = self.n, self.d
        for i in range(n):
            for j in range(n):
                if symp(self.rows[n + i], self.rows[n + j], d):
                    raise AssertionError(f"stabilizers {i},{j} do not commute")
                s = symp(self.rows[i], self.rows[n + j], d)
                if (i == j) != (s != 0):
                    raise AssertionError(f"destabilizer pairing broken at ({i},{j})")

    # -- gates ----------------------------------------------------------------

    def apply_gate(self, gate: Gate | str, *qudits: int) -> "StabilizerTableau":
        if isinstance(gate, str):
            gate = Gate(gate, tuple(qudits))
        if any(not 0 <= q < self.n for q in gate.qudits):
            raise CliffordError(f"gate {gate} out of range for n={self.n}")
        _conjugate_rows(self.rows, gate, self.d)
        return self

    def apply_circuit(self, circuit: CliffordCircuit) -> "StabilizerTableau":
        if (circuit.d, circuit.n) != (self.d, self.n):
            raise CliffordError("circuit and tableau registers differ")
        for g in circuit.gates:
            _conjugate_rows(self.rows, g, self.d)
        return self

    # -- measurement ------------------------------------------------------------

    def _solve_product(self, word: np.ndarray) -> np.ndarray | None:
        """Product of stabilizer powers matching ``word``'s exponents, or None."""
        n, d = self.n, self.d
        acc = np.zeros(2 * n + 1, dtype=np.int64)
        for i in range(n):
            alpha = symp(self.rows[i], self.rows[n + i], d)
            beta = symp(self.rows[i], word, d)
            gamma = solve_mod(alpha, beta, d)
            if gamma:
                acc = row_mul(acc, row_pow(self.rows[n + i], gamma, d), d)
        if not np.array_equal(acc[:-1], word[:-1] % d):
            return None
        return acc

    def is_deterministic(self, k: int) -> bool:
        return not np.any(self.rows[self.n:, k] % self.d)

    def measure_qudit(self, k: int, rng: np.random.Generator | None = None,
                      outcome: int | None = None) -> int:
        """Measure qudit k in the computational basis, updating the tableau.

        In the random case the outcome is uniform over ``0..d-1``; passing
        ``outcome`` post-selects that branch instead of drawing one.
        """
        n, d = self.n, self.d
        if not 0 <= k < n:
            raise CliffordError(f"qudit {k} out of range")
        stab_a = self.rows[n:, k] % d
        hits = np.flatnonzero(stab_a)
        zk = PauliWord.single(d, n, k, "Z").row()
        if hits.size == 0:
            prod = self._solve_product(zk)
            if prod is None:  # pragma: no cover - tableau corruption
                raise AssertionError("Z_k not in stabilizer group despite commuting")
            gamma = int(prod[-1])
            result = (-gamma) % d
            if outcome is not None and outcome != result:
                raise CliffordError(f"outcome {outcome} has zero probability")
            return result

        p = n + int(hits[0])
        a_p = int(self.rows[p, k])
        a_inv = inv_mod(a_p, d)
        for i in range(2 * n):
            if i in (p, p - n) or self.rows[i, k] % d == 0:
                continue
            m = (-self.rows[i, k] * a_inv) % d
            self.rows[i] = row_mul(self.rows[i], row_pow(self.rows[p], m, d), d)
        if outcome is None:
            if rng is None:
                raise CliffordError("random measurement needs an rng or an outcome")
            outcome = int(rng.integers(d))
        self.rows[p - n] = self.rows[p]
        self.rows[p] = 0
        self.rows[p, n + k] = 1
        # the new stabilizer w^c Z_k has eigenvalue 1, so Z_k reads w^(-c)
        self.rows[p, -1] = (-outcome) % d
        return int(outcome)

    def measure_all(self, rng: np.random.Generator) -> tuple[int, ...]:
        return tuple(self.measure_qudit(k, rng) for k in range(self.n))

    def sample_outcomes(self, shots: int, rng: np.random.Generator) -> np.ndarray:
        """``shots`` full computational-basis measurements, shape (shots, n).

        Each shot measures qudit by qudit; post-measurement tableaus are
        memoised per outcome prefix, so at most d^n branches are built.
        """
        branches: dict[tuple[int, ...], tuple[bool, object]] = {}
        out = np.empty((shots, self.n), dtype=np.int64)
        for s in range(shots):
            t, prefix = self, ()
            for k in range(self.n):
                node = branches.get(prefix)
                if node is None:
                    if t.is_deterministic(k):
                        c = t.copy()
                        node = (True, (c.measure_qudit(k), c))
                    else:
                        node = (False, {})
                    branches[prefix] = node
                det, data = node
                if det:
                    r, t = data
                else:
                    r = int(rng.integers(self.d))
                    child = data.get(r)
                    if child is None:
                        child = t.copy()
                        child.measure_qudit(k, outcome=r)
                        data[r] = child
                    t = child
                out[s, k] = r
                prefix = prefix + (r,)
        return out

    def outcome_distribution(self) -> dict[tuple[int, ...], float]:
        """Exact joint distribution of measuring every qudit, by branching the tableau."""
        out: dict[tuple[int, ...], float] = {}

        def walk(t: StabilizerTableau, k: int, prefix: tuple[int, ...], prob: float) -> None:
            if k == self.n:
                out[prefix] = out.get(prefix, 0.0) + prob
                return
            if t.is_deterministic(k):
                r = t.measure_qudit(k)
                walk(t, k + 1, prefix + (r,), prob)
                return
            for r in range(self.d):
                branch = t.copy()
                branch.measure_qudit(k, outcome=r)
                walk(branch, k + 1, prefix + (r,), prob / self.d)

        walk(self.copy(), 0, (), 1.0)
        return out

    def pauli_expectation(self, word: PauliWord) -> complex:
        """``<psi| w |psi>``: 0 unless w commutes with every stabilizer, else a root of unity."""
        if (word.d, word.n) != (self.d, self.n):
            raise CliffordError("Pauli word and tableau registers differ")
        r = word.row()
        n, d = self.n, self.d
        if any(symp(self.rows[n + i], r, d) for i in range(n)):
            return 0j
        prod = self._solve_product(r)
        if prod is None:  # pragma: no cover - tableau corruption
            raise AssertionError("commuting Pauli not in stabilizer group")
        # prod = w^gamma X^a Z^b acts as +1, so X^a Z^b reads w^-gamma
        return complex(np.exp(2j * np.pi * ((word.c - prod[-1]) % d) / d))

    def images(self) -> np.ndarray:
        """Copy of all rows: ``C X_i C^dagger`` then ``C Z_i C^dagger`` for a tableau
        started at the identity."""
        return self.rows.copy()


def circuit_tableau(circuit: CliffordCircuit) -> StabilizerTableau:
    return StabilizerTableau(circuit.n, circuit.d).apply_circuit(circuit)


# --------------------------------------------------------------------------
# uniform Clifford sampling
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _preimage_table(d: int, ax: int, bx: int) -> tuple[tuple[tuple[int, int], ...], ...]:
    """For each value s, the (az, bz) pairs with ``bx az - ax bz = s``, ordered by az*d + bz."""
    table: list[list[tuple[int, int]]] = [[] for _ in range(d)]
    for az, bz in itertools.product(range(d), repeat=2):
        table[(bx * az - ax * bz) % d].append((az, bz))
    return tuple(tuple(v) for v in table)


def _sample_pair(m: int, d: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform (v_x, v_z) on m qudits with ``symp(v_x, v_z) = -1``.

    v_z is drawn from all of Z_d^2m and then its entries on the first qudit
    where v_x is nonzero are remapped: the k-th pair (in a fixed order) among
    the d pairs giving the drawn local product is replaced by the k-th pair
    giving the local product that makes the total -1. The map is a bijection
    between the d^2m draws and d copies of the d^(2m-1) valid completions.
    """
    while True:
        vx = rng.integers(d, size=2 * m)
        if vx.any():
            break
    vz = rng.integers(d, size=2 * m)
    j = int(np.flatnonzero(vx[:m] | vx[m:])[0])
    ax, bx = int(vx[j]), int(vx[m + j])
    total = int((vx[m:] @ vz[:m] - vx[:m] @ vz[m:]) % d)
    local = (bx * vz[j] - ax * vz[m + j]) % d
    table = _preimage_table(d, ax, bx)
    k = table[local].index((int(vz[j]), int(vz[m + j])))
    target = (-1 - (total - local)) % d
    vz[j], vz[m + j] = table[target][k]
    return vx, vz


@lru_cache(maxsize=None)
def _scaling_word(d: int, a: int, b: int) -> tuple[str, ...]:
    """Shortest F/P word taking (X^a, Z^b) to (X, Z) up to phases (requires ab = 1)."""
    start = (a % d, 0, 0, b % d)
    goal = (1, 0, 0, 1)

    def step(state, name):
        ax, bx, az, bz = state
        if name == "F":
            return ((-bx) % d, ax, (-bz) % d, az)
        return (ax, (ax + bx) % d, az, (az + bz) % d)

    prev = {start: None}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        if s == goal:
            break
        for name in ("F", "P"):
            t = step(s, name)
            if t not in prev:
                prev[t] = (s, name)
                queue.append(t)
    if goal not in prev:  # pragma: no cover - SL(2, d) is generated by F and P
        raise CliffordError(f"no F/P word for X^{a}, Z^{b} at d={d}")
    word = []
    s = goal
    while prev[s] is not None:
        s, name = prev[s]
        word.append(name)
    return tuple(reversed(word))


class _Eliminator:
    """Records gates while conjugating a block of rows."""

    def __init__(self, rows: np.ndarray, n: int, d: int):
        self.rows = rows
        self.n = n
        self.d = d
        self.gates: list[Gate] = []
        self.x_layers: list[list[tuple[int, int]]] = []

    def apply(self, name: str, *qudits: int, times: int = 1) -> None:
        g = Gate(name, tuple(qudits))
        for _ in range(times % (4 if name == "F" else self.d)):
            _conjugate_rows(self.rows, g, self.d)
            self.gates.append(g)

    def clear_z(self, r: int, qudits: Iterable[int]) -> None:
        n, d = self.n, self.d
        for q in qudits:
            a, b = self.rows[r, q], self.rows[r, n + q]
            if b == 0:
                continue
            if a:
                self.apply("P", q, times=solve_mod(a, -b, d))
            else:
                self.apply("F", q)

    def tree_clear_x(self, r: int, qudits: list[int], record: bool = False) -> list[int]:
        """Pairwise CNOT elimination of X parts; returns the surviving qudit list."""
        d = self.d
        live = [q for q in qudits if self.rows[r, q]]
        while len(live) > 1:
            layer = []
            survivors = []
            for i in range(0, len(live) - 1, 2):
                k, l = live[i], live[i + 1]
                self.apply("CNOT", k, l, times=solve_mod(self.rows[r, k], -self.rows[r, l], d))
                layer.append((k, l))
                survivors.append(k)
            if len(live) % 2:
                survivors.append(live[-1])
            live = survivors
            if record:
                self.x_layers.append(layer)
        return live

    def eliminate_pair(self, j: int, rx: int | None = None, rz: int | None = None) -> None:
        """Map row rx (image of X_j) and row rz (image of Z_j) onto X_j and Z_j.

        Rows default to j and n + j of a full tableau.
        """
        n, d = self.n, self.d
        rx = j if rx is None else rx
        rz = n + j if rz is None else rz
        qs = list(range(j, n))

        self.clear_z(rx, qs)
        live = self.tree_clear_x(rx, qs, record=True)
        if live[0] != j:
            self.apply("CNOT", live[0], j)
            self.apply("CNOT", j, live[0], times=d - 1)

        z_row = self.rows[rz]
        if z_row[:n].any() or np.delete(z_row[n:2 * n], j).any():
            self.apply("F", j)
            self.clear_z(rz, qs)
            others = [q for q in qs if q != j]
            live = self.tree_clear_x(rz, others)
            for q in live:
                self.apply("CNOT", j, q, times=solve_mod(self.rows[rz, j], -self.rows[rz, q], d))
            self.apply("F", j)

        for name in _scaling_word(d, int(self.rows[rx, j]), int(self.rows[rz, n + j])):
            self.apply(name, j)
        self.apply("Z", j, times=-int(self.rows[rx, -1]))
        self.apply("X", j, times=int(self.rows[rz, -1]))


def circuit_from_images(images: np.ndarray, d: int) -> CliffordCircuit:
    """Rebuild a circuit whose tableau (from the identity) equals ``images``.

    ``images`` holds ``C X_i C^dagger`` in rows ``0..n-1`` and ``C Z_i C^dagger``
    in rows ``n..2n-1``. Elimination proceeds qudit by qudit; the gates found map
    the images back to the identity tableau, and their inverse is returned.
    """
    require_odd_prime(d)
    rows = np.array(images, dtype=np.int64) % d
    n = rows.shape[0] // 2
    if rows.shape != (2 * n, 2 * n + 1) or n == 0:
        raise CliffordError(f"images must have shape (2n, 2n+1), got {rows.shape}")
    # images must preserve the commutation relations of the X_i, Z_i
    x, z = rows[:, :n], rows[:, n:2 * n]
    form = (z @ x.T - x @ z.T) % d
    expected = np.zeros((2 * n, 2 * n), dtype=np.int64)
    expected[:n, n:] = (-np.eye(n, dtype=np.int64)) % d
    expected[n:, :n] = np.eye(n, dtype=np.int64)
    if not np.array_equal(form, expected):
        raise CliffordError("images do not preserve the symplectic form")
    elim = _Eliminator(rows, n, d)
    for j in range(n):
        elim.eliminate_pair(j)
    ident = StabilizerTableau(n, d).rows
    if not np.array_equal(elim.rows, ident):
        raise CliffordError("images are not a valid Clifford tableau")
    return CliffordCircuit(d, n, elim.gates).inverse()


def sample_clifford_images(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random Clifford tableau images (including Pauli phases)."""
    require_odd_prime(d)
    images = np.zeros((2 * n, 2 * n + 1), dtype=np.int64)
    prefix: list[Gate] = []  # maps each image into the current local frame
    for j in range(n):
        m = n - j
        vx, vz = _sample_pair(m, d, rng)
        local = np.zeros((2, 2 * n + 1), dtype=np.int64)
        local[0, j:n], local[0, n + j:2 * n] = vx[:m], vx[m:]
        local[1, j:n], local[1, n + j:2 * n] = vz[:m], vz[m:]
        local[:, -1] = rng.integers(d, size=2)
        img = local.copy()
        for g in CliffordCircuit(d, n, list(prefix)).inverse().gates:
            _conjugate_rows(img, g, d)
        images[j], images[n + j] = img
        elim = _Eliminator(local, n, d)
        elim.eliminate_pair(j, 0, 1)
        prefix.extend(elim.gates)
    return images


def sample_clifford(n: int, d: int, rng: np.random.Generator) -> CliffordCircuit:
    """Uniformly random n-qudit Clifford circuit (modulo global phase)."""
    return circuit_from_images(sample_clifford_images(n, d, rng), d)

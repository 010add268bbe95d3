"""Local-measurement estimation: compatibility, factor functions, estimators and variances.

Every mode of a measurement string carries an integer label, with ``0``
meaning "not measured". GGB strings use their GGB index as label (alphabet
size ``D = d^2``); pure p-x strings use ``1`` for x and ``2`` for p (``D = 3``).
A term ``Q`` is covered by a measurement ``P`` (``Q |> P``) when ``P`` carries
Q's label on every mode of Q's support.

Identity terms are handled as exact constants: they are covered by every
measurement with factor 1, so each shot simply adds their coefficient.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .observables import GGB, PX, Observable, ObservableError, spectral_norm

CS = "cs"
L1 = "l1"
OGM = "ogm"
SCHEME_KINDS = (CS, L1, OGM)

X_LABEL = 1
P_LABEL = 2

# sampler(labels, shots, rng) -> outcomes of shape (shots, n)
OutcomeSampler = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


class SchemeError(ValueError):
    pass


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("BOSON_METER_THREADS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# term tables
# --------------------------------------------------------------------------


def measurement_labels(kind: str, string: Sequence) -> tuple[int, ...]:
    """Per-mode measurement label needed by a GGB or pure p-x string."""
    if kind == GGB:
        return tuple(int(s) for s in string)
    out = []
    for l, m in string:
        if l and m:
            raise SchemeError(f"p-x string {tuple(string)} is not pure")
        out.append(X_LABEL if l else P_LABEL if m else 0)
    return tuple(out)


def alphabet_size(obs: Observable) -> int:
    return obs.d ** 2 if obs.kind == GGB else 3


@dataclass(frozen=True)
class TermTable:
    """Array view of the non-identity terms of an observable."""

    kind: str
    n: int
    D: int
    labels: np.ndarray    # (M, n) int
    exponents: np.ndarray  # (M, n) int
    coeffs: np.ndarray    # (M,)
    constant: float
    strings: tuple

    @classmethod
    def from_observable(cls, obs: Observable) -> "TermTable":
        labels, exps, coeffs, strings = [], [], [], []
        for s, c in obs.terms:
            if not obs.support(s):
                continue
            lab = measurement_labels(obs.kind, s)
            labels.append(lab)
            if obs.kind == GGB:
                exps.append(tuple(int(v != 0) for v in s))
            else:
                exps.append(tuple(l + m for l, m in s))
            coeffs.append(c)
            strings.append(s)
        shape = (len(labels), obs.n)
        return cls(
            kind=obs.kind,
            n=obs.n,
            D=alphabet_size(obs),
            labels=np.array(labels, dtype=np.int64).reshape(shape),
            exponents=np.array(exps, dtype=np.int64).reshape(shape),
            coeffs=np.array(coeffs, dtype=float),
            constant=obs.identity_coeff,
            strings=tuple(strings),
        )

    @property
    def M(self) -> int:
        return len(self.coeffs)

    @property
    def support_mask(self) -> np.ndarray:
        return self.labels != 0

    @property
    def weights(self) -> np.ndarray:
        return self.support_mask.sum(axis=1)

    def covered_by(self, P: np.ndarray) -> np.ndarray:
        """Boolean (M,) mask of terms covered by one measurement string."""
        P = np.asarray(P)
        return np.all((self.labels == P[None, :]) | (self.labels == 0), axis=1)

    def coverage_matrix(self, measurements: np.ndarray) -> np.ndarray:
        """(M, m) boolean matrix ``C[j, P] = Q_j |> P``."""
        meas = np.asarray(measurements)
        ok = (self.labels[:, None, :] == meas[None, :, :]) | (self.labels[:, None, :] == 0)
        return np.all(ok, axis=2)


def covers(Q: Sequence, P: Sequence[int], kind: str) -> bool:
    """True when measurement labels ``P`` cover the GGB / pure p-x string ``Q``."""
    lab = measurement_labels(kind, Q)
    if len(lab) != len(P):
        raise SchemeError("string and measurement have different mode counts")
    return all(q == 0 or q == int(p) for q, p in zip(lab, P))


def compatible(table: TermTable) -> np.ndarray:
    """(M, M) mask: terms agree on the labels of every shared mode."""
    a = table.labels[:, None, :]
    b = table.labels[None, :, :]
    return np.all((a == b) | (a == 0) | (b == 0), axis=2)


# --------------------------------------------------------------------------
# schemes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementScheme:
    """Distribution over measurement strings together with its factor function.

    ``cs`` draws every mode label uniformly from the ``D - 1`` non-identity
    labels and is stored implicitly. ``l1`` and ``ogm`` carry an explicit list
    of measurement strings and probabilities.
    """

    kind: str
    n: int
    D: int
    measurements: np.ndarray | None = None
    probs: np.ndarray | None = None
    groups: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise SchemeError(f"unknown scheme kind {self.kind!r}")
        if self.kind != CS:
            if self.measurements is None or self.probs is None:
                raise SchemeError(f"{self.kind} scheme needs measurements and probabilities")
            p = np.asarray(self.probs, dtype=float)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise SchemeError("measurement probabilities must form a distribution")

    @classmethod
    def classical_shadow(cls, n: int, D: int) -> "MeasurementScheme":
        return cls(CS, n, D)

    @classmethod
    def importance_l1(cls, obs: Observable) -> "MeasurementScheme":
        """One measurement per distinct term label, chosen w.p. proportional to |alpha|."""
        table = TermTable.from_observable(obs)
        if table.M == 0:
            return cls(L1, obs.n, table.D, np.zeros((0, obs.n), dtype=np.int64), np.zeros(0))
        meas, own = np.unique(table.labels, axis=0, return_inverse=True)
        w = np.zeros(len(meas))
        np.add.at(w, own.reshape(-1), np.abs(table.coeffs))
        return cls(L1, obs.n, table.D, meas, _normalize(w))

    def describe(self) -> dict:
        out = {"kind": self.kind, "n": self.n, "D": self.D}
        if self.kind != CS:
            out["measurements"] = self.measurements.tolist()
            out["probs"] = [float(p) for p in self.probs]
        if self.groups is not None:
            out["groups"] = [list(g) for g in self.groups]
        return out

    # -- sampling and factors ---------------------------------------------------

    def sample(self, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
        """Draw measurement strings; returns labels (size, n) and indices for explicit schemes."""
        if self.kind == CS:
            return rng.integers(1, self.D, size=(size, self.n)), None
        idx = rng.choice(len(self.probs), size=size, p=self.probs)
        return self.measurements[idx], idx

    def _own(self, table: TermTable) -> np.ndarray:
        cov = (table.labels[:, None, :] == self.measurements[None, :, :]).all(axis=2)
        own = np.where(cov.any(axis=1), cov.argmax(axis=1), -1)
        return own

    def coverage_probability(self, table: TermTable) -> np.ndarray:
        """Probability that a draw covers each term (l1: that it draws the term's own string)."""
        if self.kind == CS:
            return float(self.D - 1) ** (-table.weights.astype(float))
        if self.kind == L1:
            own = self._own(table)
            return np.where(own >= 0, self.probs[np.maximum(own, 0)], 0.0)
        return table.coverage_matrix(self.measurements).astype(float) @ self.probs

    def _checked_coverage(self, table: TermTable) -> np.ndarray:
        cp = self.coverage_probability(table)
        if np.any(cp <= 0):
            bad = [table.strings[j] for j in np.flatnonzero(cp <= 0)[:3]]
            raise SchemeError(f"terms never covered by this scheme: {bad}")
        return cp

    def factors(self, table: TermTable, P: np.ndarray, index: int | None = None,
                _cache: dict | None = None) -> np.ndarray:
        """f(P, Q_j, K) for every term (zero where P does not cover Q_j)."""
        if self.kind == CS:
            cov = table.covered_by(P)
            return np.where(cov, float(self.D - 1) ** table.weights, 0.0)
        if index is None:
            hits = np.flatnonzero((self.measurements == np.asarray(P)[None, :]).all(axis=1))
            if hits.size == 0:
                return np.zeros(table.M)
            index = int(hits[0])
        if self.kind == L1:
            own = self._own(table) if _cache is None else _cache["own"]
            return np.where(own == index, 1.0 / self.probs[index], 0.0)
        cp = self._checked_coverage(table) if _cache is None else _cache["cp"]
        return table.covered_by(self.measurements[index]) / cp

    def expected_factor(self, table: TermTable) -> np.ndarray:
        """E_{P~K}[f(P, Q_j, K)] by exact summation over the scheme's support."""
        if self.kind == CS:
            if (self.D - 1) ** self.n > 10 ** 6:
                raise SchemeError("too many classical-shadow strings to enumerate")
            import itertools

            total = np.zeros(table.M)
            p = float(self.D - 1) ** (-self.n)
            for P in itertools.product(range(1, self.D), repeat=self.n):
                total += p * self.factors(table, np.array(P))
            return total
        total = np.zeros(table.M)
        for i, p in enumerate(self.probs):
            total += p * self.factors(table, self.measurements[i], i)
        return total

    def g_matrix(self, table: TermTable) -> np.ndarray:
        """g(Q_j, Q_k) = E_P[f_j f_k] over measurements covering both terms."""
        if self.kind == CS:
            a = table.labels[:, None, :]
            b = table.labels[None, :, :]
            shared = ((a != 0) & (b != 0)).sum(axis=2)
            return np.where(compatible(table), float(self.D - 1) ** shared, 0.0)
        if self.kind == L1:
            own = self._own(table)
            self._checked_coverage(table)
            same = own[:, None] == own[None, :]
            return np.where(same, 1.0 / self.probs[own][:, None], 0.0)
        cp = self._checked_coverage(table)
        c = table.coverage_matrix(self.measurements) / cp[:, None]
        return (c * self.probs[None, :]) @ c.T


def _normalize(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return w / w.sum()


def make_scheme(kind: str, obs: Observable, **kwargs) -> MeasurementScheme:
    if kind == CS:
        return MeasurementScheme.classical_shadow(obs.n, alphabet_size(obs))
    if kind == L1:
        return MeasurementScheme.importance_l1(obs)
    if kind == OGM:
        return optimize_distribution(greedy_group(obs), obs, **kwargs)
    raise SchemeError(f"unknown scheme kind {kind!r}")


# --------------------------------------------------------------------------
# estimation
# --------------------------------------------------------------------------


def _term_values(table: TermTable, outcomes: np.ndarray) -> np.ndarray:
    """(shots, M) products of per-mode outcomes raised to each term's exponents."""
    vals = np.ones((outcomes.shape[0], table.M))
    for mode in range(table.n):
        e = table.exponents[:, mode]
        if np.any(e):
            vals *= outcomes[:, mode][:, None] ** e[None, :]
    return vals


def _projection_mask(table: TermTable, outcomes: np.ndarray, bounds) -> np.ndarray:
    """(shots, M) mask: 1 where every outcome on the term's support is inside its bound."""
    b = np.broadcast_to(np.asarray(bounds, dtype=float), (table.M, table.n)) \
        if np.ndim(bounds) != 1 else np.broadcast_to(np.asarray(bounds, float)[None, :], (table.M, table.n))
    outside = (np.abs(outcomes)[:, None, :] > b[None, :, :]) & table.support_mask[None, :, :]
    return ~outside.any(axis=2)


def single_shot_values(table: TermTable, scheme: MeasurementScheme, labels: np.ndarray,
                       index: np.ndarray | None, sampler: OutcomeSampler,
                       rng: np.random.Generator, bounds=None) -> np.ndarray:
    """Single-shot estimator values for a batch of drawn measurement strings."""
    T = labels.shape[0]
    out = np.full(T, table.constant, dtype=float)
    if table.M == 0 or T == 0:
        return out
    cache = None
    if scheme.kind == L1:
        cache = {"own": scheme._own(table)}
        scheme._checked_coverage(table)
    elif scheme.kind == OGM:
        cache = {"cp": scheme._checked_coverage(table)}
    keys = labels if index is None else index[:, None]
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    for u in range(len(uniq)):
        rows = np.flatnonzero(inv == u)
        P = labels[rows[0]]
        f = scheme.factors(table, P, None if index is None else int(index[rows[0]]), cache)
        active = np.flatnonzero(f)
        if active.size == 0:
            continue
        y = np.asarray(sampler(P, rows.size, rng), dtype=float)
        sub = TermTable(table.kind, table.n, table.D, table.labels[active],
                        table.exponents[active], table.coeffs[active], 0.0,
                        tuple(table.strings[j] for j in active))
        vals = _term_values(sub, y)
        if bounds is not None:
            b = np.asarray(bounds, dtype=float)
            if b.ndim == 2:
                b = b[active]
            vals = vals * _projection_mask(sub, y, b)
        out[rows] += vals @ (sub.coeffs * f[active])
    return out


@dataclass
class EstimationReport:
    mean: float
    estimates: np.ndarray        # one per repetition
    shot_variance: float         # pooled empirical variance of single-shot values
    rep_std: float
    T: int
    R: int
    seed: int | None
    scheme: dict
    analytic_variance: float | None = None
    variance_bound: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "estimates": [float(e) for e in self.estimates],
            "shot_variance": self.shot_variance,
            "rep_std": self.rep_std,
            "T": self.T,
            "R": self.R,
            "seed": self.seed,
            "scheme": self.scheme,
            "analytic_variance": self.analytic_variance,
            "variance_bound": self.variance_bound,
            **{k: v for k, v in self.extra.items() if k != "shots"},
        }


def repetition_rngs(R: int, seed: int | None = None,
                    rng: np.random.Generator | None = None) -> list[np.random.Generator]:
    """Independent generators per repetition, reproducible from ``seed``."""
    if seed is not None:
        ss = np.random.SeedSequence(seed)
    else:
        rng = rng or np.random.default_rng()
        ss = np.random.SeedSequence(int(rng.integers(2 ** 63)))
    return [np.random.default_rng(s) for s in ss.spawn(R)]


def estimate(obs: Observable, scheme: MeasurementScheme, sampler: OutcomeSampler, T: int,
             R: int = 1, *, seed: int | None = None, rng: np.random.Generator | None = None,
             bounds=None, workers: int | None = None, keep_shots: bool = False) -> EstimationReport:
    """Average T single-shot values per repetition, for R repetitions.

    ``bounds`` enables projection: a term contributes 0 whenever an outcome on
    its support exceeds the bound in magnitude. It may be a scalar, a per-mode
    vector, or an (M, n) per-term array.
    """
    if T < 1 or R < 1:
        raise SchemeError("T and R must be positive")
    table = TermTable.from_observable(obs)
    if scheme.n != obs.n or scheme.D != table.D:
        raise SchemeError("scheme does not match the observable")
    rngs = repetition_rngs(R, seed, rng)

    def one(r: np.random.Generator) -> np.ndarray:
        labels, idx = scheme.sample(T, r)
        return single_shot_values(table, scheme, labels, idx, sampler, r, bounds)

    workers = workers or default_workers()
    if workers > 1 and R > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            shots = list(pool.map(one, rngs))
    else:
        shots = [one(r) for r in rngs]
    shots = np.stack(shots)
    est = shots.mean(axis=1)
    return EstimationReport(
        mean=float(est.mean()),
        estimates=est,
        shot_variance=float(shots.var(ddof=1)) if shots.size > 1 else 0.0,
        rep_std=float(est.std(ddof=1)) if R > 1 else 0.0,
        T=T,
        R=R,
        seed=seed,
        scheme=scheme.describe(),
        extra={"shots": shots} if keep_shots else {},
    )


# --------------------------------------------------------------------------
# variances
# --------------------------------------------------------------------------


class MomentOracle(Protocol):
    """Exact expectation values used for analytic variances."""

    def moments(self, table: TermTable) -> np.ndarray: ...

    def pair_moments(self, table: TermTable, mask: np.ndarray) -> np.ndarray: ...


def exact_variance(obs: Observable, scheme: MeasurementScheme, oracle: MomentOracle) -> float:
    """Single-shot variance ``sum_jk a_j a_k g_jk tr(rho Q_j Q_k) - (tr rho O')^2``.

    ``O'`` omits the identity term, whose contribution is deterministic.
    """
    table = TermTable.from_observable(obs)
    if table.M == 0:
        return 0.0
    g = scheme.g_matrix(table)
    mask = g != 0
    pm = np.asarray(oracle.pair_moments(table, mask))
    second = float(np.real(table.coeffs @ (np.where(mask, g * pm, 0.0)) @ table.coeffs))
    first = float(np.real(table.coeffs @ np.asarray(oracle.moments(table))))
    return second - first ** 2


def ggb_variance_bound(obs: Observable) -> float:
    """Local-GGB bound ``d^{2k} (d-1)^k ||O||^2`` for a k-local observable."""
    if obs.kind != GGB:
        raise SchemeError("GGB bound needs a GGB observable")
    k, d = obs.locality, obs.d
    return float(d ** (2 * k) * (d - 1) ** k * spectral_norm(obs) ** 2)


def px_term_bounds(table: TermTable, bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if b.ndim == 1:
        b = b[None, :]
    b = np.broadcast_to(b, (table.M, table.n))
    return np.prod(np.where(table.exponents > 0, b ** (2 * table.exponents), 1.0), axis=1)


def px_variance_bound(obs: Observable, bounds) -> float:
    """Bound ``3^k sum_j a_j^2 prod_i B_i^{2 e_i}`` for a projected p-x estimator."""
    if obs.kind != PX:
        raise SchemeError("p-x bound needs a p-x observable")
    table = TermTable.from_observable(obs)
    return float(3 ** obs.locality * np.sum(table.coeffs ** 2 * px_term_bounds(table, bounds)))


# --------------------------------------------------------------------------
# grouping and distribution optimization
# --------------------------------------------------------------------------


def greedy_group(obs: Observable) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Greedy compatibility grouping, largest |alpha| first.

    Each term joins every existing group it is compatible with, and opens a new
    group when none fits. Returns ``(measurement_labels, member_term_indices)``
    pairs; modes no member touches stay unmeasured (label 0).
    """
    table = TermTable.from_observable(obs)
    order = np.argsort(-np.abs(table.coeffs), kind="stable")
    groups: list[tuple[np.ndarray, list[int]]] = []
    for j in order:
        lab = table.labels[j]
        placed = False
        for glab, members in groups:
            if np.all((glab == lab) | (glab == 0) | (lab == 0)):
                glab[lab != 0] = lab[lab != 0]
                members.append(int(j))
                placed = True
        if not placed:
            groups.append((lab.copy(), [int(j)]))
    return [(tuple(int(v) for v in g), tuple(m)) for g, m in groups]


def diagonal_cost(table: TermTable, coverage: np.ndarray, probs: np.ndarray) -> float:
    """``sum_j a_j^2 / (C K)_j``, the diagonal part of the OGM variance."""
    cp = coverage @ probs
    if np.any(cp <= 0):
        return math.inf
    return float(np.sum(table.coeffs ** 2 / cp))


def optimize_distribution(groups, obs: Observable, *, tol: float = 1e-8,
                          max_iter: int = 100_000, eta: float = 1.0) -> MeasurementScheme:
    """Minimise the diagonal cost over group probabilities.

    Multiplicative update ``K <- K * (g / l)^eta`` with ``g_P`` the gradient
    magnitude and ``l`` the current cost; the step is halved whenever it fails
    to decrease the cost. Stops on relative change below ``tol``.
    """
    table = TermTable.from_observable(obs)
    if not groups:
        raise SchemeError("no groups to optimise over")
    meas = np.array([g[0] for g in groups], dtype=np.int64).reshape(len(groups), obs.n)
    C = table.coverage_matrix(meas).astype(float)
    K = np.full(len(groups), 1.0 / len(groups))
    cost = diagonal_cost(table, C, K)
    if not math.isfinite(cost):
        raise SchemeError("groups do not cover every term")
    a2 = table.coeffs ** 2
    for _ in range(max_iter):
        cp = C @ K
        grad = C.T @ (a2 / cp ** 2)
        trial = _normalize(K * (grad / cost) ** eta)
        new = diagonal_cost(table, C, trial)
        if new >= cost:
            eta /= 2
            if eta < 1e-12:
                break
            continue
        change = (cost - new) / cost
        K, cost = trial, new
        if change < tol:
            break
    return MeasurementScheme(OGM, obs.n, table.D, meas, K,
                             tuple(tuple(g[1]) for g in groups))

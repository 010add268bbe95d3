"""Gaussian states, homodyne sampling and exact Wick moments.

Quadratures are ordered ``(x_1, p_1, ..., x_n, p_n)`` and the vacuum
covariance is the identity, i.e. ``x = b + b^dagger``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import integrate, stats

from .observables import PX, Observable
from .schemes import P_LABEL, X_LABEL, TermTable

PSD_TOL = 1e-10
JITTER_START = 1e-12
JITTER_MAX = 1e-8


class GaussianError(ValueError):
    pass


def symplectic_form(n: int) -> np.ndarray:
    return np.kron(np.eye(n), np.array([[0.0, 1.0], [-1.0, 0.0]]))


@dataclass(frozen=True)
class GaussianState:
    n: int
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if mean.size != 2 * self.n or cov.shape != (2 * self.n, 2 * self.n):
            raise GaussianError("mean/cov shapes do not match the mode count")
        if np.abs(cov - cov.T).max() > PSD_TOL:
            raise GaussianError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() < -PSD_TOL:
            raise GaussianError("covariance is not positive semidefinite")
        mean.setflags(write=False)
        cov = (cov + cov.T) / 2
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def vacuum(cls, n: int) -> "GaussianState":
        return cls(n, np.zeros(2 * n), np.eye(2 * n))

    def symplectic_eigenvalues(self) -> np.ndarray:
        ev = np.abs(np.linalg.eigvals(1j * symplectic_form(self.n) @ self.cov))
        return np.sort(ev)[::2]

    def is_physical(self, tol: float = 1e-9) -> bool:
        return bool(self.symplectic_eigenvalues().min() >= 1 - tol)

    def quadrature_index(self, mode: int, label: int) -> int:
        return 2 * mode + (0 if label == X_LABEL else 1)

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianState":
        return cls(int(data["n"]), data["mean"], data["cov"])

    @classmethod
    def load(cls, path: str | Path) -> "GaussianState":
        return cls.from_dict(json.loads(Path(path).read_text()))


def tmsv(r: float) -> GaussianState:
    nu = np.cosh(2 * r)
    c = np.sqrt(nu ** 2 - 1)
    z = np.diag([1.0, -1.0])
    cov = np.block([[nu * np.eye(2), c * z], [c * z, nu * np.eye(2)]])
    return GaussianState(2, np.zeros(4), cov)


def equal_squeezed(n: int, r: float) -> GaussianState:
    return GaussianState(n, np.zeros(2 * n), np.diag(np.tile([np.exp(-2 * r), np.exp(2 * r)], n)))


def random_gaussian(n: int, seed: int | None = None, trace_norm: float = 1.0,
                    physical: bool = False, rng: np.random.Generator | None = None) -> GaussianState:
    """Zero-mean state with ``cov = A A^T`` rescaled to ``tr(cov) = trace_norm``.

    With ``physical=True`` the covariance is then scaled up until its smallest
    symplectic eigenvalue is 1, so the trace may exceed ``trace_norm``.
    """
    rng = rng or np.random.default_rng(seed)
    a = rng.normal(size=(2 * n, 2 * n))
    cov = a @ a.T
    cov *= trace_norm / np.trace(cov)
    state = GaussianState(n, np.zeros(2 * n), cov)
    if physical:
        nu = state.symplectic_eigenvalues().min()
        if nu < 1:
            state = GaussianState(n, state.mean, cov / nu)
    return state


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def _selected(labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=int)
    modes = np.flatnonzero(labels)
    if modes.size == 0:
        raise GaussianError("no measured modes")
    if np.any((labels != 0) & (labels != X_LABEL) & (labels != P_LABEL)):
        raise GaussianError(f"invalid quadrature labels {labels.tolist()}")
    idx = 2 * modes + (labels[modes] == P_LABEL)
    return modes, idx


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    while jitter <= JITTER_MAX:
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
        except np.linalg.LinAlgError:
            jitter *= 10
    raise GaussianError("covariance is singular beyond the jitter limit")


def sample_quadratures(state: GaussianState, labels: Sequence[int], rng: np.random.Generator,
                       shots: int = 1) -> np.ndarray:
    """Joint homodyne outcomes, shape (shots, n); unmeasured modes read 0."""
    if len(labels) != state.n:
        raise GaussianError("label count does not match the mode count")
    modes, idx = _selected(labels)
    chol = _cholesky(state.cov[np.ix_(idx, idx)])
    draws = state.mean[idx] + rng.standard_normal((shots, idx.size)) @ chol.T
    out = np.zeros((shots, state.n))
    out[:, modes] = draws
    return out


@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    bound: float | None = None  # defaults to 5 sigma

    def __post_init__(self):
        if self.sigma < 0:
            raise GaussianError("noise sigma must be non-negative")
        if self.bound is not None and self.bound <= 0:
            raise GaussianError("noise bound must be positive")

    @property
    def B_e(self) -> float:
        return 5 * self.sigma if self.bound is None else self.bound

    def variance(self) -> float:
        if self.sigma == 0:
            return 0.0
        c = self.B_e / self.sigma
        return float(stats.truncnorm.var(-c, c, scale=self.sigma))


def add_noise(outcomes: np.ndarray, noise: NoiseModel, rng: np.random.Generator,
              measured: np.ndarray | None = None) -> np.ndarray:
    """Add zero-mean truncated-normal noise to the measured entries."""
    if noise.sigma == 0:
        return np.array(outcomes, dtype=float)
    c = noise.B_e / noise.sigma
    e = stats.truncnorm.rvs(-c, c, scale=noise.sigma, size=np.shape(outcomes), random_state=rng)
    if measured is not None:
        e = e * measured
    return outcomes + e


def apply_projection(outcomes: np.ndarray, bound, support: np.ndarray) -> np.ndarray:
    """Boolean per-shot acceptance: False when any outcome on ``support`` exceeds its bound."""
    b = np.asarray(bound, dtype=float)
    if np.any(b <= 0):
        raise GaussianError("projection bounds must be positive")
    support = np.asarray(support, dtype=bool)
    outside = (np.abs(outcomes) > b) & support
    return ~outside.any(axis=-1)


def gaussian_sampler(state: GaussianState, noise: NoiseModel | None = None):
    """Outcome sampler ``(labels, shots, rng) -> (shots, n)`` for the estimation framework."""

    def sample(labels, shots, rng):
        y = sample_quadratures(state, labels, rng, shots)
        if noise is not None and noise.sigma > 0:
            y = add_noise(y, noise, rng, np.asarray(labels) != 0)
        return y

    return sample


def default_bound(state: GaussianState, factor: float = 3.0) -> float:
    """``factor`` times the largest quadrature standard deviation."""
    return float(factor * np.sqrt(np.max(np.diag(state.cov))))


# --------------------------------------------------------------------------
# Wick moments
# --------------------------------------------------------------------------


def gaussian_moment(mean: np.ndarray, cov: np.ndarray, exps: Sequence[int]) -> float:
    """``E[prod_i y_i^{e_i}]`` for ``y ~ N(mean, cov)`` via Stein's recursion.

    ``E[y^e] = mu_i m(e - 1_i) + sum_j cov_ij (e - 1_i)_j m(e - 1_i - 1_j)``.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    keep = [i for i, e in enumerate(exps) if e]
    if not keep:
        return 1.0
    mu = mean[keep]
    sig = cov[np.ix_(keep, keep)]
    m = len(keep)

    @lru_cache(maxsize=None)
    def rec(e: tuple[int, ...]) -> float:
        if not any(e):
            return 1.0
        i = next(k for k, v in enumerate(e) if v)
        e1 = list(e)
        e1[i] -= 1
        total = mu[i] * rec(tuple(e1)) if mu[i] else 0.0
        for j in range(m):
            if e1[j] and sig[i, j]:
                e2 = list(e1)
                e2[j] -= 1
                total += sig[i, j] * e1[j] * rec(tuple(e2))
        return total

    return float(rec(tuple(int(exps[k]) for k in keep)))


def wick_moment(state: GaussianState, labels: Sequence[int], exps: Sequence[int]) -> float:
    """Exact ``<prod_i q_i^{e_i}>`` with ``q_i`` the quadrature named by ``labels[i]``."""
    labels = np.asarray(labels, dtype=int)
    exps = np.asarray(exps, dtype=int)
    if labels.shape != (state.n,) or exps.shape != (state.n,):
        raise GaussianError("labels/exponents must have one entry per mode")
    if np.any((exps > 0) & (labels == 0)):
        raise GaussianError("exponent on an unmeasured mode")
    if not np.any(exps):
        return 1.0
    modes, idx = _selected(np.where(exps > 0, labels, 0))
    return gaussian_moment(state.mean[idx], state.cov[np.ix_(idx, idx)], exps[modes])


def px_string_moment(state: GaussianState, string) -> float:
    """Moment of a pure p-x string given as ``[(l_i, m_i), ...]``."""
    labels = [X_LABEL if l else P_LABEL if m else 0 for l, m in string]
    exps = [l + m for l, m in string]
    return wick_moment(state, labels, exps)


def exact_px_expectation(state: GaussianState, obs: Observable) -> float:
    if obs.kind != PX:
        raise GaussianError("observable is not a p-x observable")
    return float(sum(c * px_string_moment(state, s) for s, c in obs.terms))


class GaussianMoments:
    """Moment oracle for analytic variances of pure p-x estimators."""

    def __init__(self, state: GaussianState):
        self.state = state

    def moments(self, table: TermTable) -> np.ndarray:
        return np.array([wick_moment(self.state, l, e)
                         for l, e in zip(table.labels, table.exponents)])

    def pair_moments(self, table: TermTable, mask: np.ndarray | None = None) -> np.ndarray:
        M = table.M
        out = np.zeros((M, M))
        for j in range(M):
            for k in range(j, M):
                if mask is not None and not mask[j, k]:
                    continue
                lab = np.maximum(table.labels[j], table.labels[k])
                out[j, k] = out[k, j] = wick_moment(
                    self.state, lab, table.exponents[j] + table.exponents[k])
        return out


# --------------------------------------------------------------------------
# observables and channels
# --------------------------------------------------------------------------


def mean_photon_observable(n: int) -> Observable:
    """Per-mode average photon number ``(1/n) sum_i (x_i^2 + p_i^2 - 2) / 4``."""
    if n < 1:
        raise GaussianError("need at least one mode")
    terms = [(tuple((0, 0) for _ in range(n)), -0.5)]
    for i in range(n):
        for q in ((2, 0), (0, 2)):
            s = [(0, 0)] * n
            s[i] = q
            terms.append((tuple(s), 1 / (4 * n)))
    return Observable.from_terms(PX, n, terms)


def apply_shift_channel(state: GaussianState, a0: float = 0.0, s: float = 0.0,
                        modes: Sequence[int] | None = None) -> GaussianState:
    """Random position shift with mean ``a0`` and standard deviation ``s``."""
    if s < 0:
        raise GaussianError("shift std must be non-negative")
    modes = range(state.n) if modes is None else modes
    mean = state.mean.copy()
    cov = state.cov.copy()
    for m in modes:
        mean[2 * m] += a0
        cov[2 * m, 2 * m] += s ** 2
    return GaussianState(state.n, mean, cov)


def truncated_moment_1d(mu: float, var: float, power: int, bound: float) -> float:
    """``E[y^power 1{|y| <= bound}]`` for a scalar normal, by quadrature."""
    sd = np.sqrt(var)
    pdf = stats.norm(mu, sd).pdf
    val, _ = integrate.quad(lambda y: y ** power * pdf(y), -bound, bound,
                            epsabs=1e-13, epsrel=1e-11, limit=200)
    return float(val)


def projection_bias_1d(state: GaussianState, mode: int, label: int, power: int,
                       bound: float) -> float:
    """``|E[q^k 1{|q| <= B}] - E[q^k]|`` for a single quadrature."""
    i = state.quadrature_index(mode, label)
    full = gaussian_moment(state.mean[[i]], state.cov[np.ix_([i], [i])], [power])
    return abs(truncated_moment_1d(state.mean[i], state.cov[i, i], power, bound) - full)


def sample_rotated(state: GaussianState, mode: int, theta: float, rng: np.random.Generator,
                   shots: int = 1) -> np.ndarray:
    """Homodyne samples of ``x cos(theta) + p sin(theta)`` on a single mode."""
    v = np.array([np.cos(theta), np.sin(theta)])
    i = slice(2 * mode, 2 * mode + 2)
    mu = float(v @ state.mean[i])
    var = float(v @ state.cov[i, i] @ v)
    return mu + np.sqrt(max(var, 0.0)) * rng.standard_normal(shots)


def random_px_observable(n: int, M: int, K: int, rng: np.random.Generator, k: int = 2,
                         normalize: bool = True, multilinear: bool = False) -> Observable:
    """Random pure p-x observable with ``M`` terms of total degree exactly ``K``.

    Each term picks ``min(k, K, n)`` support modes uniformly, a quadrature per
    mode, and a uniformly random composition of ``K`` over those modes.
    Coefficients are standard normal, rescaled so that ``sum a^2 = 1``.
    With ``multilinear`` every exponent is 1 and the support size is ``K``.
    """
    if min(n, M, K, k) < 1:
        raise GaussianError("n, M, K and k must be positive")
    size = min(K if multilinear else min(k, K), n)
    if multilinear and K > n:
        raise GaussianError("multilinear terms need K <= n")
    terms = []
    for _ in range(M):
        modes = rng.choice(n, size=size, replace=False)
        if multilinear:
            parts = np.ones(size, dtype=int)
        else:
            cuts = np.sort(rng.choice(np.arange(1, K), size=size - 1, replace=False))
            parts = np.diff(np.concatenate([[0], cuts, [K]]))
        s = [(0, 0)] * n
        for mode, e in zip(modes, parts):
            s[mode] = (int(e), 0) if rng.random() < 0.5 else (0, int(e))
        terms.append((tuple(s), float(rng.standard_normal())))
    obs = Observable.from_terms(PX, n, terms)
    if normalize:
        norm = float(np.sqrt(np.sum(obs.coeffs ** 2)))
        obs = obs.scaled(1 / norm)
    return obs


def projected_moment(state: GaussianState, labels: Sequence[int], exps: Sequence[int],
                     bound: float) -> float:
    """``E[prod q_i^{e_i} 1{|q_i| <= B on the support}]`` by numerical integration.

    Supports terms on at most two modes.
    """
    labels = np.asarray(labels, dtype=int)
    exps = np.asarray(exps, dtype=int)
    modes, idx = _selected(np.where(exps > 0, labels, 0))
    if modes.size > 2:
        raise GaussianError("numerical projection supports at most two modes")
    mu = state.mean[idx]
    cov = state.cov[np.ix_(idx, idx)]
    e = exps[modes]
    if modes.size == 1:
        return truncated_moment_1d(mu[0], cov[0, 0], int(e[0]), bound)
    dist = stats.multivariate_normal(mu, cov)
    val, _ = integrate.nquad(lambda a, b: a ** e[0] * b ** e[1] * dist.pdf([a, b]),
                             [[-bound, bound], [-bound, bound]],
                             opts={"epsabs": 1e-11, "epsrel": 1e-9, "limit": 100})
    return float(val)

"""Continuous-variable analyses on top of the estimation framework.

Sample budgets, detector noise, separable two-basis estimation, purity
estimation, position-shift moment recovery and mixed-register bounds.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from math import comb
from typing import Sequence

import numpy as np
from scipy import stats

from .cvsim import (
    GaussianError,
    GaussianMoments,
    GaussianState,
    NoiseModel,
    exact_px_expectation,
    gaussian_sampler,
    sample_quadratures,
    sample_rotated,
    wick_moment,
)
from .observables import PX, Observable
from .schemes import (
    P_LABEL,
    X_LABEL,
    EstimationReport,
    MeasurementScheme,
    TermTable,
    estimate,
    exact_variance,
    px_term_bounds,
    repetition_rngs,
)


class ApplicationError(ValueError):
    pass


def _require_pure_px(obs: Observable) -> None:
    if obs.kind != PX:
        raise ApplicationError("a p-x observable is required")
    if not obs.is_pure():
        raise ApplicationError("observable contains non-pure p-x strings")


def _ceil(x: float) -> int:
    # guard against 27000.000000000004-style float noise
    r = round(x)
    return int(r) if abs(x - r) <= 1e-9 * max(1.0, abs(x)) else math.ceil(x)


# --------------------------------------------------------------------------
# sample budget
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleBudget:
    eps_o: float
    delta: float
    eps_B: float
    N: int
    variance_bound: float
    total_error: float

    def describe(self) -> str:
        return (f"N={self.N} measurements give |error| <= {self.total_error:.4g} "
                f"with probability >= {1 - self.delta:.4g} (Chebyshev)")


def sample_budget(obs: Observable, bounds, eps_o: float, delta: float,
                  eps_B: float = 0.0) -> SampleBudget:
    """Chebyshev sample count ``ceil(3^k sum_j a_j^2 prod B^{2e} / (eps^2 delta))``."""
    _require_pure_px(obs)
    if eps_o <= 0 or not 0 < delta < 1:
        raise ApplicationError("need eps_o > 0 and 0 < delta < 1")
    if np.any(np.asarray(bounds, dtype=float) <= 0):
        raise ApplicationError("bounds must be positive")
    table = TermTable.from_observable(obs)
    var = float(3 ** obs.locality * np.sum(table.coeffs ** 2 * px_term_bounds(table, bounds)))
    return SampleBudget(
        eps_o=eps_o,
        delta=delta,
        eps_B=eps_B,
        N=max(1, _ceil(var / (eps_o ** 2 * delta))),
        variance_bound=var,
        total_error=eps_o + eps_B * float(np.abs(table.coeffs).sum()),
    )


# --------------------------------------------------------------------------
# detector noise
# --------------------------------------------------------------------------


def noise_variance_bound(obs: Observable, B: float, B_e: float) -> float:
    """``n B^{2K-2} B_e^2 sum |a|^2`` with K the maximal term degree."""
    _require_pure_px(obs)
    table = TermTable.from_observable(obs)
    K = obs.degree
    return float(obs.n * B ** (2 * K - 2) * B_e ** 2 * np.sum(table.coeffs ** 2))


def _noise_moments(noise: NoiseModel, order: int) -> np.ndarray:
    out = np.zeros(order + 1)
    out[0] = 1.0
    if noise.sigma == 0:
        return out
    c = noise.B_e / noise.sigma
    for m in range(2, order + 1, 2):
        out[m] = stats.truncnorm.moment(m, -c, c, scale=noise.sigma)
    return out


def _noisy_moment(state: GaussianState, labels: np.ndarray, powers: np.ndarray,
                  mom: np.ndarray) -> float:
    """``E[prod_i (y_i + e_i)^{c_i}]`` with independent noise on every powered mode."""
    modes = np.flatnonzero(powers)
    total = 0.0
    for ms in itertools.product(*(range(0, powers[i] + 1, 2) for i in modes)):
        w = 1.0
        for i, m in zip(modes, ms):
            w *= comb(int(powers[i]), m) * mom[m]
        if w == 0:
            continue
        red = powers.copy()
        red[modes] -= np.array(ms, dtype=int)
        total += w * wick_moment(state, np.where(red > 0, labels, 0), red)
    return total


def noisy_exact_moments(state: GaussianState, obs: Observable, scheme: MeasurementScheme,
                        noise: NoiseModel) -> tuple[float, float]:
    """Exact mean and single-shot variance of the noisy estimator (all noise orders)."""
    table = TermTable.from_observable(obs)
    mom = _noise_moments(noise, 2 * max(1, int(table.exponents.max(initial=1))) * 2)
    first = np.array([_noisy_moment(state, l, e, mom) for l, e in zip(table.labels, table.exponents)])
    g = scheme.g_matrix(table)
    second = 0.0
    for j in range(table.M):
        for k in range(table.M):
            if g[j, k]:
                lab = np.maximum(table.labels[j], table.labels[k])
                c = table.exponents[j] + table.exponents[k]
                second += table.coeffs[j] * table.coeffs[k] * g[j, k] * _noisy_moment(state, lab, c, mom)
    mean_nc = float(table.coeffs @ first)
    return mean_nc + table.constant, second - mean_nc ** 2


def noise_extra_variance(state: GaussianState, obs: Observable, scheme: MeasurementScheme,
                         noise: NoiseModel) -> float:
    """Second-order noise term ``V_e`` (one reduced mode per overlap)."""
    table = TermTable.from_observable(obs)
    var_e = noise.variance()
    g = scheme.g_matrix(table)
    total = 0.0
    for j in range(table.M):
        for k in range(table.M):
            if not g[j, k]:
                continue
            lab = np.maximum(table.labels[j], table.labels[k])
            c = table.exponents[j] + table.exponents[k]
            overlap = np.flatnonzero(table.support_mask[j] & table.support_mask[k])
            for i in overlap:
                red = c.copy()
                red[i] -= 2
                total += (table.coeffs[j] * table.coeffs[k] * g[j, k]
                          * wick_moment(state, np.where(red > 0, lab, 0), red) * var_e)
    return float(total)


@dataclass
class NoiseCheck:
    empirical_mean: float
    empirical_variance: float
    exact_mean: float
    V_o: float
    V_e: float
    exact_variance: float
    bound: float | None
    report: EstimationReport


def noisy_variance_check(state: GaussianState, obs: Observable, scheme: MeasurementScheme,
                         noise: NoiseModel, T: int, R: int = 1, seed: int | None = None,
                         B: float | None = None) -> NoiseCheck:
    _require_pure_px(obs)
    rep = estimate(obs, scheme, gaussian_sampler(state, noise), T, R, seed=seed)
    V_o = exact_variance(obs, scheme, GaussianMoments(state))
    mean, var = noisy_exact_moments(state, obs, scheme, noise)
    return NoiseCheck(
        empirical_mean=rep.mean,
        empirical_variance=rep.shot_variance,
        exact_mean=mean,
        V_o=V_o,
        V_e=noise_extra_variance(state, obs, scheme, noise),
        exact_variance=var,
        bound=None if B is None else noise_variance_bound(obs, B, noise.B_e),
        report=rep,
    )


# --------------------------------------------------------------------------
# separable observables
# --------------------------------------------------------------------------


def box_sup_bound(obs: Observable, B: float) -> float:
    """Crude sup of ``|O|`` over the box ``[-B, B]^n``: ``sum |a| B^deg``."""
    return float(sum(abs(c) * B ** sum(l + m for l, m in s) for s, c in obs.terms))


def _single_quadrature(obs: Observable, label: int) -> bool:
    bad = 1 if label == X_LABEL else 0  # index of the forbidden exponent
    return all(pair[bad] == 0 for s, _ in obs.terms for pair in s)


def separable_estimate(U: Observable, V: Observable, state: GaussianState, T: int,
                       R: int = 1, *, norm_U: float | None, norm_V: float | None,
                       B: float, seed: int | None = None) -> EstimationReport:
    """Two-measurement scheme for ``O = U(p) + V(x)``.

    All momenta are measured with probability ``lam = |U| / (|U| + |V|)``,
    otherwise all positions. A shot with any outcome outside ``[-B, B]``
    contributes 0, so each shot is bounded by ``|U| + |V|`` when the norms
    are sup bounds over the box.
    """
    if norm_U is None or norm_V is None:
        raise ApplicationError("sup bounds for U and V are required")
    if U.kind != PX or V.kind != PX or U.n != V.n or U.n != state.n:
        raise ApplicationError("U and V must be p-x observables on the state's modes")
    if not _single_quadrature(U, P_LABEL) or not _single_quadrature(V, X_LABEL):
        raise ApplicationError("U must depend on momenta only and V on positions only")
    if norm_U < 0 or norm_V < 0 or norm_U + norm_V == 0:
        raise ApplicationError("sup bounds must be non-negative and not both zero")
    n = state.n
    lam = norm_U / (norm_U + norm_V)
    tu, tv = TermTable.from_observable(U), TermTable.from_observable(V)
    const = tu.constant + tv.constant

    def poly(table: TermTable, y: np.ndarray) -> np.ndarray:
        vals = np.ones((y.shape[0], table.M))
        for mode in range(n):
            vals *= y[:, mode][:, None] ** table.exponents[:, mode][None, :]
        return vals @ table.coeffs

    ests = []
    shot_vars = []
    for r in repetition_rngs(R, seed):
        pick_p = r.random(T) < lam
        vals = np.full(T, float(const))
        for flag, label, table, prob in ((True, P_LABEL, tu, lam), (False, X_LABEL, tv, 1 - lam)):
            rows = np.flatnonzero(pick_p == flag)
            if rows.size == 0 or prob == 0:
                continue
            y = sample_quadratures(state, [label] * n, r, rows.size)
            inside = np.all(np.abs(y) <= B, axis=1)
            vals[rows] += inside * poly(table, y) / prob
        ests.append(vals.mean())
        shot_vars.append(vals.var(ddof=1) if T > 1 else 0.0)
    ests = np.array(ests)
    return EstimationReport(
        mean=float(ests.mean()),
        estimates=ests,
        shot_variance=float(np.mean(shot_vars)),
        rep_std=float(ests.std(ddof=1)) if R > 1 else 0.0,
        T=T,
        R=R,
        seed=seed,
        scheme={"kind": "separable", "lambda": lam, "B": B},
        variance_bound=(norm_U + norm_V) ** 2,
    )


# --------------------------------------------------------------------------
# purity
# --------------------------------------------------------------------------


def gaussian_purity(state: GaussianState) -> float:
    return float(1 / np.sqrt(np.linalg.det(state.cov)))


def gaussian_overlap(a: GaussianState, b: GaussianState) -> float:
    """Exact ``tr(rho_a rho_b)`` for Gaussian states."""
    if a.n != b.n:
        raise ApplicationError("states have different mode counts")
    s = (a.cov + b.cov) / 2
    dm = a.mean - b.mean
    return float(np.exp(-0.25 * dm @ np.linalg.solve(s, dm)) / np.sqrt(np.linalg.det(s)))


def purity_from_overlap(overlap: float, reference_purity: float) -> float:
    """Plug-in purity ``tr(rho0 rho)^2 / tr(rho0^2)``, first order in the admixture."""
    if reference_purity <= 0:
        raise ApplicationError("reference purity must be positive")
    return float(overlap ** 2 / reference_purity)


def estimate_gaussian_moments(state: GaussianState, shots: int,
                              rng: np.random.Generator) -> GaussianState:
    """Estimate mean and covariance from homodyne data.

    One quarter of the shots measure all x, one quarter all p, and one
    quarter alternate x/p in both patterns for the cross terms. The remaining
    shots measure the +-45 degree quadratures of each mode for same-mode
    x-p covariances. The result is symmetrized and clipped to PSD.
    """
    n = state.n
    q = max(2, shots // 4)
    X = sample_quadratures(state, [X_LABEL] * n, rng, q)
    P = sample_quadratures(state, [P_LABEL] * n, rng, q)
    alt1 = [X_LABEL if i % 2 == 0 else P_LABEL for i in range(n)]
    alt2 = [P_LABEL if i % 2 == 0 else X_LABEL for i in range(n)]
    A1 = sample_quadratures(state, alt1, rng, q // 2 or 1)
    A2 = sample_quadratures(state, alt2, rng, q // 2 or 1)
    mean = np.zeros(2 * n)
    mean[0::2], mean[1::2] = X.mean(0), P.mean(0)
    cov = np.zeros((2 * n, 2 * n))
    cov[0::2, 0::2] = np.cov(X, rowvar=False).reshape(n, n)
    cov[1::2, 1::2] = np.cov(P, rowvar=False).reshape(n, n)
    for data, lab in ((A1, alt1), (A2, alt2)):
        c = np.cov(data, rowvar=False).reshape(n, n)
        for i in range(n):
            for j in range(n):
                if i != j and lab[i] == X_LABEL and lab[j] == P_LABEL:
                    cov[2 * i, 2 * j + 1] = cov[2 * j + 1, 2 * i] = c[i, j]
    for i in range(n):
        plus = sample_rotated(state, i, np.pi / 4, rng, q)
        minus = sample_rotated(state, i, -np.pi / 4, rng, q)
        cov[2 * i, 2 * i + 1] = cov[2 * i + 1, 2 * i] = (plus.var(ddof=1) - minus.var(ddof=1)) / 2
    w, v = np.linalg.eigh((cov + cov.T) / 2)
    cov = (v * np.maximum(w, 0)) @ v.T
    return GaussianState(n, mean, cov)


@dataclass(frozen=True)
class PurityEstimate:
    purity: float
    overlap: float
    reference_purity: float
    exact_purity: float | None
    note: str = "first-order plug-in; valid for a small admixture orthogonal to the reference"


def estimate_purity(reference: GaussianState, state: GaussianState, shots: int,
                    rng: np.random.Generator) -> PurityEstimate:
    """Purity of ``state`` relative to the intended Gaussian ``reference``."""
    est = estimate_gaussian_moments(state, shots, rng)
    ov = gaussian_overlap(reference, est)
    ref = gaussian_purity(reference)
    return PurityEstimate(purity_from_overlap(ov, ref), ov, ref, gaussian_purity(state))


# --------------------------------------------------------------------------
# position-shift moments
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ShiftMoments:
    raw: np.ndarray  # E[a^k] for k = 0..k_max

    @property
    def mean(self) -> float:
        return float(self.raw[1])

    @property
    def variance(self) -> float:
        return float(self.raw[2] - self.raw[1] ** 2) if len(self.raw) > 2 else float("nan")


def shift_moments_from_data(x: np.ndarray, reference: Sequence[float], k_max: int = 2) -> ShiftMoments:
    """Solve ``E[x^k] = sum_m C(k, m) E[a^m] r_{k-m}`` by forward substitution.

    ``reference[j]`` is the unshifted moment ``tr(rho0 x^j)`` (with ``r_0 = 1``).
    """
    if not 1 <= k_max <= 4:
        raise ApplicationError("k_max must be between 1 and 4")
    r = np.asarray(reference, dtype=float)
    if len(r) < k_max + 1 or r[0] == 0:
        raise ApplicationError("need reference moments r_0..r_k_max with r_0 != 0")
    x = np.asarray(x, dtype=float)
    m = np.array([np.mean(x ** k) for k in range(k_max + 1)])
    a = np.zeros(k_max + 1)
    a[0] = 1.0
    for k in range(1, k_max + 1):
        a[k] = (m[k] - sum(comb(k, j) * a[j] * r[k - j] for j in range(k))) / r[0]
    return ShiftMoments(a)


def estimate_shift_moments(state: GaussianState, reference: GaussianState, mode: int,
                           shots: int, rng: np.random.Generator, k_max: int = 2) -> ShiftMoments:
    """Moments of an unknown position shift on ``mode`` from x-homodyne data."""
    if not 1 <= k_max <= 4:
        raise ApplicationError("k_max must be between 1 and 4")
    labels = [0] * state.n
    labels[mode] = X_LABEL
    x = sample_quadratures(state, labels, rng, shots)[:, mode]
    ref = []
    for k in range(k_max + 1):
        e = [0] * reference.n
        e[mode] = k
        ref.append(wick_moment(reference, labels, e))
    return shift_moments_from_data(x, ref, k_max)


# --------------------------------------------------------------------------
# mixed discrete / continuous bounds
# --------------------------------------------------------------------------


def mixed_variance_bound(k: int, K: int, d: int, B: float, alpha_sq: float) -> float:
    """Joint bound ``(d^2 + 2)^k max(2^k, B^{2K}) sum a^2``."""
    _positive(k=k, K=K, d=d, B=B)
    return float((d ** 2 + 2) ** k * max(2 ** k, B ** (2 * K)) * alpha_sq)


def mixed_variance_bound_split(k: int, K: int, d: int, B: float, discrete_norm: float,
                               continuous_alpha_sq: float) -> float:
    """Split bound ``d^{3k} |O_disc|^2 + 3^k B^{2K} sum a_cont^2``."""
    _positive(k=k, K=K, d=d, B=B)
    return float(d ** (3 * k) * discrete_norm ** 2 + 3 ** k * B ** (2 * K) * continuous_alpha_sq)


def _positive(**kw) -> None:
    for name, v in kw.items():
        if v <= 0:
            raise ApplicationError(f"{name} must be positive")

"""Global qudit Clifford classical shadows.

A snapshot applies a uniformly random Clifford ``U``, measures in the
computational basis and inverts the depolarizing shadow channel:
``rho_hat = (D + 1) U^dagger |b><b| U - I`` with ``D = d^n``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .clifford import _preimage_table, circuit_from_images, require_odd_prime, sample_clifford_images
from .observables import GGB, Observable, reconstruct
from .quditsim import QuditState, circuit_unitary
from .schemes import EstimationReport, SchemeError, repetition_rngs


@lru_cache(maxsize=None)
def _single_qudit_remap(d: int) -> np.ndarray:
    """Lookup ``[ax, bx, az, bz] -> (az', bz')`` realising the pair rebalancing for n = 1."""
    out = np.zeros((d, d, d, d, 2), dtype=np.int64)
    for ax in range(d):
        for bx in range(d):
            if not (ax or bx):
                continue
            table = _preimage_table(d, ax, bx)
            for az in range(d):
                for bz in range(d):
                    local = (bx * az - ax * bz) % d
                    k = table[local].index((az, bz))
                    out[ax, bx, az, bz] = table[(-1) % d][k]
    out.setflags(write=False)
    return out


def sample_images_batch(n: int, d: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` independent uniform Clifford tableaus, shape (size, 2n, 2n+1).

    Single-qudit draws are vectorised; larger registers fall back to the
    sequential sampler.
    """
    require_odd_prime(d)
    if n != 1:
        return np.stack([sample_clifford_images(n, d, rng) for _ in range(size)])
    vx = rng.integers(1, d * d, size=size)
    ax, bx = vx // d, vx % d
    az, bz = rng.integers(d, size=size), rng.integers(d, size=size)
    z = _single_qudit_remap(d)[ax, bx, az, bz]
    out = np.zeros((size, 2, 3), dtype=np.int64)
    out[:, 0, 0], out[:, 0, 1] = ax, bx
    out[:, 1, 0], out[:, 1, 1] = z[:, 0], z[:, 1]
    out[:, :, 2] = rng.integers(d, size=(size, 2))
    return out


class UnitaryCache:
    """Dense Clifford unitaries keyed by their tableau images."""

    def __init__(self, d: int):
        self.d = d
        self._store: dict[bytes, np.ndarray] = {}

    def __call__(self, images: np.ndarray) -> np.ndarray:
        key = np.ascontiguousarray(images, dtype=np.int64).tobytes()
        u = self._store.get(key)
        if u is None:
            u = circuit_unitary(circuit_from_images(images, self.d))
            self._store[key] = u
        return u


def _draw(state: QuditState, T: int, rng: np.random.Generator, cache: UnitaryCache):
    """Yield (U, outcome counts over basis states) for each distinct sampled Clifford."""
    imgs = sample_images_batch(state.n, state.d, T, rng)
    keys, inv = np.unique(imgs.reshape(T, -1), axis=0, return_inverse=True)
    counts = np.bincount(inv.reshape(-1), minlength=len(keys))
    shape = imgs.shape[1:]
    for key, c in zip(keys, counts):
        u = cache(key.reshape(shape))
        p = np.abs(u @ state.amplitudes) ** 2
        yield u, rng.multinomial(c, p / p.sum())


def _operator(obs, state: QuditState) -> tuple[np.ndarray, float]:
    if isinstance(obs, Observable):
        if obs.kind != GGB or (obs.d, obs.n) != (state.d, state.n):
            raise SchemeError("observable does not match the register")
        # trace comes from the identity coefficient alone
        return reconstruct(obs), obs.identity_coeff * state.dim
    m = np.asarray(obs)
    return m, float(np.real(np.trace(m)))


def shadow_estimate(obs, state: QuditState, T: int, R: int = 1, *, seed: int | None = None,
                    rng: np.random.Generator | None = None) -> EstimationReport:
    """Classical-shadow estimate of ``tr(rho O)``.

    Single shot: ``(D + 1) <b| U O U^dagger |b> - tr(O)``.
    """
    if T < 1 or R < 1:
        raise SchemeError("T and R must be positive")
    require_odd_prime(state.d)
    o, tr_o = _operator(obs, state)
    D = state.dim
    cache = UnitaryCache(state.d)
    ests, sums, sq = [], 0.0, 0.0
    for r in repetition_rngs(R, seed, rng):
        total, total_sq = 0.0, 0.0
        for u, counts in _draw(state, T, r, cache):
            diag = np.real(np.einsum("bi,ij,bj->b", u, o, u.conj()))
            vals = (D + 1) * diag - tr_o
            total += counts @ vals
            total_sq += counts @ vals ** 2
        ests.append(total / T)
        sums += total
        sq += total_sq
    ests = np.array(ests)
    N = T * R
    mean = sums / N
    return EstimationReport(
        mean=float(ests.mean()),
        estimates=ests,
        shot_variance=float(max(sq / N - mean ** 2, 0.0) * N / max(N - 1, 1)),
        rep_std=float(ests.std(ddof=1)) if R > 1 else 0.0,
        T=T,
        R=R,
        seed=seed,
        scheme={"kind": "clifford-shadow", "d": state.d, "n": state.n},
    )


def shadow_density_matrix(state: QuditState, T: int, rng: np.random.Generator) -> np.ndarray:
    """Average of ``T`` inverted snapshots, an unbiased estimate of rho."""
    D = state.dim
    acc = np.zeros((D, D), dtype=complex)
    for u, counts in _draw(state, T, rng, UnitaryCache(state.d)):
        # sum_b c_b U^dagger |b><b| U
        acc += (u.conj().T * counts) @ u
    return (D + 1) * acc / T - np.eye(D)

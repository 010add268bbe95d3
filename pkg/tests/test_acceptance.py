"""End-to-end acceptance checks.

Each ``criterion_N`` returns ``(ok, detail)``. Under pytest every criterion is
one test and the outcomes are summarised after the run; executed as a script,
the module prints one PASS/FAIL line per criterion.
"""

from __future__ import annotations

import csv
import itertools
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from bosonmeter import cli
from bosonmeter.clifford import (
    PauliWord,
    circuit_from_images,
    circuit_tableau,
    random_circuit,
    sample_clifford_images,
)
from bosonmeter.cvapps import estimate_shift_moments, noise_variance_bound, noisy_exact_moments, \
    noise_extra_variance, sample_budget
from bosonmeter.cvsim import (
    GaussianMoments,
    GaussianState,
    NoiseModel,
    apply_shift_channel,
    default_bound,
    equal_squeezed,
    exact_px_expectation,
    gaussian_sampler,
    projected_moment,
    random_gaussian,
    random_px_observable,
    wick_moment,
)
from bosonmeter.observables import (
    GGB,
    Observable,
    VibrationalConfig,
    build_vibrational_hamiltonian,
    decompose_ggb,
    ggb_basis,
    reconstruct,
)
from bosonmeter.quditsim import (
    DenseMoments,
    circuit_unitary,
    exact_expectation,
    ggb_sampler,
    ground_state,
    random_state,
)
from bosonmeter.schemes import CS, L1, OGM, TermTable, estimate, exact_variance, ggb_variance_bound, \
    make_scheme
from bosonmeter.shadows import shadow_density_matrix, shadow_estimate

ROOT = Path(__file__).resolve().parents[1]
SCHEMES = (CS, L1, OGM)


def _random_hermitian(dim, rng):
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return a + a.conj().T


def _random_local_ggb(n, d, k, terms, rng):
    out = []
    for _ in range(terms):
        labels = [0] * n
        for m in rng.choice(n, size=min(k, n), replace=False):
            labels[m] = int(rng.integers(1, d * d))
        out.append((tuple(labels), float(rng.normal())))
    return Observable.from_terms(GGB, n, out, d=d)


def _z_score(rep, exact):
    se = np.sqrt(rep.shot_variance / (rep.T * rep.R))
    return abs(rep.mean - exact) / se if se > 0 else (0.0 if np.isclose(rep.mean, exact) else np.inf)


# --------------------------------------------------------------------------


def criterion_1():
    t0 = time.perf_counter()
    worst_gram = 0.0
    for d in range(2, 9):
        b = ggb_basis(d)[1:]
        gram = np.einsum("aij,bij->ab", b.conj(), b)
        worst_gram = max(worst_gram, np.abs(gram - 2 * np.eye(len(b))).max())
    rng = np.random.default_rng(1)
    worst_rt = 0.0
    cases = [(d, n) for d in (2, 3, 4) for n in (1, 2, 3)]
    for i in range(50):
        d, n = cases[i % len(cases)]
        h = _random_hermitian(d ** n, rng)
        worst_rt = max(worst_rt, np.linalg.norm(reconstruct(decompose_ggb(h, n, d)) - h))
    elapsed = time.perf_counter() - t0
    ok = worst_gram < 1e-12 and worst_rt < 1e-10 and elapsed < 10
    return ok, f"gram err {worst_gram:.1e}, round-trip err {worst_rt:.1e}, {elapsed:.1f}s"


def criterion_2():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    T = 100_000
    worst = 0.0
    for i in range(20):
        n = 1 + i % 3
        st = random_state(3, n, rng)
        if n < 3:
            obs = decompose_ggb(_random_hermitian(3 ** n, rng), n, 3)
        else:
            obs = _random_local_ggb(n, 3, 2, 12, rng)
        rep = estimate(obs, make_scheme(SCHEMES[i % 3], obs), ggb_sampler(st), T, seed=100 + i)
        worst = max(worst, _z_score(rep, exact_expectation(st, obs)))
    worst_q = worst
    worst = 0.0
    for i in range(20):
        n = 1 + i % 4
        st = random_gaussian(n, rng=rng, trace_norm=2 * n, physical=True)
        st = GaussianState(n, rng.normal(scale=0.5, size=2 * n), st.cov)
        obs = random_px_observable(n, 8, 1 + i % 4, rng, k=min(2, n))
        rep = estimate(obs, make_scheme(SCHEMES[i % 3], obs), gaussian_sampler(st), T, seed=200 + i)
        worst = max(worst, _z_score(rep, exact_px_expectation(st, obs)))
    elapsed = time.perf_counter() - t0
    ok = worst_q < 5 and worst < 5 and elapsed < 300
    return ok, f"max |z| qudit {worst_q:.2f}, gaussian {worst:.2f}, {elapsed:.0f}s"


def criterion_3():
    rng = np.random.default_rng(3)
    violations, worst = 0, 0.0
    for i in range(100):
        d, k = (2, 3)[i % 2], 1 + (i // 2) % 2
        n = k + int(rng.integers(0, 2))
        st = random_state(d, n, rng)
        obs = _random_local_ggb(n, d, k, 4, rng)
        rep = estimate(obs, make_scheme(CS, obs), ggb_sampler(st), 2000, seed=300 + i)
        ratio = rep.shot_variance / ggb_variance_bound(obs)
        worst = max(worst, ratio)
        violations += ratio > 1
    return violations == 0, f"{violations} violations, max variance/bound {worst:.3f}"


def criterion_4():
    rng = np.random.default_rng(4)
    violations, worst = 0, 0.0
    for i in range(100):
        n = 1 + i % 3
        st = random_gaussian(n, rng=rng, trace_norm=2 * n, physical=True)
        obs = random_px_observable(n, 5, 1 + (i // 3) % 3, rng, k=min(2, n))
        B = default_bound(st, 3.0)
        rep = estimate(obs, make_scheme(CS, obs), gaussian_sampler(st), 5000, seed=400 + i, bounds=B)
        table = TermTable.from_observable(obs)
        bound = 3 ** obs.locality * B ** (2 * obs.degree) * np.sum(table.coeffs ** 2)
        worst = max(worst, rep.shot_variance / bound)
        violations += rep.shot_variance > bound

    eps_o, delta = 1.0, 0.1
    failures, trials = 0, 0
    for inst in range(4):
        st = equal_squeezed(2, 0.2)
        obs = random_px_observable(2, 3, 2, rng)
        table = TermTable.from_observable(obs)
        B = default_bound(st, 3.0)
        eps_B = max(abs(projected_moment(st, lab, e, B) - wick_moment(st, lab, e))
                    for lab, e in zip(table.labels, table.exponents))
        budget = sample_budget(obs, B, eps_o, delta, eps_B)
        exact = exact_px_expectation(st, obs)
        scheme = make_scheme(CS, obs)
        for t in range(50):
            rep = estimate(obs, scheme, gaussian_sampler(st), budget.N, seed=10_000 * inst + t, bounds=B)
            failures += abs(rep.mean - exact) > budget.total_error
            trials += 1
    rate = failures / trials
    ok = violations == 0 and rate <= delta
    return ok, (f"{violations} variance violations (max ratio {worst:.3f}); "
                f"budget failure rate {rate:.3f} over {trials} trials")


def criterion_5():
    rng = np.random.default_rng(5)
    mismatches, worst_exp, min_p, low_p = 0, 0.0, 1.0, 0
    for i in range(500):
        d, n = (3, 5)[i % 2], 1 + (i // 2) % 3
        circ = random_circuit(n, d, int(rng.integers(1, 51)), rng)
        tab = circuit_tableau(circ)
        psi = circuit_unitary(circ)[:, 0]
        for _ in range(4):
            w = PauliWord(d, tuple(rng.integers(d, size=n)), tuple(rng.integers(d, size=n)),
                          int(rng.integers(d)))
            worst_exp = max(worst_exp, abs(tab.pauli_expectation(w) - np.vdot(psi, w.matrix() @ psi)))
        p = np.abs(psi) ** 2
        q = np.zeros_like(p)
        for key, v in tab.outcome_distribution().items():
            q[np.ravel_multi_index(key, (d,) * n)] = v
        mismatches += np.abs(p - q).max() > 1e-9
        y = tab.sample_outcomes(10_000, rng)
        counts = np.bincount(np.ravel_multi_index(y.T, (d,) * n), minlength=d ** n)
        live = p > 1e-12
        if counts[~live].any():
            mismatches += 1
        elif live.sum() > 1:
            pv = stats.chisquare(counts[live], 10_000 * p[live] / p[live].sum()).pvalue
            min_p = min(min_p, pv)
            low_p += pv <= 1e-3

    roundtrip = 0
    for i in range(1000):
        d, n = (3, 5)[i % 2], 1 + i % 3
        imgs = sample_clifford_images(n, d, rng)
        roundtrip += not np.array_equal(circuit_tableau(circuit_from_images(imgs, d)).rows, imgs)

    group = set()
    for ax, bx, az, bz in itertools.product(range(3), repeat=4):
        if (ax * bz - bx * az) % 3 == 1:
            for cx, cz in itertools.product(range(3), repeat=2):
                group.add((ax, bx, cx, az, bz, cz))
    counts = {g: 0 for g in group}
    outside = 0
    for _ in range(100_000):
        key = tuple(int(v) for v in sample_clifford_images(1, 3, rng).ravel())
        if key in counts:
            counts[key] += 1
        else:
            outside += 1
    uni_p = stats.chisquare(list(counts.values())).pvalue
    ok = (mismatches == 0 and worst_exp < 1e-9 and low_p == 0 and roundtrip == 0
          and outside == 0 and uni_p > 1e-3)
    return ok, (f"dist mismatches {mismatches}, max expectation err {worst_exp:.1e}, "
                f"chi2 min p {min_p:.4f} ({low_p} below 1e-3), round-trip failures {roundtrip}, "
                f"uniformity p {uni_p:.3f} over {len(group)} tableaus")


def criterion_6():
    rng = np.random.default_rng(6)
    st = random_state(3, 1, rng)
    rho = shadow_density_matrix(st, 1_000_000, rng)
    err = np.abs(rho - st.density_matrix()).max()
    st2 = random_state(3, 2, rng)
    observables = [_random_hermitian(9, rng), reconstruct(_random_local_ggb(2, 3, 2, 3, rng))]
    zs = [_z_score(shadow_estimate(o, st2, 10_000, seed=600 + j), exact_expectation(st2, o))
          for j, o in enumerate(observables)]
    ok = err < 0.01 and max(zs) < 5
    return ok, f"max entry error {err:.4f}; n=2 |z| = {', '.join(f'{z:.2f}' for z in zs)}"


def _run_cli(argv, tmp):
    out = Path(tmp) / "out.csv"
    code = cli.main(argv + ["--output", str(out)])
    if code:
        raise RuntimeError(f"estimate {' '.join(argv)} exited with {code}")
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    return rows, json.loads(out.with_suffix(".json").read_text())


def criterion_7():
    t0 = time.perf_counter()
    rs = [0.25, 0.5, 1.0, 1.5]
    with tempfile.TemporaryDirectory() as tmp:
        rows, _ = _run_cli(["cv-tmsv", "--T", "1000", "--R", "100", "--r", *map(str, rs)], tmp)
    elapsed = time.perf_counter() - t0
    parts, ok = [], elapsed < 60
    for r in rs:
        ests = np.array([float(x["estimate"]) for x in rows if float(x["param"]) == r])
        exact = np.sinh(r) ** 2
        dev = abs(ests.mean() - exact) / ests.std(ddof=1)
        ok &= len(ests) == 100 and dev < 3
        parts.append(f"r={r}: {ests.mean():.4f} vs {exact:.4f} ({dev:.2f} sd)")
    return bool(ok), "; ".join(parts) + f"; {elapsed:.0f}s"


def criterion_8():
    with tempfile.TemporaryDirectory() as tmp:
        _, summary = _run_cli(["cv-random", "--n", "10", "--K", "1", "2", "3", "4", "5", "--M", "100",
                               "--T", "1000", "--R", "100", "--seed", "0"], tmp)
    fit = next(e for e in summary["results"] if "fit" in e)
    return fit["r2"] > 0.9, f"R^2 = {fit['r2']:.4f}, slope {fit['slope']:.3f}"


def criterion_9():
    _, errs = cli.paired_comparison([2, 4, 8], 10, [L1, OGM], K=2, M=50, r=0.5, T=1000, R=10, seed=0)
    test = cli.sign_test(errs, OGM, L1)
    med = {s: float(np.median([e["rms_error"] for e in errs if e["scheme"] == s])) for s in (L1, OGM)}
    ok = test["pairs"] >= 30 and test["p_value"] < 0.05 and med[OGM] <= med[L1]
    return ok, (f"ogm wins {test['wins']}/{test['pairs']}, sign-test p {test['p_value']:.2g}, "
                f"median error ogm {med[OGM]:.4f} vs l1 {med[L1]:.4f}")


def criterion_10():
    rng = np.random.default_rng(10)
    T = 100_000
    bias_fail, var_fail, bound_fail, worst_z, worst_vz = 0, 0, 0, 0.0, 0.0
    for i in range(50):
        n = 2 + i % 2
        st = equal_squeezed(n, float(rng.uniform(0.1, 0.5)))
        obs = random_px_observable(n, 4, 1 + i % 2, rng, multilinear=True)
        noise = NoiseModel(float(rng.uniform(0.05, 0.3)))
        scheme = make_scheme(SCHEMES[i % 3], obs)
        rep = estimate(obs, scheme, gaussian_sampler(st, noise), T, seed=1000 + i, keep_shots=True)
        shots = rep.extra["shots"].ravel()
        mean, _ = noisy_exact_moments(st, obs, scheme, noise)
        V_o = exact_variance(obs, scheme, GaussianMoments(st))
        V_e = noise_extra_variance(st, obs, scheme, noise)
        z = abs(shots.mean() - exact_px_expectation(st, obs)) / np.sqrt(shots.var() / T)
        c = shots - shots.mean()
        var_se = np.sqrt((np.mean(c ** 4) - np.mean(c ** 2) ** 2) / T)
        vz = abs(shots.var(ddof=1) - (V_o + V_e)) / var_se
        bound = noise_variance_bound(obs, default_bound(st, 3.0), noise.B_e)
        worst_z, worst_vz = max(worst_z, z), max(worst_vz, vz)
        bias_fail += z > 5 or not np.isclose(mean, exact_px_expectation(st, obs))
        var_fail += vz > 5
        bound_fail += V_e > bound
    ok = bias_fail == var_fail == bound_fail == 0
    return ok, (f"max bias |z| {worst_z:.2f}, max variance |z| {worst_vz:.2f}, "
                f"bound violations {bound_fail} over 50 instances")


def criterion_11():
    cfg = VibrationalConfig.load(ROOT / "configs" / "h2o_like.json")
    d = 3
    h = build_vibrational_hamiltonian(cfg, d)
    st = ground_state(h, d, cfg.n)
    exact = exact_expectation(st, h)
    obs = decompose_ggb(h, cfg.n, d)
    ogm = estimate(obs, make_scheme(OGM, obs), ggb_sampler(st), 10_000, seed=1100)
    shadow = shadow_estimate(h, st, 10_000, seed=1101)
    z = _z_score(ogm, exact)
    ok = z < 5 and ogm.shot_variance < shadow.shot_variance
    return ok, (f"<H> exact {exact:.5f}, ogm {ogm.mean:.5f} (|z| {z:.2f}); "
                f"variance ogm {ogm.shot_variance:.3g} vs shadows {shadow.shot_variance:.3g}")


def criterion_12():
    ref = GaussianState.vacuum(1)
    parts, ok = [], True
    for j, (a0, s) in enumerate([(1.5, 0.0), (0.5, 0.7)]):
        st = apply_shift_channel(ref, a0, s)
        m = estimate_shift_moments(st, ref, 0, 1_000_000, np.random.default_rng(1200 + j))
        dm, dv = abs(m.mean - a0), abs(m.variance - s ** 2)
        ok &= dm < 0.02 and dv < 0.05
        parts.append(f"({a0}, {s}): dE {dm:.4f}, dVar {dv:.4f}")
    return bool(ok), "; ".join(parts)


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 13)}


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_acceptance(number):
    from conftest import ACCEPTANCE

    ok, detail = CRITERIA[number]()
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


if __name__ == "__main__":
    wanted = [int(a) for a in sys.argv[1:]] or sorted(CRITERIA)
    failed = 0
    for number in wanted:
        ok, detail = CRITERIA[number]()
        failed += not ok
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    sys.exit(1 if failed else 0)

import numpy as np
import pytest

from bosonmeter.cvapps import (
    ApplicationError,
    box_sup_bound,
    estimate_purity,
    estimate_shift_moments,
    gaussian_overlap,
    gaussian_purity,
    mixed_variance_bound,
    mixed_variance_bound_split,
    noise_extra_variance,
    noise_variance_bound,
    noisy_exact_moments,
    noisy_variance_check,
    sample_budget,
    separable_estimate,
    shift_moments_from_data,
)
from bosonmeter.cvsim import (
    GaussianState,
    NoiseModel,
    apply_shift_channel,
    equal_squeezed,
    exact_px_expectation,
    random_gaussian,
    random_px_observable,
    tmsv,
)
from bosonmeter.observables import PX, Observable
from bosonmeter.schemes import CS, L1, OGM, make_scheme


def px(n, *terms):
    return Observable.from_terms(PX, n, terms)


X1 = px(1, (((1, 0),), 1.0))


def test_sample_budget_value():
    b = sample_budget(X1, 3.0, 0.1, 0.1)
    assert b.N == 27000
    assert sample_budget(X1, 6.0, 0.1, 0.1).N == 4 * 27000
    assert sample_budget(X1, 3.0, 0.05, 0.1).N == 4 * 27000
    with pytest.raises(ApplicationError):
        sample_budget(X1, 3.0, 0.1, 1.5)


def test_sample_budget_error_term():
    obs = px(2, (((1, 0), (0, 1)), 2.0), (((0, 0), (2, 0)), -1.0))
    b = sample_budget(obs, 2.0, 0.1, 0.1, eps_B=0.01)
    assert b.total_error == pytest.approx(0.1 + 0.01 * 3)
    assert b.variance_bound == pytest.approx(9 * (4 * 16 + 1 * 16))


def test_mixed_bounds():
    assert mixed_variance_bound(1, 1, 2, 1.0, 1.0) == pytest.approx(12.0)
    assert mixed_variance_bound(1, 2, 2, 3.0, 1.0) == pytest.approx(6 * 81)
    assert mixed_variance_bound_split(1, 1, 2, 1.0, 1.0, 1.0) == pytest.approx(8 + 3)
    with pytest.raises(ApplicationError):
        mixed_variance_bound(0, 1, 2, 1.0, 1.0)


def test_noise_extra_variance_single_quadrature():
    nm = NoiseModel(0.2)
    s = GaussianState.vacuum(1)
    sch = make_scheme(L1, X1)
    assert noise_extra_variance(s, X1, sch, nm) == pytest.approx(nm.variance(), rel=1e-9)
    mean, var = noisy_exact_moments(s, X1, sch, nm)
    assert mean == pytest.approx(0.0, abs=1e-12)
    assert var == pytest.approx(1 + nm.variance())
    assert noise_variance_bound(X1, 3.0, nm.B_e) == pytest.approx(1.0)


def test_noisy_check_consistency():
    rng = np.random.default_rng(3)
    s = equal_squeezed(3, 0.3)
    obs = random_px_observable(3, 5, 2, rng, multilinear=True)
    sch = make_scheme(OGM, obs)
    nm = NoiseModel(0.3)
    chk = noisy_variance_check(s, obs, sch, nm, 20_000, 5, seed=1, B=3 * np.exp(0.3))
    assert chk.exact_mean == pytest.approx(exact_px_expectation(s, obs))
    assert chk.exact_variance == pytest.approx(chk.V_o + chk.V_e, rel=0.05)
    assert chk.V_e <= chk.bound
    assert abs(chk.empirical_mean - chk.exact_mean) < 5 * np.sqrt(chk.exact_variance / 1e5)
    assert abs(chk.empirical_variance / chk.exact_variance - 1) < 0.1


def test_separable_vacuum():
    U = px(1, (((0, 2),), 0.5))
    V = px(1, (((2, 0),), 0.5))
    B = 5.0
    rep = separable_estimate(U, V, GaussianState.vacuum(1), 50_000, 4,
                             norm_U=box_sup_bound(U, B), norm_V=box_sup_bound(V, B), B=B, seed=0)
    assert rep.scheme["lambda"] == pytest.approx(0.5)
    assert abs(rep.mean - 1.0) < 5 * np.sqrt(rep.shot_variance / 2e5)
    assert rep.shot_variance <= rep.variance_bound


def test_separable_rejects_mixed_quadratures():
    U = px(1, (((1, 0),), 1.0))
    with pytest.raises(ApplicationError):
        separable_estimate(U, U, GaussianState.vacuum(1), 10, norm_U=1, norm_V=1, B=3)
    with pytest.raises(ApplicationError):
        separable_estimate(px(1, (((0, 1),), 1.0)), U, GaussianState.vacuum(1), 10,
                           norm_U=None, norm_V=1, B=3)


def test_gaussian_overlap_identities():
    s = random_gaussian(2, seed=1, physical=True)
    assert gaussian_overlap(s, s) == pytest.approx(gaussian_purity(s))
    assert gaussian_purity(tmsv(0.8)) == pytest.approx(1.0)
    coh = GaussianState(1, np.array([1.0, 0.0]), np.eye(1 * 2))
    # vacuum variance 1 means x = a + a^dagger, so mean x = 1 is alpha = 1/2
    assert gaussian_overlap(GaussianState.vacuum(1), coh) == pytest.approx(np.exp(-0.25))


@pytest.mark.parametrize("s", [0.1, 0.3])
def test_purity_estimate_tracks_classical_noise(s):
    ref = equal_squeezed(2, 0.3)
    noisy = apply_shift_channel(ref, s=s)
    est = estimate_purity(ref, noisy, 400_000, np.random.default_rng(0))
    assert est.exact_purity == pytest.approx(gaussian_purity(noisy))
    assert est.reference_purity == pytest.approx(1.0)
    assert abs(est.purity - gaussian_overlap(ref, noisy) ** 2) < 0.01


def test_shift_from_synthetic_data():
    rng = np.random.default_rng(0)
    a = rng.normal(0.7, 0.4, 500_000)
    x = a + rng.normal(0, 1, a.size)
    m = shift_moments_from_data(x, [1.0, 0.0, 1.0], 2)
    assert m.mean == pytest.approx(0.7, abs=0.01)
    assert m.variance == pytest.approx(0.16, abs=0.01)


def test_shift_channel_recovery():
    ref = GaussianState.vacuum(2)
    st = apply_shift_channel(ref, a0=1.5, s=0.0, modes=[1])
    m = estimate_shift_moments(st, ref, 1, 200_000, np.random.default_rng(1))
    assert m.mean == pytest.approx(1.5, abs=0.02)
    assert abs(m.variance) < 0.03


def test_shift_order_limit():
    with pytest.raises(ApplicationError):
        shift_moments_from_data(np.zeros(10), [1, 0, 1, 0, 3, 0], 5)


def test_overlap_formula_on_orthogonal_mixture():
    from bosonmeter.cvapps import purity_from_overlap

    rho0 = np.diag([1.0, 0, 0])
    rho1 = np.diag([0, 1.0, 0])
    rho = 0.9 * rho0 + 0.1 * rho1
    est = purity_from_overlap(np.trace(rho0 @ rho), np.trace(rho0 @ rho0))
    assert est == pytest.approx(0.81)
    exact = np.trace(rho @ rho)
    assert exact == pytest.approx(0.82)
    # first-order formula misses p^2 tr(rho1^2)
    assert exact - est == pytest.approx(0.1 ** 2 * np.trace(rho1 @ rho1))

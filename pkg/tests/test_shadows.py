import numpy as np
import pytest

from bosonmeter.clifford import CliffordError, circuit_from_images, circuit_tableau
from bosonmeter.observables import GGB, Observable, decompose_ggb
from bosonmeter.quditsim import QuditState, basis_state, exact_expectation, random_state
from bosonmeter.shadows import sample_images_batch, shadow_density_matrix, shadow_estimate


def test_identity_estimator_is_exactly_one():
    st = random_state(3, 1, np.random.default_rng(0))
    rep = shadow_estimate(np.eye(3), st, 200, seed=1)
    assert np.allclose(rep.estimates, 1.0)


def test_z_plus_zdag_on_zero_state():
    w = np.exp(2j * np.pi / 3)
    z = np.diag([1, w, w ** 2])
    o = z + z.conj().T
    rep = shadow_estimate(o, basis_state(3, 1), 100_000, seed=3)
    assert abs(rep.mean - 2) < 5 * np.sqrt(rep.shot_variance / 1e5)


def test_batch_images_are_valid():
    rng = np.random.default_rng(5)
    imgs = sample_images_batch(1, 5, 300, rng)
    for im in imgs:
        assert np.array_equal(circuit_tableau(circuit_from_images(im, 5)).rows, im)


def test_density_matrix_reconstruction():
    st = random_state(3, 1, np.random.default_rng(8))
    rho = shadow_density_matrix(st, 200_000, np.random.default_rng(9))
    assert np.abs(rho - st.density_matrix()).max() < 0.02
    assert np.isclose(np.trace(rho).real, 1.0)


def test_observable_input_uses_identity_coefficient():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 3))
    obs = decompose_ggb(a + a.T + 4 * np.eye(3), 1, 3)
    st = random_state(3, 1, rng)
    rep = shadow_estimate(obs, st, 50_000, seed=0)
    assert abs(rep.mean - exact_expectation(st, obs)) < 5 * np.sqrt(rep.shot_variance / 5e4)


def test_non_prime_rejected():
    with pytest.raises(CliffordError):
        shadow_estimate(np.eye(4), basis_state(4, 1), 10)

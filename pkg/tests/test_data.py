import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from dmdlab.data import (
    CHECKERBOARD, COMPONENT_LABEL, TWO_MOONS, UNCONDITIONAL, DatasetSpec, default_benchmark, gaussian_mixture,
    mixture_moments, ring_mixture, sample_batch, sample_condition, target_log_density,
)
from dmdlab.errors import ContractViolation, UnsupportedOperation

STD_NORMAL = gaussian_mixture([1.0], [[0.0, 0.0]], [np.eye(2)])


def test_standard_normal_mean():
    n = 100_000
    x, _ = sample_batch(STD_NORMAL, n, np.random.default_rng(0))
    assert np.all(np.abs(x.mean(0)) < 3 / np.sqrt(n))


def test_two_component_label_frequency():
    spec = gaussian_mixture([0.5, 0.5], [[-2, 0], [2, 0]], [np.eye(2), np.eye(2)])
    n = 20_000
    _, cond = sample_batch(spec, n, np.random.default_rng(1))
    assert abs(cond.mean() - 0.5) < 3 * 0.5 / np.sqrt(n)


@pytest.mark.parametrize("spec", [default_benchmark(), DatasetSpec(TWO_MOONS), DatasetSpec(CHECKERBOARD, (), UNCONDITIONAL)])
def test_sampling_is_seeded(spec):
    a = sample_batch(spec, 64, np.random.default_rng(5))
    b = sample_batch(spec, 64, np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_batch_size_positive():
    with pytest.raises(ContractViolation):
        sample_batch(STD_NORMAL, 0, np.random.default_rng(0))


def test_log_density_standard_normal_origin():
    assert target_log_density(STD_NORMAL, np.zeros(2)) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)


def test_ring_is_symmetric():
    spec = default_benchmark()
    x = np.random.default_rng(2).standard_normal((50, 2))
    assert np.allclose(target_log_density(spec, x), target_log_density(spec, -x), rtol=0, atol=1e-12)


@pytest.mark.parametrize("spec", [default_benchmark(), ring_mixture(3, 1.0, 0.5)])
def test_density_integrates_to_one(spec):
    g = np.linspace(-8, 8, 1201)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    dens = np.exp(target_log_density(spec, np.stack([xx.ravel(), yy.ravel()], 1))).reshape(xx.shape)
    total = integrate.trapezoid(integrate.trapezoid(dens, g, axis=1), g)
    assert abs(total - 1.0) < 1e-3


def test_non_mixture_density_unsupported():
    with pytest.raises(UnsupportedOperation):
        target_log_density(DatasetSpec(TWO_MOONS), np.zeros(2))


def test_weights_must_sum_to_one():
    with pytest.raises(ContractViolation):
        gaussian_mixture([0.5, 0.6], [[0, 0], [1, 1]], [np.eye(2), np.eye(2)])
    with pytest.raises(ContractViolation):
        gaussian_mixture([1.0], [[0, 0]], [[[1.0, 2.0], [2.0, 1.0]]])


def test_checkerboard_rejects_labels():
    with pytest.raises(ContractViolation):
        DatasetSpec(CHECKERBOARD, (), COMPONENT_LABEL)


def test_benchmark_is_standardized():
    spec = default_benchmark()
    mu, cov = mixture_moments(spec)
    assert np.allclose(mu, 0, atol=1e-12)
    assert np.trace(cov) / 2 == pytest.approx(1.0, abs=1e-12)
    assert spec.n_conditions == 8


def test_labels_identify_components():
    spec = default_benchmark()
    x, cond = sample_batch(spec, 4000, np.random.default_rng(3))
    nearest = np.argmin(((x[:, None] - spec.means[None]) ** 2).sum(-1), axis=1)
    assert (nearest == cond).mean() > 0.99


def test_sample_condition_shares_label():
    spec = DatasetSpec(TWO_MOONS)
    x = sample_condition(spec, 1, 100, np.random.default_rng(0))
    assert x.shape == (100, 2)
    m = sample_condition(default_benchmark(), 3, 500, np.random.default_rng(0)).mean(0)
    assert np.linalg.norm(m - default_benchmark().means[3]) < 0.05


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.floats(0.5, 5.0), st.floats(0.05, 1.0), st.integers(0, 2**32 - 1))
def test_ring_weights_and_reproducibility(k, radius, std, seed):
    spec = ring_mixture(k, radius, std)
    assert abs(spec.weights.sum() - 1.0) <= 1e-12
    a, _ = sample_batch(spec, 16, np.random.default_rng(seed))
    b, _ = sample_batch(spec, 16, np.random.default_rng(seed))
    assert np.array_equal(a, b)

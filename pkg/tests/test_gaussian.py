import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from kfabstraction.errors import InvalidCovariance, InvalidInterval, SingularObservationBlock
from kfabstraction.gaussian import (
    Gaussian,
    JointGaussian,
    condition,
    interval_probability,
    interval_violation,
    is_pd,
    is_psd,
    sample,
)
from oracles import condition_dense, random_pd

finite = st.floats(-50, 50, allow_nan=False)
positive = st.floats(1e-3, 50)


def test_condition_independent_blocks_returns_prior():
    joint = JointGaussian((("x", 2), ("y", 1)), [1.0, 2.0, 3.0], np.diag([4.0, 5.0, 6.0]))
    g = condition(joint, "y", [10.0])
    assert np.allclose(g.mean, [1, 2]) and np.allclose(g.cov, np.diag([4, 5]))


def test_condition_on_first_observation_of_example1():
    # x(0) ~ N(0, 5 I), y(0) = (x2, x3)
    C = np.array([[0, 1, 0], [0, 0, 1]], dtype=float)
    S = 5 * np.eye(3)
    joint = JointGaussian((("x", 3), ("y", 2)), np.zeros(5),
                          np.block([[S, S @ C.T], [C @ S, C @ S @ C.T]]))
    g = condition(joint, "y", [0.7, -1.3])
    assert np.allclose(g.mean, [0, 0.7, -1.3], atol=1e-14)
    assert np.allclose(g.cov, np.diag([5, 0, 0]), atol=1e-14)


def test_perfect_observation_collapses_variance():
    joint = JointGaussian((("x", 1), ("y", 1)), [0.0, 0.0], [[3.0, 3.0], [3.0, 3.0]])
    g = condition(joint, "y", [2.0])
    assert g.mean[0] == pytest.approx(2.0) and abs(g.cov[0, 0]) <= 1e-14


def test_singular_observation_block():
    joint = JointGaussian((("x", 1), ("y", 2)), np.zeros(3), np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(SingularObservationBlock):
        condition(joint, "y", [0.0, 0.0])


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 3))
def test_condition_matches_dense_inverse(seed, nx, ny):
    rng = np.random.default_rng(seed)
    S = random_pd(rng, nx + ny)
    mu = rng.normal(size=nx + ny)
    y = rng.normal(size=ny)
    g = condition(JointGaussian((("x", nx), ("y", ny)), mu, S), "y", y)
    m, c = condition_dense(mu, S, np.arange(nx, nx + ny), y)
    assert np.allclose(g.mean, m, atol=1e-9) and np.allclose(g.cov, c, atol=1e-9)


@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 3))
def test_law_of_total_variance(seed, nx, ny):
    # Cov x = E Cov(x|y) + Cov E(x|y); the conditional covariance does not depend on y
    rng = np.random.default_rng(seed)
    S = random_pd(rng, nx + ny)
    joint = JointGaussian((("x", nx), ("y", ny)), np.zeros(nx + ny), S)
    post = condition(joint, "y", np.zeros(ny))
    G = S[:nx, nx:] @ np.linalg.inv(S[nx:, nx:])
    total = post.cov + G @ S[nx:, nx:] @ G.T
    assert np.max(np.abs(total - S[:nx, :nx])) <= 1e-10 * (1 + np.max(np.abs(S)))


def test_sample_is_deterministic_per_stream():
    g = Gaussian([1.0, -1.0], [[2.0, 0.5], [0.5, 1.0]])
    a = sample(g, np.random.default_rng(3))
    b = sample(g, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_zero_covariance_samples_the_mean():
    g = Gaussian([1.5, -2.0], np.zeros((2, 2)))
    assert np.array_equal(sample(g, np.random.default_rng(0)), [1.5, -2.0])


def test_zero_variance_coordinate_is_exact():
    g = Gaussian(np.zeros(3), np.diag([0.0, 5.0, 5.0]))
    rng = np.random.default_rng(1)
    assert all(sample(g, rng)[0] == 0.0 for _ in range(200))


def test_empirical_covariance_within_five_standard_errors():
    S = np.array([[2.0, 0.6, 0.0], [0.6, 1.0, -0.3], [0.0, -0.3, 0.5]])
    g = Gaussian(np.zeros(3), S)
    rng = np.random.default_rng(11)
    draws = np.array([sample(g, rng) for _ in range(100_000)])
    emp = np.cov(draws.T)
    # standard error of a sample covariance entry: sqrt((S_ii S_jj + S_ij^2) / N)
    se = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S**2) / draws.shape[0])
    assert np.all(np.abs(emp - S) <= 5 * se)


def test_invalid_covariances_rejected():
    with pytest.raises(InvalidCovariance):
        Gaussian([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(InvalidCovariance):
        Gaussian([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


def test_interval_probability_unbounded_is_one():
    assert interval_probability(3.0, 7.0, -np.inf, np.inf) == 1.0


def test_interval_probability_half_line():
    assert interval_probability(0.0, 1.0, 0.0, np.inf) == pytest.approx(0.5, abs=1e-15)


def test_interval_probability_rejects_reversed_bounds():
    with pytest.raises(InvalidInterval):
        interval_probability(0.0, 1.0, 1.0, -1.0)


@given(finite, positive, finite, st.floats(0, 20), st.floats(0, 5))
def test_interval_probability_monotone_in_width(mean, var, lo, width, extra):
    small = interval_probability(mean, var, lo, lo + width)
    large = interval_probability(mean, var, lo - extra, lo + width + extra)
    assert 0.0 <= small <= large + 1e-15 <= 1.0 + 1e-15


@given(finite, positive, finite, st.floats(0, 20))
def test_interval_probability_complement(mean, var, lo, width):
    hi = lo + width
    p = interval_probability(mean, var, lo, hi)
    assert abs(p + interval_violation(mean, var, lo, hi) - 1.0) <= 1e-14


@given(finite, positive, finite, st.floats(0, 20))
def test_interval_probability_against_scipy(mean, var, lo, width):
    ref = stats.norm(mean, np.sqrt(var))
    hi = lo + width
    assert interval_probability(mean, var, lo, hi) == pytest.approx(ref.cdf(hi) - ref.cdf(lo), abs=1e-12)


def test_interval_violation_keeps_relative_accuracy():
    # tail mass near 1e-6 would lose digits if computed as 1 - P
    v = interval_violation(0.0, 0.05, -1.0, 1.0)
    assert v == pytest.approx(2 * stats.norm.sf(1 / np.sqrt(0.05)), rel=1e-12)


def test_is_psd_examples():
    assert is_psd(np.eye(3))
    assert not is_psd(np.diag([1.0, -0.1]))
    assert is_pd(np.diag([4.0, 3.0, 4.95]))
    assert is_psd(np.diag([0.0, 1.0])) and not is_pd(np.diag([0.0, 1.0]))

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kfabstraction.errors import (
    DimensionMismatch,
    FactorizationMismatch,
    HorizonTooShort,
    InvalidCovariance,
    InvalidInterval,
    NotAReduction,
    OutOfSchedule,
)
from kfabstraction.system import (
    BlackBoxPolicy,
    LinearPolicy,
    LinearStochasticSystem,
    Specification,
    TimeVaryingLinearPolicy,
    attach_observation,
    satisfies,
    simulate,
    zero_policy,
)
from oracles import ex1_arrays, random_system, state_joint

seeds = st.integers(0, 2**32 - 1)


def ex1_system(sigma0=5.0):
    A, B, H, Qw, C1, N1 = ex1_arrays()
    return LinearStochasticSystem.from_arrays(A, B, H, Qw, np.zeros(3), sigma0 * np.eye(3)), C1, N1


def test_rejects_bad_shapes_and_covariances():
    A, B, H, Qw, _, _ = ex1_arrays()
    with pytest.raises(DimensionMismatch):
        LinearStochasticSystem.from_arrays(A[:2], B, H, Qw, np.zeros(3), np.eye(3))
    with pytest.raises(DimensionMismatch):
        LinearStochasticSystem.from_arrays(A, B, H, Qw, np.zeros(2), np.eye(2))
    with pytest.raises(InvalidCovariance):
        LinearStochasticSystem.from_arrays(A, B, H, -Qw, np.zeros(3), np.eye(3))


@given(seeds, st.integers(2, 5), st.integers(1, 2))
def test_output_matrix_as_filter_always_factorizes(seed, n, p):
    rng = np.random.default_rng(seed)
    M, _, _ = random_system(rng, n, min(p, n - 1), p=1)
    H = rng.normal(size=(min(p, n - 1), n))
    M = M.replace(H=H)
    obs = attach_observation(M, H, np.eye(H.shape[0]))
    assert np.array_equal(obs.C, H)


def test_factorization_mismatch():
    M, C1, _ = ex1_system()
    with pytest.raises(FactorizationMismatch):
        attach_observation(M, C1, [[1, 0]])


def test_not_a_reduction():
    M, _, _ = ex1_system()
    with pytest.raises(NotAReduction):
        attach_observation(M, np.eye(3), M.H)
    obs = attach_observation(M, np.eye(3), M.H, require_reduction=False)
    assert obs.q == 3


def test_assumption1_reported_not_enforced():
    A, B, H, Qw, C1, N1 = ex1_arrays()
    M = LinearStochasticSystem.from_arrays(A, B, H, Qw, np.zeros(3), np.diag([5.0, 0.0, 5.0]))
    obs = attach_observation(M, C1, N1)
    assert not obs.assumption1 and "violated" in obs.assumption1_detail
    assert attach_observation(*ex1_system()[0:1], C1, N1).assumption1


@given(seeds, st.integers(1, 4), st.integers(0, 12))
def test_simulate_noise_recovery(seed, n, T):
    rng = np.random.default_rng(seed)
    M, _, _ = random_system(rng, n + 1, n, m=2)
    K = rng.normal(size=(2, n + 1))
    traj = simulate(M, LinearPolicy(K), T, np.random.default_rng(seed))
    for t in range(T):
        w = traj.states[t + 1] - M.A @ traj.states[t] - M.B @ traj.inputs[t]
        scale = 1 + np.abs(M.A @ traj.states[t]).max() + np.abs(M.B @ traj.inputs[t]).max() + np.abs(w).max()
        assert np.max(np.abs(w - traj.noises[t])) <= 8 * np.finfo(float).eps * scale
    assert np.allclose(traj.outputs, traj.states @ M.H.T, rtol=0, atol=0)


def test_simulate_is_deterministic():
    M, _, _ = ex1_system()
    pol = LinearPolicy([[0, -1, 0]])
    a = simulate(M, pol, 20, np.random.default_rng(5))
    b = simulate(M, pol, 20, np.random.default_rng(5))
    assert np.array_equal(a.states, b.states) and np.array_equal(a.inputs, b.inputs)


def test_simulate_without_noise_is_deterministic_dynamics():
    A, B, H, _, _, _ = ex1_arrays()
    M = LinearStochasticSystem.from_arrays(A, B, H, np.zeros((3, 3)), [1.0, 2.0, 3.0], np.zeros((3, 3)))
    traj = simulate(M, zero_policy(1, 3), 3, np.random.default_rng(0))
    assert np.array_equal(traj.states, [[1, 2, 3], [0, 1, 2], [0, 0, 1], [0, 0, 0]])


def test_output_variance_matches_moment_oracle():
    M, _, _ = ex1_system()
    rng = np.random.default_rng(21)
    z2 = np.array([simulate(M, zero_policy(1, 3), 2, rng).outputs[2, 0] for _ in range(40_000)])
    _, cov = state_joint(M.A, M.B, M.Qw, M.mu0, M.Sigma0, np.zeros((2, 1)), 2)
    want = (M.H @ cov[6:9, 6:9] @ M.H.T)[0, 0]  # x1(0) + w2(0) + w3(1): 5 + 1 + 0.05
    assert want == pytest.approx(6.05)
    # variance of the sample variance is 2 sigma^4 / N
    assert abs(z2.var() - want) <= 5 * np.sqrt(2 * want**2 / z2.size)


def test_black_box_policy_sees_history():
    M, _, _ = ex1_system()
    seen = []

    def fn(history):
        seen.append(history.t)
        return [-history.states[-1][1]]

    traj = simulate(M, BlackBoxPolicy(fn, 1), 5, np.random.default_rng(0))
    assert seen == [0, 1, 2, 3, 4]
    assert np.array_equal(traj.inputs[:, 0], -traj.states[:5, 1])


def test_time_varying_policy_out_of_schedule():
    pol = TimeVaryingLinearPolicy([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert np.array_equal(pol(1, np.array([3.0, 4.0])), [4.0])
    with pytest.raises(OutOfSchedule):
        pol(2, np.zeros(2))


def spec_unit(interval=(1, 3)):
    return Specification(interval, [-1.0], [1.0], 0.9)


def test_satisfies_examples():
    spec = spec_unit()
    assert satisfies(spec, [5.0, 0.0, 1.0, -1.0])       # t = 0 is outside the window
    assert not satisfies(spec, [0.0, 0.0, 1.5, 0.0])
    with pytest.raises(HorizonTooShort):
        satisfies(spec, [0.0, 0.0, 0.0])


def test_satisfies_with_per_step_bounds_and_predicate():
    spec = Specification((0, 1), [[0.0], [-2.0]], [[0.0], [2.0]])
    assert satisfies(spec, [0.0, 1.9]) and not satisfies(spec, [0.1, 0.0])
    guarded = Specification((0, 1), [-5.0], [5.0], predicate=lambda z: z[1, 0] > z[0, 0])
    assert satisfies(guarded, [0.0, 1.0]) and not satisfies(guarded, [1.0, 0.0])
    assert not guarded.is_box


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(0, 2))
def test_satisfies_monotone_in_bounds(zs, extra):
    tight = spec_unit()
    loose = Specification((1, 3), [-1.0 - extra], [1.0 + extra])
    assert (not satisfies(tight, zs)) or satisfies(loose, zs)


def test_specification_validation():
    with pytest.raises(InvalidInterval):
        Specification((3, 1), [0.0], [1.0])
    with pytest.raises(InvalidInterval):
        Specification((0, 1), [1.0], [0.0])
    with pytest.raises(DimensionMismatch):
        Specification((0, 2), [[0.0], [0.0]], [[1.0], [1.0]])
    unbounded = Specification((0, 2), [-np.inf], [np.inf])
    assert satisfies(unbounded, [1e300, -1e300, 0.0])

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from spurood.errors import (
    EmptyInputError,
    NonPositiveVarianceError,
    NotSpdError,
    RankDeficientError,
    ShapeMismatchError,
)
from spurood.numerics import (
    Rng,
    gaussian_vector,
    log_sum_exp,
    min_norm_solve,
    sigmoid,
    softmax,
    spd_solve,
    splitmix64,
)


def test_splitmix64_reference_output():
    # first output of the reference generator from state 0
    _, out = splitmix64(0)
    assert out == 0xE220A8397B1DCDAF


def test_rng_same_seed_same_stream():
    a, b = Rng(123), Rng(123)
    assert np.array_equal(a.uniform(100), b.uniform(100))
    assert np.array_equal(a.normal(7), b.normal(7))


def test_rng_child_ignores_parent_draws():
    a, b = Rng(5), Rng(5)
    b.uniform(1000)
    assert np.array_equal(a.child("x").uniform(10), b.child("x").uniform(10))
    assert not np.array_equal(a.child("x").uniform(10), a.child("y").uniform(10))


def test_uniform_in_half_open_unit_interval():
    u = Rng(1).uniform(100_000)
    assert u.min() > 0.0 and u.max() <= 1.0


def test_normal_odd_count_and_shape():
    z = Rng(2).normal((3, 5))
    assert z.shape == (3, 5)
    assert Rng(2).normal(7).shape == (7,)


def test_min_norm_single_row():
    assert np.allclose(min_norm_solve([[2.0, 0.0]], [1.0]), [0.5, 0.0])


def test_min_norm_hand_example():
    x = min_norm_solve([[1, 0, 0], [0, 1, 1]], [1, 2])
    assert np.allclose(x, [1, 1, 1], atol=1e-14)


def test_min_norm_rank_deficient():
    with pytest.raises(RankDeficientError):
        min_norm_solve([[1, 0], [2, 0]], [1, 1])


def test_min_norm_too_many_rows():
    with pytest.raises(ShapeMismatchError):
        min_norm_solve(np.eye(3)[:, :2], [1, 1, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 2**32 - 1))
def test_min_norm_residual_and_minimality(E, extra, seed):
    rng = np.random.default_rng(seed)
    d = E + extra
    A = rng.normal(size=(E, d))
    b = rng.normal(size=E)
    x = min_norm_solve(A, b)
    assert np.max(np.abs(A @ x - b)) <= 1e-9 * (1 + np.abs(b).max())
    if extra:
        # any step along the null space makes the solution longer
        _, _, vt = np.linalg.svd(A)
        null = vt[E:]
        delta = null.T @ rng.normal(size=extra)
        assert np.linalg.norm(x + delta) > np.linalg.norm(x)
    assert np.allclose(x, np.linalg.pinv(A) @ b, atol=1e-9)


def test_spd_solve_examples():
    assert np.allclose(spd_solve(np.eye(2), [3, 4]), [3, 4])
    assert np.allclose(spd_solve(np.diag([2.0, 4.0]), [2, 4]), [1, 1])
    with pytest.raises(NotSpdError):
        spd_solve([[1, 2], [2, 1]], [1, 1])


def test_spd_solve_rejects_asymmetric_and_bad_shapes():
    with pytest.raises(NotSpdError):
        spd_solve([[2, 1], [0, 2]], [1, 1])
    with pytest.raises(ShapeMismatchError):
        spd_solve(np.eye(2), [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_spd_solve_inverts_matmul(d, seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(d, d))
    S = B @ B.T + d * np.eye(d)
    x = rng.normal(size=d)
    assert np.allclose(spd_solve(S, S @ x), x, atol=1e-8)


def test_log_sum_exp_examples():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), abs=1e-12)
    with pytest.raises(EmptyInputError):
        log_sum_exp([])


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=20),
    st.floats(-1e3, 1e3),
)
def test_log_sum_exp_shift(v, c):
    v = np.array(v)
    assert abs(log_sum_exp(v + c) - (log_sum_exp(v) + c)) <= 1e-12 * max(1.0, abs(c))
    assert log_sum_exp(v) == pytest.approx(logsumexp(v), abs=1e-12)


def test_log_sum_exp_axis():
    M = np.random.default_rng(0).normal(size=(4, 3))
    assert np.allclose(log_sum_exp(M, axis=1), logsumexp(M, axis=1))


def test_softmax_and_sigmoid_are_stable():
    p = softmax(np.array([[1000.0, 0.0], [-1000.0, 0.0]]))
    assert np.allclose(p, [[1, 0], [0, 1]])
    assert sigmoid(1000.0) == 1.0 and sigmoid(-1000.0) == 0.0
    assert sigmoid(0.0) == 0.5


def test_gaussian_vector_seeded_and_checks_variance():
    a = gaussian_vector(Rng(7), [0.0, 1.0], 2.0, 50)
    b = gaussian_vector(Rng(7), [0.0, 1.0], 2.0, 50)
    assert np.array_equal(a, b)
    with pytest.raises(NonPositiveVarianceError):
        gaussian_vector(Rng(7), [0.0], 0.0, 3)


def test_gaussian_vector_moments():
    n = 1_000_000
    mean = np.array([0.0, -1.5, 3.0])
    var = 2.0
    z = gaussian_vector(Rng(11), mean, var, n)
    se = math.sqrt(var / n)
    assert np.all(np.abs(z.mean(axis=0) - mean) <= 5 * se)
    # var of the sample variance is 2 sigma^4 / (n - 1)
    var_se = var * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(z.var(axis=0, ddof=1) - var) <= 5 * var_se)


def test_gaussian_vector_standard_clt_bound():
    z = gaussian_vector(Rng(0), np.zeros(2), 1.0, 1_000_000)
    assert np.all(np.abs(z.mean(axis=0)) <= 4 / math.sqrt(1_000_000))

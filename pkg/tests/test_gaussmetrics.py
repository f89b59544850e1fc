import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_difference
from usbpo.exceptions import DataError, UsageError
from usbpo.gaussmetrics import (Categorical, DiagGaussian, FullGaussian, discrete_metric, discrete_wasserstein,
                                line_metric, oracle_suite, random_diag_pair, random_full_gaussian, tvd,
                                w1_w2_quantile, w2_diag, w2_diag_batch, w2_diag_var, w2_empirical_oracle, w2_full,
                                w2_gaussian_coupling_sdp, w2_monte_carlo_oracle, w2_monte_carlo_per_dim)
from usbpo.nncore import autograd as ag


def diag(mean, std):
    return DiagGaussian(np.asarray(mean, float), np.asarray(std, float))


# w2_diag ------------------------------------------------------------------------

def test_w2_diag_identity():
    p = diag([1.0, -2.0], [0.5, 3.0])
    assert w2_diag(p, p) == 0.0


def test_w2_diag_equal_scales_is_mean_distance():
    assert w2_diag(diag([0.0], [1.0]), diag([3.0], [1.0])) == pytest.approx(3.0, abs=1e-15)


def test_w2_diag_two_dim_example_against_quantile_oracle():
    p, q = diag([0.0, 0.0], [1.0, 1.0]), diag([1.0, 1.0], [2.0, 2.0])
    assert w2_diag(p, q) == pytest.approx(2.0, abs=1e-15)
    assert w2_monte_carlo_oracle(p, q, n=100_000, seed=3) == pytest.approx(2.0, rel=0.02)


def test_w2_diag_dimension_mismatch():
    with pytest.raises(UsageError):
        w2_diag(diag([0.0], [1.0]), diag([0.0, 0.0], [1.0, 1.0]))


def test_diag_gaussian_requires_positive_std():
    with pytest.raises(UsageError):
        diag([0.0, 1.0], [1.0, 0.0])


def test_w2_diag_metric_axioms():
    rng = np.random.default_rng(0)
    worst_triangle = -np.inf
    for _ in range(1000):
        d = int(rng.integers(1, 6))
        p, q = random_diag_pair(rng, d)
        r, _ = random_diag_pair(rng, d)
        assert w2_diag(p, q) == w2_diag(q, p)
        assert w2_diag(p, q) > 0.0
        worst_triangle = max(worst_triangle, w2_diag(p, r) - w2_diag(p, q) - w2_diag(q, r))
    assert worst_triangle <= 1e-9


def test_w2_diag_batch_matches_scalar():
    rng = np.random.default_rng(1)
    mp, mq = rng.standard_normal((7, 3)), rng.standard_normal((7, 3))
    sp, sq = np.exp(rng.standard_normal((7, 3))), np.exp(rng.standard_normal((7, 3)))
    batch = w2_diag_batch(mp, sp, mq, sq)
    for i in range(7):
        assert batch[i] == pytest.approx(w2_diag(diag(mp[i], sp[i]), diag(mq[i], sq[i])), abs=1e-14)


def test_w2_diag_var_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    mp, sp, mq, sq = rng.standard_normal(4), np.exp(rng.standard_normal(4)), rng.standard_normal(4), np.exp(rng.standard_normal(4))
    x0 = np.concatenate([mq, sq])
    value, (g,) = ag.grad_of(lambda x: w2_diag_var(mp, sp, x[:4], x[4:]), [x0])
    numeric = central_difference(lambda x: w2_diag(diag(mp, sp), diag(x[:4], x[4:])), x0)
    np.testing.assert_allclose(g, numeric, rtol=1e-6, atol=1e-9)


def test_w2_diag_var_has_zero_gradient_at_coincidence():
    m, s = np.array([0.3, -1.0]), np.array([1.0, 2.0])
    value, (g,) = ag.grad_of(lambda x: w2_diag_var(m, s, x, s), [m.copy()])
    assert value == 0.0
    assert np.all(np.isfinite(g))


# w2_full ------------------------------------------------------------------------

def test_w2_full_on_diagonal_inputs_equals_w2_diag():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p, q = random_diag_pair(rng, int(rng.integers(1, 9)))
        assert abs(w2_full(p.to_full(), q.to_full()) - w2_diag(p, q)) <= 1e-9


def test_w2_full_identity():
    g = random_full_gaussian(np.random.default_rng(4), 3)
    assert w2_full(g, g) == pytest.approx(0.0, abs=1e-7)


def test_w2_full_random_3d_pair_against_sampling_oracle():
    rng = np.random.default_rng(5)
    p, q = random_full_gaussian(rng, 3), random_full_gaussian(rng, 3)
    closed = w2_full(p, q)
    assert w2_empirical_oracle(p, q, n=1000, seed=1) == pytest.approx(closed, rel=0.02)


def test_w2_full_matches_coupling_sdp():
    rng = np.random.default_rng(6)
    for _ in range(3):
        p, q = random_full_gaussian(rng, 3), random_full_gaussian(rng, 3)
        assert w2_gaussian_coupling_sdp(p, q) == pytest.approx(w2_full(p, q), rel=1e-5)


def test_full_gaussian_rejects_bad_covariances():
    with pytest.raises(DataError):
        FullGaussian(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(DataError):
        w2_full(FullGaussian(np.zeros(2), np.diag([1.0, -0.5])), FullGaussian(np.zeros(2), np.eye(2)))


def test_w2_full_clips_tiny_negative_eigenvalues():
    cov = np.diag([1.0, -1e-12])
    assert np.isfinite(w2_full(FullGaussian(np.zeros(2), cov), FullGaussian(np.ones(2), np.eye(2))))


# tvd ------------------------------------------------------------------------------

def test_tvd_examples():
    assert tvd(Categorical([0.3, 0.7]), Categorical([0.3, 0.7])) == 0.0
    assert tvd([1.0, 0.0], [0.0, 1.0]) == 1.0
    p, q = np.array([0.5, 0.5]), np.array([0.75, 0.25])
    assert tvd(p, q) == pytest.approx(0.5 * sum(abs(a - b) for a, b in zip(p, q)), abs=1e-15)
    assert tvd(p, q) == pytest.approx(0.25, abs=1e-15)


@given(st.integers(2, 8), st.integers(0, 2**16))
def test_tvd_range(n, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n) * 0.2)
    assert 0.0 <= tvd(p, q) <= 1.0


def test_tvd_shape_mismatch():
    with pytest.raises(UsageError):
        tvd([0.5, 0.5], [1.0, 0.0, 0.0])


def test_categorical_validation():
    with pytest.raises(UsageError):
        Categorical([0.5, 0.6])


# sampling oracles -----------------------------------------------------------------

def test_monte_carlo_oracle_identical_distributions():
    # independent sorted samples have a noise floor near 1e-2 at n = 1e5; single seeds can exceed it
    p = diag([0.0], [1.0])
    est = np.array([w2_monte_carlo_oracle(p, p, n=100_000, seed=s) for s in range(20)])
    assert np.median(est) < 1e-2
    assert est.max() < 2e-2


def test_monte_carlo_oracle_one_dim_shift():
    assert w2_monte_carlo_oracle(diag([0.0], [1.0]), diag([3.0], [1.0]), n=100_000, seed=1) == pytest.approx(3.0, rel=0.02)


def test_monte_carlo_oracle_is_seeded():
    p, q = diag([0.0], [1.0]), diag([1.0], [0.5])
    assert w2_monte_carlo_oracle(p, q, seed=9) == w2_monte_carlo_oracle(p, q, seed=9)


def test_monte_carlo_oracle_needs_enough_samples():
    with pytest.raises(UsageError):
        w2_monte_carlo_per_dim(diag([0.0], [1.0]), diag([0.0], [1.0]), n=100)


def test_w1_never_exceeds_w2_quantile():
    rng = np.random.default_rng(7)
    for _ in range(50):
        p, q = random_diag_pair(rng, int(rng.integers(1, 6)))
        est = w1_w2_quantile(p, q, n=20_000, seed=int(rng.integers(1 << 30)))
        assert np.all(est["w1_per_dim"] <= est["w2_per_dim"] + 1e-12)
        assert est["coupling_l2_mean"] <= est["w2"] + 1e-12


# finite supports --------------------------------------------------------------------

def test_discrete_metric_w1_equals_tvd():
    rng = np.random.default_rng(8)
    for _ in range(20):
        p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        assert discrete_wasserstein(p, q, discrete_metric(5), 1) == pytest.approx(tvd(p, q), abs=1e-9)


def test_w1_le_w2_on_finite_support():
    rng = np.random.default_rng(9)
    for _ in range(20):
        p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        for ground in (discrete_metric(6), line_metric(6)):
            assert discrete_wasserstein(p, q, ground, 1) <= discrete_wasserstein(p, q, ground, 2) + 1e-9


# oracle suite -------------------------------------------------------------------------

def test_oracle_suite_passes_and_catches_trace_fault():
    checks, lines = oracle_suite(pairs=10, seed=0, full_pairs=1)
    assert all(c.passed for c in checks)
    assert lines and all(line.startswith("pair ") for line in lines)
    faulty, _ = oracle_suite(pairs=3, seed=0, full_pairs=1, trace_sign=-1.0)
    assert not all(c.passed for c in faulty)

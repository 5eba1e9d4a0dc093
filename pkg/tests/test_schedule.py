import numpy as np
import pytest

from dood.schedule import (
    build_linear_schedule,
    forward_diffuse,
    make_rng,
    sample_noise,
)


def test_first_step_values(sched):
    assert sched.alpha_bar[0] == pytest.approx(0.9999, abs=1e-15)
    assert sched.sigma[0] == pytest.approx(0.01, rel=1e-12)


def test_alpha_bar_2_matches_explicit_product(sched):
    # independent oracle: explicit double-precision cumulative product
    beta_1 = 1e-4
    beta_2 = 1e-4 + (0.02 - 1e-4) / 999
    expected = (1.0 - beta_1) * (1.0 - beta_2)
    assert sched.alpha_bar[1] == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(0.99978009, abs=5e-9)


def test_recurrence_and_sigma_identity(sched):
    ratio = sched.alpha_bar[1:] / sched.alpha_bar[:-1]
    assert np.max(np.abs(ratio / sched.alpha[1:] - 1.0)) < 1e-12
    assert np.max(np.abs((sched.sigma**2 + sched.alpha_bar) - 1.0)) < 1e-12


def test_beta_endpoints_and_monotonicity(sched):
    assert sched.beta[0] == 1e-4
    assert sched.beta[-1] == 0.02
    assert (np.diff(sched.beta) >= 0).all()
    assert sched.alpha_bar[0] > sched.alpha_bar[-1]
    assert (np.diff(sched.alpha_bar) < 0).all()


def test_invalid_parameters():
    with pytest.raises(ValueError):
        build_linear_schedule(0)
    with pytest.raises(ValueError):
        build_linear_schedule(10, beta_start=0.0)
    with pytest.raises(ValueError):
        build_linear_schedule(10, beta_start=0.5, beta_end=0.1)
    with pytest.raises(ValueError):
        build_linear_schedule(10, beta_start=0.5, beta_end=1.0)
    one = build_linear_schedule(1, 1e-4, 0.02)
    assert one.beta.shape == (1,)


def test_forward_diffuse_zero_cases(sched, rng):
    x0 = rng.standard_normal(8).astype(np.float32)
    zero = np.zeros(8, dtype=np.float32)
    out = forward_diffuse(x0, 17, zero, sched)
    np.testing.assert_array_equal(out, (np.sqrt(sched.alpha_bar[16]).astype(np.float32) * x0))
    eps = rng.standard_normal(8).astype(np.float32)
    out = forward_diffuse(zero, 17, eps, sched)
    np.testing.assert_array_equal(out, sched.sigma[16].astype(np.float32) * eps)


def test_forward_diffuse_is_affine(sched, rng):
    x1 = rng.standard_normal(6)
    x2 = rng.standard_normal(6)
    e1 = rng.standard_normal(6)
    e2 = rng.standard_normal(6)
    a, b = 0.7, -1.3
    t = 400
    lhs = forward_diffuse(a * x1 + b * x2, t, a * e1 + b * e2, sched)
    rhs = a * forward_diffuse(x1, t, e1, sched) + b * forward_diffuse(x2, t, e2, sched)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_forward_diffuse_batched_and_per_row_t(sched, rng):
    x = rng.standard_normal((5, 3)).astype(np.float32)
    e = rng.standard_normal((5, 3)).astype(np.float32)
    t = np.array([1, 10, 100, 500, 1000])
    out = forward_diffuse(x, t, e, sched)
    for i in range(5):
        np.testing.assert_array_equal(out[i], forward_diffuse(x[i], int(t[i]), e[i], sched))


def test_forward_diffuse_errors(sched):
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 0, np.zeros(3), sched)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 1001, np.zeros(3), sched)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 1, np.zeros(4), sched)


def test_forward_diffuse_monte_carlo_variance(sched):
    # sample variance of x_t over many draws approaches 1 - alpha_bar_t
    n = 100_000
    t = 300
    rng = make_rng(7)
    x0 = rng.standard_normal(4).astype(np.float32)
    eps = rng.standard_normal((n, 4)).astype(np.float32)
    x_t = forward_diffuse(np.tile(x0, (n, 1)), t, eps, sched)
    var = x_t.var(axis=0, ddof=1)
    target = 1.0 - sched.alpha_bar[t - 1]
    se = target * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(var - target) < 3 * se)
    mean_target = np.sqrt(sched.alpha_bar[t - 1]) * x0
    mean_se = np.sqrt(target / n)
    assert np.all(np.abs(x_t.mean(axis=0) - mean_target) < 3 * mean_se)


def test_sample_noise_determinism_and_moments():
    a = sample_noise(16, make_rng(3))
    b = sample_noise(16, make_rng(3))
    np.testing.assert_array_equal(a, b)
    c = sample_noise(16, make_rng(4))
    assert not np.array_equal(a, c)
    big = sample_noise(1, make_rng(5), n=1_000_000).ravel()
    assert abs(big.mean()) < 0.01
    assert 0.99 < big.var() < 1.01
    with pytest.raises(ValueError):
        sample_noise(0, make_rng(0))


def test_make_rng_streams_independent():
    a = make_rng(9, 0).standard_normal(8)
    b = make_rng(9, 1).standard_normal(8)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, make_rng(9, 0).standard_normal(8))

"""Accountant oracles, mechanism identities and budget behaviour."""

import math

import mpmath
import numpy as np
import pytest

from fedcctr.adaldp import (
    STOP,
    PrivacyConfigError,
    PrivacyState,
    adaldp_step,
    add_noise,
    best_order,
    clip_gradient,
    convert_rdp_to_dp,
    decay_sigma,
    gaussian_rdp,
    matched_static_sigma,
    noise_generator,
    rdp_cost,
    rdp_cost_maintext,
    schedule_cost,
)

mpmath.mp.dps = 50


def oracle_cost(zeta, theta, sigma, rho):
    """High-precision direct evaluation of the canonical chain."""
    z, t, s, r = (mpmath.mpf(x) for x in (zeta, theta, sigma, rho))
    eps_gm = 2 * z * t ** 2 / s ** 2
    return float(mpmath.log(1 + r ** 2 * (mpmath.exp((z - 1) * eps_gm) - 1)) / (z - 1))


def oracle_cost_maintext(zeta, theta, sigma, rho):
    z, t, s, r = (mpmath.mpf(x) for x in (zeta, theta, sigma, rho))
    return float(mpmath.log(1 + r ** 2 * (mpmath.exp((z - 1) * t ** 2 / s ** 2) - 1)) / (z - 1))


def grid(n=100, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield (float(rng.uniform(1.05, 8)), float(rng.uniform(0.1, 2)), float(rng.uniform(0.5, 5)),
               float(rng.uniform(0.001, 0.999)))


def simulate_rounds_until_stop(eps0, sigma0, decay, theta, rho, zeta, cap=100000):
    """Scalar budget simulation: count releases before the budget would go non-positive."""
    remaining = mpmath.mpf(eps0)
    for t in range(cap):
        sigma = mpmath.mpf(sigma0) * mpmath.mpf(decay) ** t
        cost = mpmath.log(1 + rho ** 2 * (mpmath.exp((zeta - 1) * 2 * zeta * theta ** 2 / sigma ** 2) - 1)) / (zeta - 1)
        if remaining - cost <= 0:
            return t
        remaining -= cost
    return cap


# ---------------------------------------------------------------------------
# clipping and noise
# ---------------------------------------------------------------------------

def test_clip_examples():
    g = np.array([1.0, 2.0, 2.0])
    out = clip_gradient(g, 1.0)
    np.testing.assert_allclose(out, g / 3, atol=1e-15)
    assert abs(np.linalg.norm(out) - 1.0) < 1e-12
    small = np.array([0.3, 0.4])
    np.testing.assert_array_equal(clip_gradient(small, 1.0), small)
    np.testing.assert_array_equal(clip_gradient(np.zeros(4), 1.0), 0.0)


def test_clip_bound_and_idempotence():
    rng = np.random.default_rng(1)
    for _ in range(200):
        g = rng.standard_normal(10) * rng.uniform(0.01, 10)
        theta = float(rng.uniform(0.1, 3))
        c = clip_gradient(g, theta)
        assert np.linalg.norm(c) <= theta * (1 + 1e-12)
        np.testing.assert_allclose(clip_gradient(c, theta), c, rtol=1e-12)


def test_clip_rejects_bad_threshold():
    with pytest.raises(PrivacyConfigError):
        clip_gradient(np.ones(2), 0.0)


def test_noise_sigma_zero_is_identity():
    g = np.array([1.0, -2.0])
    np.testing.assert_array_equal(add_noise(g, 0.0, np.random.default_rng(0)), g)


def test_noise_statistics():
    n, sigma, g = 100000, 0.7, 1.3
    draws = np.array([add_noise(np.array([g]), sigma, noise_generator(5, 0, t))[0] for t in range(2000)])
    bulk = add_noise(np.full(n, g), sigma, noise_generator(5, 1, 0))
    assert abs(bulk.mean() - g) < 3 * sigma / math.sqrt(n)
    assert abs(bulk.var() / sigma ** 2 - 1) < 0.05
    assert abs(draws.mean() - g) < 3 * sigma / math.sqrt(draws.size)


def test_noise_seeded_determinism():
    a = add_noise(np.zeros(8), 1.0, noise_generator(3, 7, 11))
    b = add_noise(np.zeros(8), 1.0, noise_generator(3, 7, 11))
    c = add_noise(np.zeros(8), 1.0, noise_generator(3, 7, 12))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

def test_decay_examples():
    s = decay_sigma(PrivacyState(sigma_0=2.0, epsilon_0=1.0))
    assert s.sigma_t == pytest.approx(1.994, abs=1e-15)
    flat = PrivacyState(sigma_0=2.0, epsilon_0=1.0, decay=1.0)
    for _ in range(5):
        flat = decay_sigma(flat)
    assert flat.sigma_t == 2.0


def test_decay_closed_form_after_many_steps():
    s = PrivacyState(sigma_0=1.0, epsilon_0=1.0)
    for _ in range(10000):
        s = decay_sigma(s)
    assert abs(s.sigma_t - 0.997 ** 10000) < 1e-12


# ---------------------------------------------------------------------------
# accountant
# ---------------------------------------------------------------------------

def test_rdp_cost_matches_oracle_on_grid():
    for zeta, theta, sigma, rho in grid():
        assert abs(rdp_cost(zeta, theta, sigma, rho) - oracle_cost(zeta, theta, sigma, rho)) < 1e-12
        assert abs(rdp_cost_maintext(zeta, theta, sigma, rho) - oracle_cost_maintext(zeta, theta, sigma, rho)) < 1e-12


def test_rdp_cost_boundaries():
    for zeta, theta, sigma, _ in grid(30, seed=1):
        assert rdp_cost(zeta, theta, sigma, 0.0) == 0.0
        assert rdp_cost_maintext(zeta, theta, sigma, 0.0) == 0.0
        assert rdp_cost(zeta, theta, sigma, 1.0) == gaussian_rdp(zeta, theta, sigma)
        assert rdp_cost(zeta, theta, sigma, 1.0) == pytest.approx(2 * zeta * theta ** 2 / sigma ** 2, rel=1e-15)
        assert rdp_cost_maintext(zeta, theta, sigma, 1.0) == pytest.approx(theta ** 2 / sigma ** 2, rel=1e-15)


def test_rdp_cost_worked_examples():
    assert rdp_cost(2, 0.5, 1, 0.01) == pytest.approx(math.log(1 + 1e-4 * (math.e - 1)), abs=1e-16)
    assert rdp_cost(2, 0.5, 1, 0.01) == pytest.approx(1.71813e-4, rel=1e-5)
    assert rdp_cost_maintext(2, 0.5, 1, 0.01) == pytest.approx(math.log(1 + 1e-4 * (math.exp(0.25) - 1)), abs=1e-16)
    assert rdp_cost_maintext(2, 0.5, 1, 0.01) == pytest.approx(2.84021e-5, rel=1e-5)


def test_maintext_cheaper_than_appendix():
    for zeta, theta, sigma, rho in grid(100, seed=2):
        assert rdp_cost_maintext(zeta, theta, sigma, rho) < rdp_cost(zeta, theta, sigma, rho)


def test_rdp_cost_monotone():
    base = (2.0, 1.0, 2.0, 0.1)
    for i, lo, hi in [(0, 1.5, 3.0), (2, 4.0, 1.5), (3, 0.05, 0.2)]:
        a, b = list(base), list(base)
        a[i], b[i] = lo, hi
        assert rdp_cost(*a) < rdp_cost(*b)


def test_rdp_cost_no_overflow():
    assert math.isfinite(rdp_cost(64, 5.0, 0.01, 0.01))
    assert rdp_cost(64, 5.0, 0.01, 0.01) == pytest.approx(
        float(mpmath.log(1 + mpmath.mpf(0.01) ** 2 * (mpmath.exp(63 * 2 * 64 * 25 / mpmath.mpf(0.01) ** 2) - 1)) / 63),
        rel=1e-12)


def test_rdp_cost_rejects_bad_arguments():
    with pytest.raises(PrivacyConfigError):
        rdp_cost(1.0, 1.0, 1.0, 0.5)
    with pytest.raises(PrivacyConfigError):
        rdp_cost(2.0, 1.0, 0.0, 0.5)
    with pytest.raises(PrivacyConfigError):
        rdp_cost(2.0, 1.0, 1.0, 1.5)


def test_convert_examples():
    assert convert_rdp_to_dp(0.7, 3.0, 1.0) == 0.7
    assert convert_rdp_to_dp(1.0, 2, math.exp(-10)) == 11.0
    assert convert_rdp_to_dp(0.5, 2, 1e-5) == pytest.approx(12.0129, abs=1e-4)


def test_best_order_scans_grid():
    zeta, eps = best_order(1.0, [2.0] * 100, 0.01, 1e-5)
    direct = min(convert_rdp_to_dp(100 * rdp_cost(z, 1.0, 2.0, 0.01), z, 1e-5)
                 for z in (1.5, 2, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24, 32, 48, 64))
    assert eps == pytest.approx(direct, rel=1e-13)
    assert convert_rdp_to_dp(100 * rdp_cost(zeta, 1.0, 2.0, 0.01), zeta, 1e-5) == pytest.approx(eps, rel=1e-13)


def test_matched_static_sigma_spends_equal_budget():
    s = matched_static_sigma(1.0, 0.997, 50, 1.0, 0.05, 2.0)
    assert 0.997 ** 50 < s < 1.0
    total = schedule_cost(1.0, 0.997, 50, 1.0, 0.05, 2.0)
    assert abs(50 * rdp_cost(2.0, 1.0, s, 0.05) - total) < 1e-12 * total
    assert matched_static_sigma(1.0, 1.0, 50, 1.0, 0.05, 2.0) == 1.0


# ---------------------------------------------------------------------------
# stateful step
# ---------------------------------------------------------------------------

def test_step_pass_through():
    g = np.array([3.0, -4.0, 12.0])
    s = PrivacyState(sigma_0=0.0, epsilon_0=math.inf, theta=math.inf)
    out, s2 = adaldp_step(g, s, np.random.default_rng(0))
    np.testing.assert_array_equal(out, g)
    assert not s2.stopped


def test_step_stops_when_budget_short():
    s = PrivacyState(sigma_0=1.0, epsilon_0=1e-6, rho=0.5)
    trace = []
    out, s2 = adaldp_step(np.ones(3), s, np.random.default_rng(0), trace)
    assert out is STOP
    assert s2.stopped and s2.epsilon_remaining == 1e-6 and s2.charged == 0.0
    assert trace[-1].stopped


def test_stop_is_absorbing():
    s = PrivacyState(sigma_0=1.0, epsilon_0=1e-6, rho=0.5)
    _, s = adaldp_step(np.ones(3), s, np.random.default_rng(0))
    for t in range(5):
        out, s = adaldp_step(np.ones(3), s, np.random.default_rng(t))
        assert out is STOP


def test_rounds_until_stop_matches_scalar_simulation():
    s = PrivacyState(sigma_0=1.0, epsilon_0=1.0, zeta=2.0, rho=0.01, theta=0.5, decay=0.997)
    g = np.ones(4)
    released = 0
    while True:
        out, s = adaldp_step(g, s, noise_generator(0, 0, released))
        if out is STOP:
            break
        released += 1
    assert released == simulate_rounds_until_stop(1.0, 1.0, 0.997, 0.5, 0.01, 2.0)
    assert released > 0
    assert abs(s.charged - (1.0 - s.epsilon_remaining)) < 1e-12


def test_budget_conservation_decrement():
    s = PrivacyState(sigma_0=3.0, epsilon_0=5.0, rho=0.1, theta=1.0)
    costs = []
    for t in range(30):
        costs.append(s.round_cost())
        out, s = adaldp_step(np.ones(2), s, noise_generator(1, 0, t))
        assert out is not STOP
    assert abs(sum(costs) - (5.0 - s.epsilon_remaining)) < 1e-12


def test_rdp_convert_mode_compares_converted_epsilon():
    s = PrivacyState(sigma_0=1.0, epsilon_0=12.0, delta=1e-5, rho=0.01, theta=0.5, mode="rdp-convert")
    released = 0
    while released < 10000:
        out, s = adaldp_step(np.ones(2), s, noise_generator(0, 0, released))
        if out is STOP:
            break
        released += 1
    assert s.stopped
    assert convert_rdp_to_dp(s.cumulative_rdp, 2.0, 1e-5) <= 12.0
    nxt = s.cumulative_rdp + s.round_cost()
    assert convert_rdp_to_dp(nxt, 2.0, 1e-5) > 12.0


def test_pre_exhausted_state_starts_stopped():
    assert PrivacyState(sigma_0=1.0, epsilon_0=0.0).stopped


def test_state_validation():
    with pytest.raises(PrivacyConfigError):
        PrivacyState(sigma_0=1.0, epsilon_0=1.0, zeta=1.0)
    with pytest.raises(PrivacyConfigError):
        PrivacyState(sigma_0=1.0, epsilon_0=1.0, mode="bogus")

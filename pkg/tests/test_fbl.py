import math
import time

import numpy as np
import pytest

from cfurllc import fbl
from cfurllc.channel import estimation_stats
from cfurllc.fbl import (FblParams, alpha_limit, fbl_rate, fzf_factors,
                         inv_sinr_limit, lb_rate, lb_sinr_fzf, lb_sinr_mrc,
                         mrc_factors, penalty_factor, q_function, q_inverse,
                         rate_kernel, rate_kernel_inverse, sinr_fzf_from_factors,
                         sinr_mrc_from_factors)
from cfurllc.scenario import SystemConfig

from conftest import random_model, toy_model


def bisect_q(eps):
    """Independent bisection oracle on the Gaussian tail, accurate to 1e-12."""
    lo, hi = 0.0, 60.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if q_function(mid) > eps:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def make_params(eps=1e-5, k=10, blocklength=1000, bandwidth=10e6):
    alpha = q_inverse(eps) / math.sqrt(blocklength * (1 - k / blocklength))
    return FblParams(bandwidth_hz=bandwidth, blocklength=blocklength,
                     num_devices=k, alpha=np.full(k, alpha),
                     inv_sinr_max=np.full(k, inv_sinr_limit(alpha)))


# --------------------------------------------------------------------------
# inverse Gaussian tail
# --------------------------------------------------------------------------

def test_q_inverse_reference_value():
    got = q_inverse(1e-5)
    assert got == pytest.approx(4.2649, abs=1e-4)
    assert got == pytest.approx(bisect_q(1e-5), abs=1e-10)


def test_q_inverse_boundary_and_roundtrip(rng):
    assert q_inverse(0.5) == 0.0
    for _ in range(100):
        eps = float(10 ** rng.uniform(-9, math.log10(0.49)))
        assert q_function(q_inverse(eps)) == pytest.approx(eps, rel=1e-10)


def test_q_inverse_domain():
    for bad in (0.0, -0.1, 0.51, 1.0):
        with pytest.raises(ValueError):
            q_inverse(bad)


# --------------------------------------------------------------------------
# rate kernel and its inverse
# --------------------------------------------------------------------------

def test_kernel_reduces_to_log_without_penalty():
    assert rate_kernel(1.0, 0.0) == pytest.approx(math.log(2.0))


def test_kernel_monotone_and_convex_on_domain(rng):
    for _ in range(100):
        alpha = float(rng.uniform(0.01, 0.4))
        xmax = inv_sinr_limit(alpha)
        a, b = np.sort(rng.uniform(1e-3 * xmax, xmax, size=2))
        if a == b:
            continue
        assert rate_kernel(a, alpha) > rate_kernel(b, alpha)
        mid = rate_kernel(0.5 * (a + b), alpha)
        assert mid <= 0.5 * (rate_kernel(a, alpha) + rate_kernel(b, alpha)) + 1e-12


def test_kernel_zero_at_domain_end():
    alpha = 0.135
    xmax = inv_sinr_limit(alpha)
    assert rate_kernel(xmax, alpha) == pytest.approx(0.0, abs=1e-10)
    assert alpha_limit(xmax) == pytest.approx(alpha, rel=1e-10)


def test_alpha_limit_monotone_decreasing():
    x = np.logspace(-3, 3, 300)
    vals = alpha_limit(x)
    assert np.all(np.diff(vals) < 0)


def test_kernel_inverse_roundtrip(rng):
    for _ in range(100):
        alpha = float(rng.uniform(0.0, 0.4))
        y = float(rng.uniform(0.01, 5.0))
        x = rate_kernel_inverse(y, alpha)
        assert rate_kernel(x, alpha) == pytest.approx(y, rel=1e-9)


def test_kernel_inverse_closed_form_without_penalty():
    y = 0.7
    assert rate_kernel_inverse(y, 0.0) == pytest.approx(1.0 / (math.exp(y) - 1.0),
                                                        rel=1e-12)


def test_kernel_inverse_rejects_unattainable():
    with pytest.raises(fbl.InfeasibleRateError):
        rate_kernel_inverse(-0.5, 0.1)
    with pytest.raises(fbl.InfeasibleRateError):
        rate_kernel_inverse(0.0, 0.1)


def test_checked_kernel_reports_boundary():
    alpha = 0.2
    limit = inv_sinr_limit(alpha)
    assert fbl.rate_kernel_checked(0.5 * limit, alpha) > 0.0
    with pytest.raises(fbl.KernelDomainError) as err:
        fbl.rate_kernel_checked(1.5 * limit, alpha)
    assert err.value.boundary == pytest.approx(limit)


# --------------------------------------------------------------------------
# finite-blocklength rate
# --------------------------------------------------------------------------

def test_rate_without_penalty_is_scaled_shannon():
    params = make_params(eps=0.5)
    gamma = 3.0
    expect = params.bandwidth_hz * (1 - params.eta) * math.log2(1 + gamma)
    assert fbl_rate(gamma, params, 0) == pytest.approx(expect, rel=1e-12)


def test_rate_matches_kernel_identity(rng):
    params = make_params()
    for _ in range(50):
        gamma = float(10 ** rng.uniform(-2, 4))
        via_kernel = params.rate_scale * rate_kernel(1.0 / gamma, params.alpha[0])
        assert fbl_rate(gamma, params, 0) == pytest.approx(via_kernel, rel=1e-12)


def test_rate_penalty_limit_at_high_sinr():
    params = make_params()
    qinv = params.alpha[0] * math.sqrt(params.blocklength * (1 - params.eta))
    gamma = 1e9
    shannon = params.bandwidth_hz * (1 - params.eta) * math.log2(1 + gamma)
    penalty = shannon - fbl_rate(gamma, params, 0)
    expect = params.bandwidth_hz * math.sqrt((1 - params.eta) / params.blocklength) \
        * qinv / math.log(2.0)
    assert penalty == pytest.approx(expect, rel=1e-6)


def test_lb_rate_clamps_to_zero():
    params = make_params()
    assert lb_rate(1e-9, params, 0) == 0.0
    assert lb_rate(5.0, params, 0) > 0.0


# --------------------------------------------------------------------------
# closed-form lower-bound SINRs
# --------------------------------------------------------------------------

def test_mrc_sinr_hand_example():
    # single AP and device: lam = 0.5 requires K*p*b = 1 with b = 1
    model = toy_model(np.array([[1.0]]))
    stats = estimation_stats(model, np.array([1.0]))
    assert stats.lam[0, 0] == pytest.approx(0.5)
    got = lb_sinr_mrc(model, stats, np.array([1.0]), 2, k=0)
    assert got == pytest.approx(0.5)


def test_mrc_sinr_scales_linearly_in_antennas(rng):
    model = random_model(rng)
    stats = estimation_stats(model, rng.uniform(0.5, 2.0, model.num_devices))
    pd = rng.uniform(0.5, 2.0, model.num_devices)
    a = lb_sinr_mrc(model, stats, pd, 4)
    b = lb_sinr_mrc(model, stats, pd, 8)
    assert np.allclose(b, 2 * a, rtol=1e-12)


def test_fzf_sinr_hand_example():
    # one AP, two devices, lam = 0.5, b = 1, N = 4, K = 2, unit payloads
    model = toy_model(np.array([[1.0, 1.0]]))
    stats = estimation_stats(model, np.array([0.5, 0.5]))   # K*p*b = 1
    assert np.allclose(stats.lam, 0.5)
    got = lb_sinr_fzf(model, stats, np.array([1.0, 1.0]), 4, k=0)
    assert got == pytest.approx(0.5)


def test_fzf_sinr_perfect_csi_limit():
    model = toy_model(np.array([[2.0, 1.0], [1.0, 2.0]]))
    stats = estimation_stats(model, np.full(2, 1e12))
    got = lb_sinr_fzf(model, stats, np.array([1.0, 1.0]), 8)
    # residuals vanish, denominator reduces to the service-set size
    expect = [(8 - 2) * np.sqrt(stats.lam[list(model.service_sets[k]), k]).sum() ** 2
              / len(model.service_sets[k]) for k in range(2)]
    assert np.allclose(got, expect, rtol=1e-6)


def test_fzf_sinr_requires_more_antennas_than_devices():
    model = toy_model(np.ones((1, 4)))
    stats = estimation_stats(model, np.ones(4))
    with pytest.raises(ValueError):
        lb_sinr_fzf(model, stats, np.ones(4), 4)


# --------------------------------------------------------------------------
# product-form factors
# --------------------------------------------------------------------------

def test_single_ap_factors_are_the_raw_terms():
    beta = 0.7
    pilot = 1.3
    model = toy_model(np.array([[beta]]))
    factors = mrc_factors(model, np.array([pilot]), 0)
    kp = 1 * pilot
    assert factors.log_gain == pytest.approx(math.log(kp * beta ** 2), rel=1e-12)
    assert factors.log_scale == pytest.approx(math.log(kp * beta + 1.0), rel=1e-12)


def test_factor_identities_match_direct_sinrs(rng):
    # product-form rewrite equals the direct formula on 1000 random draws
    start = time.time()
    worst_mrc = 0.0
    worst_fzf = 0.0
    for _ in range(1000):
        model = random_model(rng)
        k = int(rng.integers(model.num_devices))
        pilot = np.exp(rng.normal(0.0, 1.5, model.num_devices))
        payload = np.exp(rng.normal(0.0, 1.5, model.num_devices))
        stats = estimation_stats(model, pilot)
        n_ant = model.num_devices + int(rng.integers(1, 6))

        direct = lb_sinr_mrc(model, stats, payload, n_ant, k=k)
        via = sinr_mrc_from_factors(mrc_factors(model, pilot, k), payload, n_ant, k)
        worst_mrc = max(worst_mrc, abs(via - direct) / direct)

        direct = lb_sinr_fzf(model, stats, payload, n_ant, k=k)
        via = sinr_fzf_from_factors(fzf_factors(model, pilot, k), payload,
                                    n_ant, model.num_devices, k)
        worst_fzf = max(worst_fzf, abs(via - direct) / direct)
    assert worst_mrc < 1e-10
    assert worst_fzf < 1e-10
    assert time.time() - start < 1.0


def test_factors_reject_nonpositive_pilot():
    model = toy_model(np.array([[1.0]]))
    with pytest.raises(ValueError):
        mrc_factors(model, np.array([0.0]), 0)
    with pytest.raises(ValueError):
        fzf_factors(model, np.array([-1.0]), 0)


def test_penalty_factor_matches_dispersion():
    gamma = np.array([0.3, 1.0, 7.0])
    dispersion = 1.0 - (1.0 + gamma) ** -2
    assert np.allclose(penalty_factor(gamma), np.sqrt(dispersion), rtol=1e-12)


def test_params_from_config():
    cfg = SystemConfig(num_devices=5, antennas_per_ap=12)
    params = FblParams.from_config(cfg)
    assert params.eta == pytest.approx(0.005)
    assert params.alpha.shape == (5,)
    zero = params.with_zero_dispersion()
    assert np.all(zero.alpha == 0) and np.all(np.isinf(zero.inv_sinr_max))

"""Finite-blocklength rate math: dispersion penalty, closed-form SINR lower
bounds for both decoders, and their product-form rewrites used by the GP step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .channel import EstimationStats
from .scenario import LargeScaleModel, SystemConfig

LN2 = math.log(2.0)
_SQRT2 = math.sqrt(2.0)


class InfeasibleRateError(ValueError):
    """Raised when a rate requirement cannot be met at any SINR."""


class KernelDomainError(ValueError):
    """Inverse SINR beyond the point where the rate drops below zero."""

    def __init__(self, message: str, boundary: float):
        super().__init__(message)
        self.boundary = boundary


def q_function(x: float) -> float:
    """Gaussian tail probability."""
    return 0.5 * math.erfc(x / _SQRT2)


def q_inverse(eps: float) -> float:
    """Inverse Gaussian tail, by safeguarded Newton on the complementary CDF.

    Accepts eps in (0, 0.5]; the boundary value 0.5 maps to exactly 0.
    """
    if not 0.0 < eps <= 0.5:
        raise ValueError(f"tail probability must lie in (0, 0.5], got {eps}")
    if eps == 0.5:
        return 0.0
    lo, hi = 0.0, 1.0
    while q_function(hi) > eps:
        hi *= 2.0
        if hi > 1e4:
            raise ValueError("tail probability too small to invert")
    x = 0.5 * (lo + hi)
    for _ in range(200):
        f = q_function(x) - eps
        if abs(f) <= 1e-13 * eps + 1e-300:
            break
        if f > 0:
            lo = x
        else:
            hi = x
        pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        step = f / pdf if pdf > 0 else 0.0
        x_new = x + step
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        x = x_new
    return x


def penalty_factor(x):
    """Square root of the channel dispersion as a function of the SINR."""
    x = np.asarray(x, dtype=float)
    out = np.sqrt(x * (x + 2.0)) / (1.0 + x)
    return float(out) if out.ndim == 0 else out


def rate_kernel(x, alpha: float):
    """Normalized rate as a function of the inverse SINR x.

    Decreasing and convex on (0, inv_sinr_limit(alpha)]; negative beyond it.
    """
    x = np.asarray(x, dtype=float)
    out = np.log1p(1.0 / x) - alpha * np.sqrt(2.0 * x + 1.0) / (x + 1.0)
    return float(out) if out.ndim == 0 else out


def rate_kernel_checked(x: float, alpha: float) -> float:
    """Rate kernel restricted to the region where the rate is non-negative."""
    limit = inv_sinr_limit(alpha)
    if not 0.0 < x <= limit:
        raise KernelDomainError(
            f"inverse SINR {x} outside (0, {limit}]", boundary=limit)
    return float(rate_kernel(x, alpha))


def alpha_limit(x):
    """Largest dispersion coefficient with non-negative rate at inverse SINR x.

    Monotonically decreasing in x; its inverse bounds the kernel's domain.
    """
    x = np.asarray(x, dtype=float)
    out = (x + 1.0) * np.log1p(1.0 / x) / np.sqrt(2.0 * x + 1.0)
    return float(out) if out.ndim == 0 else out


def inv_sinr_limit(alpha: float) -> float:
    """Inverse of alpha_limit: the upper end of the rate kernel's domain."""
    if alpha < 0:
        raise ValueError("dispersion coefficient must be non-negative")
    if alpha == 0.0:
        return math.inf
    lo, hi = 1.0, 1.0
    while alpha_limit(hi) > alpha:
        hi *= 4.0
    while alpha_limit(lo) < alpha:
        lo /= 4.0
        if lo < 1e-300:
            raise ValueError("dispersion coefficient too large")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if alpha_limit(mid) > alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * mid:
            break
    return 0.5 * (lo + hi)


def rate_kernel_inverse(y: float, alpha: float) -> float:
    """Solve rate_kernel(x, alpha) = y for x by bisection (kernel is monotone).

    y must be positive; any positive target is attainable at small enough x.
    """
    if y <= 0:
        raise InfeasibleRateError("rate requirement must be positive")
    hi = inv_sinr_limit(alpha)
    if not math.isfinite(hi):
        # zero dispersion penalty: closed form of the log term
        return 1.0 / math.expm1(y)
    lo = hi
    while rate_kernel(lo, alpha) < y:
        lo /= 4.0
        if lo < 1e-300:
            raise InfeasibleRateError(f"rate target {y} unattainable")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate_kernel(mid, alpha) > y:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * mid:
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class FblParams:
    """Per-device finite-blocklength constants for one system configuration."""

    bandwidth_hz: float
    blocklength: int
    num_devices: int
    alpha: np.ndarray       # (K,) dispersion coefficient per device
    inv_sinr_max: np.ndarray  # (K,) domain end of the rate kernel per device

    @classmethod
    def from_config(cls, config: SystemConfig) -> "FblParams":
        k = config.num_devices
        eta = config.pilot_fraction
        a = q_inverse(config.dep_target) / math.sqrt(config.blocklength * (1.0 - eta))
        alpha = np.full(k, a)
        return cls(bandwidth_hz=config.bandwidth_hz,
                   blocklength=config.blocklength, num_devices=k, alpha=alpha,
                   inv_sinr_max=np.array([inv_sinr_limit(ai) for ai in alpha]))

    @property
    def eta(self) -> float:
        return self.num_devices / self.blocklength

    @property
    def rate_scale(self) -> float:
        """Prefactor turning the rate kernel into bits per second."""
        return self.bandwidth_hz * (1.0 - self.eta) / LN2

    def with_zero_dispersion(self) -> "FblParams":
        """Infinite-blocklength variant: no penalty, unbounded kernel domain."""
        k = self.num_devices
        return replace(self, alpha=np.zeros(k), inv_sinr_max=np.full(k, math.inf))


def fbl_rate(gamma, params: FblParams, k: int):
    """Achievable rate (bits/s) at SINR gamma under the normal approximation.

    May be negative for tiny SINR; per-trial users clamp at zero.
    """
    gamma = np.asarray(gamma, dtype=float)
    eta = params.eta
    qinv = params.alpha[k] * math.sqrt(params.blocklength * (1.0 - eta))
    dispersion = 1.0 - (1.0 + gamma) ** -2
    out = params.bandwidth_hz * (
        (1.0 - eta) * np.log2(1.0 + gamma)
        - np.sqrt((1.0 - eta) * dispersion / params.blocklength) * qinv / LN2
    )
    return float(out) if out.ndim == 0 else out


def lb_rate(gamma_lb, params: FblParams, k: int):
    """Lower-bound rate (bits/s) from a lower-bound SINR, clamped at zero."""
    gamma_lb = np.asarray(gamma_lb, dtype=float)
    x = 1.0 / gamma_lb
    inside = x <= params.inv_sinr_max[k]
    out = np.where(inside,
                   params.rate_scale * rate_kernel(np.where(inside, x, 1.0), params.alpha[k]),
                   0.0)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def weighted_lb_sum_rate(sinr: np.ndarray, weights: np.ndarray, params: FblParams) -> float:
    """Weighted sum of lower-bound rates at the given per-device SINRs."""
    return float(sum(weights[k] * lb_rate(sinr[k], params, k)
                     for k in range(params.num_devices)))


# ---------------------------------------------------------------------------
# Closed-form lower-bound SINRs (statistical-CSI decoders)
# ---------------------------------------------------------------------------

def lb_sinr_mrc(model: LargeScaleModel, stats: EstimationStats,
                payload_power: np.ndarray, n_antennas: int, k: int | None = None):
    """Lower-bound SINR for maximum-ratio combining over each service set."""
    pd = np.asarray(payload_power, dtype=float)
    if np.any(pd <= 0):
        raise ValueError("payload powers must be strictly positive")

    def one(dev: int) -> float:
        idx = list(model.service_sets[dev])
        if not idx:
            raise ValueError(f"device {dev} has an empty service set")
        lam = stats.lam[idx, dev]
        num = n_antennas * pd[dev] * lam.sum() ** 2
        cross = model.beta[idx, :] * lam[:, None]      # (S, K)
        den = float(cross.sum(axis=0) @ pd) + lam.sum()
        return num / den

    if k is not None:
        return one(k)
    return np.array([one(dev) for dev in range(model.num_devices)])


def lb_sinr_fzf(model: LargeScaleModel, stats: EstimationStats,
                payload_power: np.ndarray, n_antennas: int, k: int | None = None):
    """Lower-bound SINR for full-pilot zero-forcing; needs more antennas than devices."""
    kdev = model.num_devices
    if n_antennas <= kdev:
        raise ValueError("zero-forcing needs antennas_per_ap > num_devices")
    pd = np.asarray(payload_power, dtype=float)
    if np.any(pd <= 0):
        raise ValueError("payload powers must be strictly positive")

    def one(dev: int) -> float:
        idx = list(model.service_sets[dev])
        if not idx:
            raise ValueError(f"device {dev} has an empty service set")
        num = pd[dev] * (n_antennas - kdev) * np.sqrt(stats.lam[idx, dev]).sum() ** 2
        resid = stats.err_var[idx, :].sum(axis=0)      # (K,)
        den = len(idx) + float(resid @ pd)
        return num / den

    if k is not None:
        return one(k)
    return np.array([one(dev) for dev in range(model.num_devices)])


# ---------------------------------------------------------------------------
# Product-form rewrites of the same SINRs, kept in the log domain
# ---------------------------------------------------------------------------

def _logsumexp(a: np.ndarray, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m)
    return out


@dataclass(frozen=True)
class MrcFactors:
    """Log-domain pieces of the MRC SINR written over pilot-power products."""

    log_gain: float          # log of the coherent-gain posynomial
    log_scale: float         # log of the product of estimation denominators
    log_cross: np.ndarray    # (K,) log of the per-interferer posynomials
    set_size: int


@dataclass(frozen=True)
class FzfFactors:
    """Log-domain pieces of the zero-forcing SINR over pilot-power products."""

    log_coherent: float      # log of the coherent square-root-gain posynomial
    log_scale: np.ndarray    # (K,) log of the per-device root-product factors
    log_residual: np.ndarray  # (K,) log of the per-device residual posynomials
    set_size: int


def mrc_factors(model: LargeScaleModel, pilot_power: np.ndarray, k: int) -> MrcFactors:
    """Evaluate the product-form MRC factors directly from their defining sums."""
    p = np.asarray(pilot_power, dtype=float)
    if np.any(p <= 0):
        raise ValueError("pilot powers must be strictly positive")
    idx = list(model.service_sets[k])
    b = model.beta[idx, k]
    kp = model.num_devices * p[k]
    logt = np.log1p(kp * b)                              # (S,)
    s = len(idx)
    mask = ~np.eye(s, dtype=bool)
    # per-m sums over the other set members, formed explicitly
    others = (logt[None, :] * mask).sum(axis=1)          # (S,)
    log_scale = float(logt.sum())
    log_gain = float(_logsumexp(np.log(kp * b ** 2) + others))
    cross_beta = model.beta[idx, :]                      # (S, K)
    log_cross = _logsumexp(np.log(kp * b ** 2)[:, None] + np.log(cross_beta)
                           + others[:, None], axis=0)
    return MrcFactors(log_gain=log_gain, log_scale=log_scale,
                      log_cross=np.asarray(log_cross, dtype=float), set_size=s)


def fzf_factors(model: LargeScaleModel, pilot_power: np.ndarray, k: int) -> FzfFactors:
    """Evaluate the product-form zero-forcing factors from their defining sums."""
    p = np.asarray(pilot_power, dtype=float)
    if np.any(p <= 0):
        raise ValueError("pilot powers must be strictly positive")
    idx = list(model.service_sets[k])
    s = len(idx)
    kdev = model.num_devices
    b_own = model.beta[idx, k]
    kp_own = kdev * p[k]
    logt_own = np.log1p(kp_own * b_own)
    mask = ~np.eye(s, dtype=bool)
    others_own = (logt_own[None, :] * mask).sum(axis=1)
    log_coherent = float(_logsumexp(0.5 * np.log(kp_own * b_own ** 2) + 0.5 * others_own))

    beta_all = model.beta[idx, :]                        # (S, K)
    logt_all = np.log1p(kdev * p[None, :] * beta_all)    # (S, K)
    log_scale = 0.5 * logt_all.sum(axis=0)               # (K,)
    others_all = mask.astype(float) @ logt_all           # (S, K) sums over n != m
    log_residual = _logsumexp(np.log(beta_all) + others_all, axis=0)
    return FzfFactors(log_coherent=log_coherent, log_scale=np.asarray(log_scale),
                      log_residual=np.asarray(log_residual), set_size=s)


def sinr_mrc_from_factors(factors: MrcFactors, payload_power: np.ndarray,
                          n_antennas: int, k: int) -> float:
    """Rebuild the MRC SINR from its product-form factors without overflow."""
    pd = np.asarray(payload_power, dtype=float)
    ratio = math.exp(2.0 * (factors.log_gain - factors.log_scale))
    inner = float(pd @ np.exp(factors.log_cross - factors.log_scale)) \
        + math.exp(factors.log_gain - factors.log_scale)
    return n_antennas * pd[k] * ratio / inner


def sinr_fzf_from_factors(factors: FzfFactors, payload_power: np.ndarray,
                          n_antennas: int, num_devices: int, k: int) -> float:
    """Rebuild the zero-forcing SINR from its product-form factors."""
    pd = np.asarray(payload_power, dtype=float)
    num = pd[k] * (n_antennas - num_devices) * math.exp(
        2.0 * (factors.log_coherent - factors.log_scale[k]))
    den = factors.set_size + float(
        pd @ np.exp(factors.log_residual - 2.0 * factors.log_scale))
    return num / den

"""Small-scale channel realizations and MMSE channel-estimation statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import LargeScaleModel


@dataclass(frozen=True)
class EstimationStats:
    """Per-link second-order statistics of the MMSE channel estimate."""

    lam: np.ndarray         # (M, K) per-antenna variance of the estimate
    err_var: np.ndarray     # (M, K) per-antenna variance of the estimation error
    pilot_power: np.ndarray  # (K,) pilot powers the statistics were computed for


def estimation_stats(model: LargeScaleModel, pilot_power: np.ndarray) -> EstimationStats:
    """Estimate variance per link for orthogonal pilots of length num_devices.

    For gain b and pilot power p the estimate variance is K*p*b^2 / (K*p*b + 1);
    the error variance is the complement b - lam.
    """
    p = np.asarray(pilot_power, dtype=float)
    if p.ndim == 0:
        p = np.full(model.num_devices, float(p))
    if p.shape != (model.num_devices,):
        raise ValueError("pilot_power must be scalar or one value per device")
    if np.any(p <= 0):
        raise ValueError("pilot powers must be strictly positive")
    kp = model.num_devices * p[None, :]
    lam = kp * model.beta ** 2 / (kp * model.beta + 1.0)
    return EstimationStats(lam=lam, err_var=model.beta - lam, pilot_power=p)


def substream(master_seed: int, *indices: int) -> np.random.Generator:
    """Counter-based substream keyed by (master_seed, indices).

    Streams are independent for distinct keys, so trials and deployments can
    be drawn in any order, or in parallel, without changing the results.
    """
    mixed = np.uint64(0)
    for idx in indices:
        mixed = np.uint64(mixed * np.uint64(0x9E3779B97F4A7C15) + np.uint64(idx) + np.uint64(1))
    key = np.array([np.uint64(master_seed), mixed], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ChannelRealization:
    """True channel, its MMSE estimate and the estimation error for one trial block.

    Arrays have shape (T, M, K, N): trials, APs, devices, antennas per AP.
    """

    g: np.ndarray
    g_hat: np.ndarray
    g_tilde: np.ndarray


def _crandn(rng: np.random.Generator, shape) -> np.ndarray:
    # unit-variance circularly-symmetric complex Gaussian
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) / np.sqrt(2.0)


def draw_channel(model: LargeScaleModel, stats: EstimationStats, n_antennas: int,
                 seed_or_rng, trials: int = 1) -> ChannelRealization:
    """Draw channels and run pilot-based MMSE estimation for a block of trials.

    The pilot observation is the true channel plus noise of per-antenna
    variance 1/(K*p); the estimate scales it by K*p*b/(K*p*b + 1). Draw order
    is fixed (channel, then pilot noise) so results are reproducible.
    """
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else substream(int(seed_or_rng)))
    m, k = model.beta.shape
    shape = (trials, m, k, n_antennas)
    g = np.sqrt(model.beta)[None, :, :, None] * _crandn(rng, shape)
    kp = model.num_devices * stats.pilot_power
    pilot_noise = _crandn(rng, shape) / np.sqrt(kp)[None, None, :, None]
    gain = (kp[None, :] * model.beta / (kp[None, :] * model.beta + 1.0))
    g_hat = gain[None, :, :, None] * (g + pilot_noise)
    return ChannelRealization(g=g, g_hat=g_hat, g_tilde=g - g_hat)

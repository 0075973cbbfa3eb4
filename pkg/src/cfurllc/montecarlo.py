"""Link-level simulation of both decoders.

Each trial draws channels, runs pilot estimation, decodes with the
statistical-CSI receiver and records the squared magnitudes of the desired,
leaked, interference and noise terms, from which instantaneous SINRs and
finite-blocklength rates follow. Trials use counter-based substreams keyed by
trial index, so results do not depend on evaluation order or batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fbl
from .channel import (ChannelRealization, EstimationStats, draw_channel,
                      estimation_stats, substream)
from .scenario import LargeScaleModel

TRIAL_BLOCK = 256

ANALYTIC = "analytic"
PER_REALIZATION = "per_realization"


@dataclass
class TrialOutcome:
    """Per-trial decoder statistics for every device.

    ds2 is deterministic under analytic normalization; the other terms are
    one sample per trial. sinr and rate follow the instantaneous decomposition
    with the rate clamped at zero.
    """

    ds2: np.ndarray      # (K,) or (T, K) for per-realization normalization
    ls2: np.ndarray      # (T, K)
    ui2: np.ndarray      # (T, K, K), entry [t, k, j] = interference from j at k
    n2: np.ndarray       # (T, K)
    sinr: np.ndarray     # (T, K)
    rate: np.ndarray     # (T, K)

    @property
    def trials(self) -> int:
        return self.ls2.shape[0]


def _finish_outcome(ds2, ls2, ui2, n2, params: fbl.FblParams) -> TrialOutcome:
    kdev = ls2.shape[1]
    interference = ui2.sum(axis=2)      # own-device slot is kept at zero
    sinr = ds2 / (ls2 + interference + n2)
    rate = np.empty_like(sinr)
    for k in range(kdev):
        rate[:, k] = np.maximum(fbl.fbl_rate(sinr[:, k], params, k), 0.0)
    return TrialOutcome(ds2=ds2, ls2=ls2, ui2=ui2, n2=n2, sinr=sinr, rate=rate)


def decode_mrc(real: ChannelRealization, noise: np.ndarray, model: LargeScaleModel,
               stats: EstimationStats, payload_power: np.ndarray,
               n_antennas: int, params: fbl.FblParams) -> TrialOutcome:
    """Maximum-ratio combining with the mean coherent gain as the signal term."""
    trials, _, kdev, _ = real.g.shape
    pd = np.asarray(payload_power, dtype=float)
    ds2 = np.empty(kdev)
    ls2 = np.empty((trials, kdev))
    ui2 = np.empty((trials, kdev, kdev))
    n2 = np.empty((trials, kdev))
    for k in range(kdev):
        idx = list(model.service_sets[k])
        a = real.g_hat[:, idx, k, :]
        mean_gain = n_antennas * stats.lam[idx, k].sum()
        proj = np.einsum("tsn,tsjn->tj", a.conj(), real.g[:, idx, :, :])
        ds2[k] = pd[k] * mean_gain ** 2
        ls2[:, k] = pd[k] * np.abs(proj[:, k] - mean_gain) ** 2
        ui2[:, k, :] = pd[None, :] * np.abs(proj) ** 2
        ui2[:, k, k] = 0.0
        nz = np.einsum("tsn,tsn->t", a.conj(), noise[:, idx, :])
        n2[:, k] = np.abs(nz) ** 2
    return _finish_outcome(ds2, ls2, ui2, n2, params)


def _fzf_vectors(g_hat: np.ndarray) -> np.ndarray:
    """Unnormalized zero-forcing vectors per AP: G (G^H G)^-1, batched."""
    gh = np.swapaxes(g_hat, 2, 3)                       # (T, M, N, K)
    gram = np.einsum("tmnk,tmnj->tmkj", gh.conj(), gh)
    return np.einsum("tmnk,tmkj->tmnj", gh, np.linalg.inv(gram))


def decode_fzf(real: ChannelRealization, noise: np.ndarray, model: LargeScaleModel,
               stats: EstimationStats, payload_power: np.ndarray,
               n_antennas: int, params: fbl.FblParams,
               normalization: str = ANALYTIC) -> TrialOutcome:
    """Full-pilot zero-forcing; needs more antennas than devices.

    The default scales each vector by the closed-form root-mean gain; the
    per-realization alternative normalizes each drawn vector to unit norm and
    estimates the coherent gain from the sample mean.
    """
    trials, _, kdev, _ = real.g.shape
    if n_antennas <= kdev:
        raise ValueError("zero-forcing needs antennas_per_ap > num_devices")
    pd = np.asarray(payload_power, dtype=float)
    vectors = _fzf_vectors(real.g_hat)                   # (T, M, N, K)
    if normalization == PER_REALIZATION:
        norms = np.linalg.norm(vectors, axis=2, keepdims=True)
        vectors = vectors / norms
    elif normalization != ANALYTIC:
        raise ValueError(f"unknown normalization {normalization!r}")

    ds2 = np.empty((trials, kdev)) if normalization == PER_REALIZATION else np.empty(kdev)
    ls2 = np.empty((trials, kdev))
    ui2 = np.empty((trials, kdev, kdev))
    n2 = np.empty((trials, kdev))
    for k in range(kdev):
        idx = list(model.service_sets[k])
        a = np.swapaxes(vectors[:, idx, :, k:k + 1], 2, 3)[:, :, 0, :]  # (T, S, N)
        if normalization == ANALYTIC:
            scale = np.sqrt((n_antennas - kdev) * stats.lam[idx, k])
            a = a * scale[None, :, None]
            mean_gain = scale.sum()
        proj = np.einsum("tsn,tsjn->tj", a.conj(), real.g[:, idx, :, :])
        if normalization == PER_REALIZATION:
            coh = proj[:, k].real.mean()
            ds2[:, k] = pd[k] * coh ** 2
            ls2[:, k] = pd[k] * np.abs(proj[:, k] - coh) ** 2
        else:
            ds2[k] = pd[k] * mean_gain ** 2
            ls2[:, k] = pd[k] * np.abs(proj[:, k] - mean_gain) ** 2
        ui2[:, k, :] = pd[None, :] * np.abs(proj) ** 2
        ui2[:, k, k] = 0.0
        nz = np.einsum("tsn,tsn->t", a.conj(), noise[:, idx, :])
        n2[:, k] = np.abs(nz) ** 2
    return _finish_outcome(ds2, ls2, ui2, n2, params)


def _draw_trial(model, stats, n_antennas, seed, index, attempt=0):
    rng = substream(seed, index) if attempt == 0 else substream(seed, index, attempt)
    real = draw_channel(model, stats, n_antennas, rng, trials=1)
    m = model.num_aps
    re = rng.standard_normal((m, n_antennas))
    im = rng.standard_normal((m, n_antennas))
    return real, (re + 1j * im) / np.sqrt(2.0)


def simulate(model: LargeScaleModel, stats: EstimationStats,
             payload_power: np.ndarray, decoder: str, trials: int, seed: int,
             n_antennas: int, params: fbl.FblParams,
             normalization: str = ANALYTIC) -> TrialOutcome:
    """Run `trials` independent channel draws and concatenate the outcomes.

    A rank-deficient estimated channel matrix (probability zero, but possible
    at degenerate inputs) is redrawn up to three times before the trial is
    abandoned with an error.
    """
    outcomes = []
    m = model.num_aps
    kdev = model.num_devices
    for start in range(0, trials, TRIAL_BLOCK):
        count = min(TRIAL_BLOCK, trials - start)
        g = np.empty((count, m, kdev, n_antennas), dtype=complex)
        g_hat = np.empty_like(g)
        noise = np.empty((count, m, n_antennas), dtype=complex)
        for j in range(count):
            real, nz = _draw_trial(model, stats, n_antennas, seed, start + j)
            g[j] = real.g[0]
            g_hat[j] = real.g_hat[0]
            noise[j] = nz
        if decoder != "mrc":
            ranks = np.linalg.matrix_rank(np.swapaxes(g_hat, 2, 3))
            for j in np.flatnonzero((ranks < kdev).any(axis=1)):
                for attempt in range(1, 4):
                    real, nz = _draw_trial(model, stats, n_antennas, seed,
                                           start + int(j), attempt)
                    if np.all(np.linalg.matrix_rank(
                            np.swapaxes(real.g_hat, 2, 3)) == kdev):
                        g[j], g_hat[j], noise[j] = real.g[0], real.g_hat[0], nz
                        break
                else:
                    raise RuntimeError(
                        f"trial {start + int(j)}: estimated channel "
                        "rank-deficient after 3 redraws")
        block = ChannelRealization(g=g, g_hat=g_hat, g_tilde=g - g_hat)
        if decoder == "mrc":
            outcomes.append(decode_mrc(block, noise, model, stats, payload_power,
                                       n_antennas, params))
        else:
            outcomes.append(decode_fzf(block, noise, model, stats, payload_power,
                                       n_antennas, params, normalization))
    first = outcomes[0]
    ds2 = (np.concatenate([o.ds2 for o in outcomes])
           if first.ds2.ndim == 2 else first.ds2)
    return TrialOutcome(
        ds2=ds2,
        ls2=np.concatenate([o.ls2 for o in outcomes]),
        ui2=np.concatenate([o.ui2 for o in outcomes]),
        n2=np.concatenate([o.n2 for o in outcomes]),
        sinr=np.concatenate([o.sinr for o in outcomes]),
        rate=np.concatenate([o.rate for o in outcomes]),
    )


def ergodic_rate(model: LargeScaleModel, stats: EstimationStats,
                 payload_power: np.ndarray, decoder: str, trials: int, seed: int,
                 n_antennas: int, params: fbl.FblParams,
                 normalization: str = ANALYTIC) -> tuple[np.ndarray, np.ndarray]:
    """Per-device mean rate and normal-approximation 95% confidence half-width."""
    if trials < 100:
        raise ValueError("need at least 100 trials for a meaningful estimate")
    out = simulate(model, stats, payload_power, decoder, trials, seed,
                   n_antennas, params, normalization)
    mean = out.rate.mean(axis=0)
    half = 1.96 * out.rate.std(axis=0, ddof=1) / np.sqrt(out.trials)
    return mean, half


@dataclass(frozen=True)
class RateReport:
    """Closed-form bounds next to their simulated counterparts, per device."""

    lb_sinr: np.ndarray
    lb_rate: np.ndarray
    ergodic_rate: np.ndarray
    ci_half_width: np.ndarray
    meets_requirement: np.ndarray    # bool, lower-bound rate vs requirement


def rate_report(model: LargeScaleModel, pilot_power: np.ndarray,
                payload_power: np.ndarray, decoder: str, trials: int, seed: int,
                n_antennas: int, params: fbl.FblParams,
                rate_req_bps: float = 0.0) -> RateReport:
    """Evaluate one allocation both ways: closed-form bound and simulation."""
    stats = estimation_stats(model, pilot_power)
    if decoder == "mrc":
        sinr = fbl.lb_sinr_mrc(model, stats, payload_power, n_antennas)
    else:
        sinr = fbl.lb_sinr_fzf(model, stats, payload_power, n_antennas)
    lb = np.array([fbl.lb_rate(sinr[k], params, k)
                   for k in range(model.num_devices)])
    mean, ci = ergodic_rate(model, stats, payload_power, decoder, trials, seed,
                            n_antennas, params)
    return RateReport(lb_sinr=sinr, lb_rate=lb, ergodic_rate=mean,
                      ci_half_width=ci,
                      meets_requirement=lb >= rate_req_bps * (1 - 1e-9))


# ---------------------------------------------------------------------------
# Closed-form expectations of every decoder term, for validation
# ---------------------------------------------------------------------------

def expected_terms_mrc(model: LargeScaleModel, stats: EstimationStats,
                       payload_power: np.ndarray, n_antennas: int) -> dict:
    """Analytic means of |DS|^2, |LS|^2, |UI|^2 and |N|^2 for the MRC decoder.

    The interference splits into a channel part and a pilot-noise part whose
    scale carries the estimating device's own pilot power.
    """
    kdev = model.num_devices
    pd = np.asarray(payload_power, dtype=float)
    ds2 = np.empty(kdev)
    ls2 = np.empty(kdev)
    ui2 = np.zeros((kdev, kdev))
    n2 = np.empty(kdev)
    for k in range(kdev):
        idx = list(model.service_sets[k])
        lam = stats.lam[idx, k]
        beta = model.beta[idx, k]
        ds2[k] = n_antennas ** 2 * pd[k] * lam.sum() ** 2
        ls2[k] = n_antennas * pd[k] * float((lam * beta).sum())
        kp_own = kdev * stats.pilot_power[k]
        for j in range(kdev):
            if j == k:
                continue
            cross = model.beta[idx, j]
            channel_part = n_antennas * float((lam ** 2 * cross / beta).sum())
            pilot_part = n_antennas / kp_own * float(((lam / beta) ** 2 * cross).sum())
            ui2[k, j] = pd[j] * (channel_part + pilot_part)
        n2[k] = n_antennas * lam.sum()
    return {"ds2": ds2, "ls2": ls2, "ui2": ui2, "n2": n2}


def expected_terms_fzf(model: LargeScaleModel, stats: EstimationStats,
                       payload_power: np.ndarray, n_antennas: int) -> dict:
    """Analytic means of the decoder terms for zero-forcing."""
    kdev = model.num_devices
    pd = np.asarray(payload_power, dtype=float)
    ds2 = np.empty(kdev)
    ls2 = np.empty(kdev)
    ui2 = np.zeros((kdev, kdev))
    n2 = np.empty(kdev)
    for k in range(kdev):
        idx = list(model.service_sets[k])
        ds2[k] = pd[k] * (n_antennas - kdev) * np.sqrt(stats.lam[idx, k]).sum() ** 2
        ls2[k] = pd[k] * float(stats.err_var[idx, k].sum())
        for j in range(kdev):
            if j != k:
                ui2[k, j] = pd[j] * float(stats.err_var[idx, j].sum())
        n2[k] = float(len(idx))
    return {"ds2": ds2, "ls2": ls2, "ui2": ui2, "n2": n2}

"""Split R-hat and effective sample size for ``[N, C, ...]`` sample arrays.

Both work on split chains: every chain is cut into a first and second half
(the last draw is dropped when ``N`` is odd), giving ``M = 2C`` sequences of
length ``n = N // 2``. All event elements are handled at once.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from batchmc.errors import ShapeError

__all__ = [
    "DiagnosticsReport",
    "diagnostics_report",
    "effective_sample_size",
    "potential_scale_reduction",
    "split_chains",
]

SUPER_EFFICIENCY_FACTOR = 1.25


class RHatResult(NamedTuple):
    r_hat: np.ndarray
    degenerate: np.ndarray


class EssResult(NamedTuple):
    ess: np.ndarray
    degenerate: np.ndarray


class DiagnosticsReport(NamedTuple):
    r_hat: np.ndarray
    ess: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    degenerate: np.ndarray
    super_efficient: np.ndarray
    num_draws: int
    num_chains: int


def split_chains(samples) -> np.ndarray:
    """``[N, C, ...] -> [N // 2, 2C, ...]``; the first C columns are first halves."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"samples need shape [N, C, ...], got {x.shape}")
    n = x.shape[0] // 2
    if n < 2:
        raise ShapeError(f"need at least 4 draws per chain, got {x.shape[0]}")
    return np.concatenate([x[:n], x[n:2 * n]], axis=1)


def _within_between(seqs):
    n = seqs.shape[0]
    within = np.mean(np.var(seqs, axis=0, ddof=1), axis=0)
    between = n * np.var(np.mean(seqs, axis=0), axis=0, ddof=1)
    return within, between


def potential_scale_reduction(samples) -> RHatResult:
    """Split R-hat per event element.

    ``W`` is the mean within-sequence variance (divisor ``n - 1``) and
    ``B / n`` the variance of the sequence means (divisor ``M - 1``);
    ``r_hat = sqrt(((n - 1) / n * W + B / n) / W)``. Elements with ``W == 0``
    get ``inf`` and are flagged as degenerate.
    """
    seqs = split_chains(samples)
    n = seqs.shape[0]
    within, between = _within_between(seqs)
    degenerate = ~(within > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r_hat = np.sqrt(((n - 1) / n * within + between / n) / within)
    return RHatResult(np.where(degenerate, np.inf, r_hat), degenerate)


def _autocovariance(seqs):
    """Biased autocovariance along axis 0 for every sequence, via FFT."""
    n = seqs.shape[0]
    centered = seqs - seqs.mean(axis=0)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    spectrum = np.fft.rfft(centered, n=size, axis=0)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), n=size, axis=0)[:n]
    return acov / n


def _geyer_tau(rho: np.ndarray) -> float:
    """Integrated autocorrelation time with Geyer's truncation rules.

    ``rho`` holds the pooled autocorrelations at lags 0..n-1. Pair sums
    ``rho[2k] + rho[2k+1]`` are accumulated while positive and forced to be
    non-increasing.
    """
    n = rho.shape[0]
    kept = np.zeros(n)
    kept[0] = 1.0
    even, odd = 1.0, rho[1]
    kept[1] = odd
    t = 1
    while t < n - 3 and even + odd > 0.0:
        even, odd = rho[t + 1], rho[t + 2]
        if even + odd >= 0.0:
            kept[t + 1], kept[t + 2] = even, odd
        t += 2
    max_t = t - 2
    if even > 0:
        kept[max_t + 1] = even
    t = 1
    while t <= max_t - 2:
        if kept[t + 1] + kept[t + 2] > kept[t - 1] + kept[t]:
            kept[t + 1] = kept[t + 2] = (kept[t - 1] + kept[t]) / 2.0
        t += 2
    return -1.0 + 2.0 * np.sum(kept[: max_t + 1]) + np.sum(kept[max_t + 1: max_t + 2])


def effective_sample_size(samples) -> EssResult:
    """Multi-chain ESS per event element.

    Autocorrelations are pooled across split sequences as
    ``rho_t = 1 - (W - mean_m acov_m(t)) / var_plus`` with
    ``var_plus = (n - 1) / n * W + B / n``. ``ess = M * n / tau`` where
    ``tau`` follows Geyer's initial positive, monotone sequence, floored
    at ``1 / log10(M * n)`` so anti-correlated chains stay finite (they are
    super-efficient and may exceed ``M * n``).
    """
    seqs = split_chains(samples)
    n, m = seqs.shape[:2]
    event_shape = seqs.shape[2:]
    flat = seqs.reshape(n, m, -1)
    within, between = _within_between(flat)
    var_plus = (n - 1) / n * within + between / n
    mean_acov = _autocovariance(flat).mean(axis=1)  # [n, E]
    total = n * m
    ess = np.zeros(flat.shape[2])
    degenerate = ~(within > 0)
    for e in np.flatnonzero(~degenerate):
        rho = 1.0 - (within[e] - mean_acov[:, e]) / var_plus[e]
        rho[0] = 1.0
        tau = max(_geyer_tau(rho), 1.0 / np.log10(total))
        ess[e] = total / tau
    return EssResult(ess.reshape(event_shape), degenerate.reshape(event_shape))


def diagnostics_report(samples) -> DiagnosticsReport:
    """R-hat, ESS and pooled moments (population variance), with sanity flags."""
    x = np.asarray(samples, dtype=np.float64)
    r_hat = potential_scale_reduction(x)
    ess = effective_sample_size(x)
    return DiagnosticsReport(
        r_hat=r_hat.r_hat,
        ess=ess.ess,
        mean=x.mean(axis=(0, 1)),
        variance=x.var(axis=(0, 1)),
        degenerate=r_hat.degenerate | ess.degenerate,
        super_efficient=ess.ess > SUPER_EFFICIENCY_FACTOR * x.shape[0] * x.shape[1],
        num_draws=x.shape[0],
        num_chains=x.shape[1],
    )

"""
Brute-force reference correlator.

Holds the whole series in memory and evaluates every lag directly; it exists to check the
streaming engine and to measure what multi-tau coarsening costs at long lags.
"""

import logging
from typing import Iterable, NamedTuple, Optional

import numpy as np

from app.errors import ConfigurationError, InsufficientDataError
from app.models import BiasRow, CorrelatorConfig, DirectCorrelogram, SampleSeries
from app.services.multitau import correlate_chunks, normalize_symmetric
from app.services.photon_events import series_chunks

logger = logging.getLogger(__name__)


class DirectChannel(NamedTuple):
    raw_sum: int
    update_count: int
    direct_monitor: int
    delayed_monitor: int
    g: Optional[float]


def _lag_products(counts: np.ndarray, lag: int) -> int:
    head, tail = counts[lag:], counts[: counts.size - lag]
    if head.size == 0:
        return 0
    if int(head.max()) * int(tail.max()) * head.size < 2**62:
        return int(np.dot(head, tail))
    return int(np.dot(head.astype(object), tail.astype(object)))


def direct_correlate(series: SampleSeries, max_lag: int) -> DirectCorrelogram:
    """
    Evaluate g(j) = 1/(N - j) * sum_i x(i) x(i + j) for j = 1..max_lag.

    Args:
        series (SampleSeries): Counts per sample.
        max_lag (int): Largest lag index; must be below the series length.

    Returns:
        DirectCorrelogram: Exact integer sums and their 1/(N - j) normalisation.
    """
    n = len(series)
    if max_lag >= n:
        raise InsufficientDataError(f"max_lag {max_lag} needs more than {n} samples")
    lags = np.arange(1, max_lag + 1)
    sums = tuple(_lag_products(series.counts, int(j)) for j in lags)
    norm = np.array([s / (n - j) for s, j in zip(sums, lags)], dtype=float)
    return DirectCorrelogram(lags=lags, sums=sums, norm=norm, num_samples=n)


def direct_symmetric(series: SampleSeries, lag: int) -> DirectChannel:
    """Symmetric-normalised direct estimate at a single lag."""
    counts = series.counts
    n = counts.size
    if lag < 1:
        raise ConfigurationError(f"lag must be at least 1, got {lag}")
    if lag >= n:
        return DirectChannel(0, 0, 0, 0, None)
    raw = _lag_products(counts, lag)
    direct = int(counts[lag:].sum())
    delayed = int(counts[: n - lag].sum())
    m = n - lag
    return DirectChannel(raw, m, direct, delayed, normalize_symmetric(raw, direct, delayed, m))


def coarsen(series: SampleSeries, factor: int) -> SampleSeries:
    """
    Sum consecutive groups of `factor` samples; a trailing partial group is dropped.
    """
    if factor < 1:
        raise ConfigurationError(f"coarsening factor must be positive, got {factor}")
    usable = (len(series) // factor) * factor
    counts = series.counts[:usable].reshape(-1, factor).sum(axis=1)
    return SampleSeries(counts, series.sample_period_ticks * factor)


def averaging_bias(
    series: SampleSeries,
    config: Optional[CorrelatorConfig] = None,
    max_block: Optional[int] = None,
) -> list[BiasRow]:
    """
    Compare each multi-tau channel with the direct estimate at the same physical lag.

    Both sides are symmetric-normalised; the multi-tau side comes from running the engine
    over the series. Channels either side cannot define are omitted.

    Args:
        series (SampleSeries): Base-rate counts.
        config (CorrelatorConfig): Correlator geometry.
        max_block (int | None): Highest block to report.

    Returns:
        list[BiasRow]: One row per defined channel.
    """
    config = config or CorrelatorConfig()
    correlogram = correlate_chunks(series_chunks(series), config)

    rows = []
    for channel in correlogram.channels:
        if max_block is not None and channel.block > max_block:
            break
        if channel.g is None:
            continue
        direct = direct_symmetric(series, channel.lag_samples)
        if direct.g is None:
            continue
        rows.append(BiasRow(channel.block, channel.delay, channel.lag, channel.g, direct.g))
    logger.debug(f"Averaging bias computed for {len(rows)} channels")
    return rows


def bias_summary(rows: Iterable[BiasRow]) -> dict[int, float]:
    """Mean absolute bias per block."""
    per_block: dict[int, list[float]] = {}
    for row in rows:
        per_block.setdefault(row.block, []).append(abs(row.bias))
    return {block: float(np.mean(values)) for block, values in sorted(per_block.items())}

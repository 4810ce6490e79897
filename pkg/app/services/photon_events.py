"""
Photon arrival streams at 1.25 ns tick resolution.

The interval codec mirrors the hardware counter: it reports the number of 800 MHz clock
cycles between consecutive events, labelled as if each cycle were 1 ns. Positions stay in
integer ticks here; the x1.25 restoration happens once, in `physical_times_ns`.
"""

import logging
from fractions import Fraction
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from app.errors import ConfigurationError, MalformedStreamError
from app.models import (MAX_TICK, MIN_GAP_TICKS, TICK_NS, TICKS_PER_SAMPLE,
                        IntervalRecord, PhotonEventStream, SampleSeries)

logger = logging.getLogger(__name__)


class SparseChunk(NamedTuple):
    """
    Non-zero samples of one stretch of a sample series.

    indices are absolute sample indices in [start, start + length), values the counts there.
    """

    start: int
    length: int
    indices: np.ndarray
    values: np.ndarray


def validate(stream: PhotonEventStream) -> None:
    """
    Check the stream invariants.

    Raises:
        MalformedStreamError: on negative ticks, gaps below the pulse width or events
            outside the observation window.
    """
    events = stream.events
    if stream.duration < 0 or stream.duration > MAX_TICK:
        raise MalformedStreamError(f"duration out of range: {stream.duration}")
    if events.size == 0:
        return
    if events[0] < 0:
        raise MalformedStreamError(f"negative tick at position 0: {events[0]}")
    gaps = np.diff(events)
    bad = np.flatnonzero(gaps < MIN_GAP_TICKS)
    if bad.size:
        k = int(bad[0]) + 1
        raise MalformedStreamError(
            f"events {k - 1} and {k} are {int(gaps[bad[0]])} ticks apart; "
            f"minimum is {MIN_GAP_TICKS} ticks (non-monotonic or closer than the pulse width)"
        )
    if events[-1] >= stream.duration:
        raise MalformedStreamError(
            f"event at tick {int(events[-1])} lies outside duration {stream.duration}"
        )


def encode_intervals(stream: PhotonEventStream) -> IntervalRecord:
    """
    Emulate the counter: differences between consecutive events, in ticks.

    Args:
        stream (PhotonEventStream): A valid stream.

    Returns:
        IntervalRecord: raw_intervals[0] = events[0], raw_intervals[k] = events[k] - events[k-1].
    """
    validate(stream)
    if len(stream) == 0:
        return IntervalRecord(np.empty(0, dtype=np.int64))
    return IntervalRecord(np.diff(stream.events, prepend=np.int64(0)))


def decode_intervals(record: IntervalRecord, duration: int | None = None) -> PhotonEventStream:
    """
    Restore event ticks from counter output by prefix summation.

    Args:
        record (IntervalRecord): Counter output.
        duration (int | None): Observation window; defaults to one tick past the last event.

    Returns:
        PhotonEventStream: The restored stream.
    """
    raw = record.raw_intervals
    if raw.size and raw[0] < 0:
        raise MalformedStreamError("negative first interval")
    if raw.size > 1:
        zero = np.flatnonzero(raw[1:] <= 0)
        if zero.size:
            raise MalformedStreamError(
                f"corrupt record: interval {int(raw[zero[0] + 1])} at position {int(zero[0]) + 1}"
            )
        short = np.flatnonzero(raw[1:] < MIN_GAP_TICKS)
        if short.size:
            raise MalformedStreamError(
                f"corrupt record: interval {int(raw[short[0] + 1])} at position "
                f"{int(short[0]) + 1} is below the {MIN_GAP_TICKS}-tick pulse width"
            )
    events = np.cumsum(raw, dtype=np.int64)
    if duration is None:
        duration = int(events[-1]) + 1 if events.size else 0
    stream = PhotonEventStream(events, duration)
    validate(stream)
    return stream


def physical_times_ns(stream: PhotonEventStream) -> list[Fraction]:
    """Arrival times in ns, exact: tick x 1.25."""
    return [int(t) * TICK_NS for t in stream.events]


def bin_to_samples(stream: PhotonEventStream, sample_period_ticks: int = TICKS_PER_SAMPLE) -> SampleSeries:
    """
    Count events per frame of `sample_period_ticks` ticks.

    Args:
        stream (PhotonEventStream): A valid stream.
        sample_period_ticks (int): Frame length in ticks (8 for the 10 ns base rate).

    Returns:
        SampleSeries: ceil(duration / period) counts.
    """
    if sample_period_ticks < 1:
        raise ConfigurationError(f"sample period must be at least 1 tick, got {sample_period_ticks}")
    validate(stream)
    length = -(-stream.duration // sample_period_ticks)
    counts = np.bincount(stream.events // sample_period_ticks, minlength=length)
    return SampleSeries(counts.astype(np.int64), sample_period_ticks)


class SampleBinner:
    """
    Push-style binning of time-ordered event blocks into sparse sample chunks.

    Every chunk covers exactly `chunk_samples` samples except the last one; the chunks tile
    [0, ceil(duration / period)).
    """

    def __init__(self, duration: int, sample_period_ticks: int = TICKS_PER_SAMPLE, chunk_samples: int = 2**22):
        if sample_period_ticks < 1 or chunk_samples < 1:
            raise ConfigurationError("sample period and chunk size must be positive")
        self.duration = int(duration)
        self.sample_period_ticks = sample_period_ticks
        self.chunk_samples = chunk_samples
        self.total = -(-self.duration // sample_period_ticks)
        self.start = 0
        self._pending = np.empty(0, dtype=np.int64)
        self._last_tick: int | None = None

    def _emit(self, upto: int) -> Iterator[SparseChunk]:
        while self.start + self.chunk_samples <= upto or (upto == self.total and self.start < self.total):
            stop = min(self.start + self.chunk_samples, self.total)
            cut = np.searchsorted(self._pending, stop, side="left")
            indices, values = np.unique(self._pending[:cut], return_counts=True)
            self._pending = self._pending[cut:]
            yield SparseChunk(self.start, stop - self.start, indices, values.astype(np.int64))
            self.start = stop

    def feed(self, block: np.ndarray) -> Iterator[SparseChunk]:
        """Add the next block of event ticks; yields the chunks it completes."""
        block = np.asarray(block, dtype=np.int64)
        if block.size == 0:
            return
        if self._last_tick is not None and block[0] - self._last_tick < MIN_GAP_TICKS:
            raise MalformedStreamError(f"events out of order across blocks at tick {int(block[0])}")
        if block.size > 1 and np.any(np.diff(block) < MIN_GAP_TICKS):
            raise MalformedStreamError("events closer than the pulse width within a block")
        if block[0] < 0:
            raise MalformedStreamError(f"negative tick {int(block[0])}")
        if block[-1] >= self.duration:
            raise MalformedStreamError(f"event at tick {int(block[-1])} lies outside duration {self.duration}")
        self._last_tick = int(block[-1])
        self._pending = np.concatenate([self._pending, block // self.sample_period_ticks])
        # samples below the newest event's sample are complete
        yield from self._emit(int(self._pending[-1]))

    def finish(self) -> Iterator[SparseChunk]:
        """Flush the remaining samples up to the end of the observation window."""
        yield from self._emit(self.total)


def iter_sample_chunks(
    events: Iterable[np.ndarray],
    duration: int,
    sample_period_ticks: int = TICKS_PER_SAMPLE,
    chunk_samples: int = 2**22,
) -> Iterator[SparseChunk]:
    """Bin an event stream, delivered in blocks, into sparse sample chunks."""
    binner = SampleBinner(duration, sample_period_ticks, chunk_samples)
    for block in events:
        yield from binner.feed(block)
    yield from binner.finish()


def series_chunks(series: SampleSeries, chunk_samples: int = 2**22) -> Iterator[SparseChunk]:
    """Sparse view of a dense series, chunk by chunk."""
    counts = series.counts
    for start in range(0, counts.size, chunk_samples):
        part = counts[start:start + chunk_samples]
        nz = np.flatnonzero(part)
        yield SparseChunk(start, int(part.size), nz + start, part[nz])

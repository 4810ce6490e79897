"""
Streaming multi-tau correlator.

The engine is a cascade of blocks. Block 0 sees the base sample series; every `dilation`
samples a block forwards the sum of those samples to the next block as one coarsened sample
(the clock-enable cascade). Each block keeps a short shift register, per-channel 64-bit
product accumulators and the two monitor sums used by symmetric normalization, so the state
size depends on the configuration only.

Two push paths exist: `push_sample` shifts one sample through the cascade exactly like the
hardware, `push_chunk`/`push_samples` process a sparse stretch of samples with numpy. Both leave
identical integer state.
"""

import asyncio
import logging
from typing import AsyncIterable, Callable, Iterable, Iterator, Optional

import numpy as np

from app.errors import (AccumulatorOverflowError, ConfigurationError,
                        LifecycleError, MalformedStreamError, NoDataError)
from app.models import (TICK_SECONDS, UINT64_MAX, ChannelRecord,
                        CorrelatorConfig, Correlogram, LagEntry, Lifecycle,
                        PhotonEventStream)
from app.services.photon_events import (SampleBinner, SparseChunk,
                                         iter_sample_chunks)

logger = logging.getLogger(__name__)

_INT64_SAFE = 2**62


def lag_schedule(config: CorrelatorConfig) -> list[LagEntry]:
    """
    Lag of every correlation channel, in schedule order.

    Args:
        config (CorrelatorConfig): Correlator geometry.

    Returns:
        list[LagEntry]: (block, channel-in-block, lag seconds); P0 + (S-1)*P entries.
    """
    schedule = []
    for s in range(config.num_blocks):
        factor = config.block_sample_factor(s)
        for k, delay in enumerate(config.block_delays(s)):
            schedule.append(LagEntry(s, k, delay * factor * config.base_sample_period))
    return schedule


def base_period_ticks(config: CorrelatorConfig) -> int:
    """Base sample period expressed in 1.25 ns ticks."""
    exact = config.base_sample_period / float(TICK_SECONDS)
    ticks = round(exact)
    if ticks < 1 or abs(exact - ticks) > 1e-6 * ticks:
        raise ConfigurationError(
            f"base sample period {config.base_sample_period} s is not a whole number of 1.25 ns ticks"
        )
    return ticks


def normalize_symmetric(raw_sum: int, direct_monitor: int, delayed_monitor: int, update_count: int) -> Optional[float]:
    """
    Symmetric normalization g = G*M / (D*E).

    Returns:
        Optional[float]: None when the channel has no accumulation events or an empty monitor.
    """
    if update_count <= 0 or direct_monitor <= 0 or delayed_monitor <= 0:
        return None
    # int / int is correctly rounded, so common integer factors cancel exactly
    return (int(raw_sum) * int(update_count)) / (int(direct_monitor) * int(delayed_monitor))


def _dot_exact(a: np.ndarray, b: np.ndarray) -> int:
    if a.size == 0:
        return 0
    if int(a.max()) * int(b.max()) * a.size < _INT64_SAFE:
        return int(np.dot(a, b))
    return int(np.dot(a.astype(object), b.astype(object)))


def _sum_exact(a: np.ndarray) -> int:
    if a.size == 0:
        return 0
    if int(a.max()) * a.size < _INT64_SAFE:
        return int(a.sum())
    return int(sum(int(v) for v in a))


class RingBuffer:
    """Fixed-capacity shift register of integer samples."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.buffer = np.zeros(capacity, dtype=np.int64)
        self.write_idx = 0

    def append(self, value: int) -> None:
        self.buffer[self.write_idx] = value
        self.write_idx = (self.write_idx + 1) % self.capacity

    def ago(self, steps: int) -> int:
        """Value appended `steps` appends before the next write (1 = newest)."""
        return int(self.buffer[(self.write_idx - steps) % self.capacity])

    def ordered(self) -> np.ndarray:
        """Contents from oldest to newest."""
        return np.roll(self.buffer, -self.write_idx)

    def load(self, values: np.ndarray) -> None:
        """Replace the contents with `values` (oldest first, exactly `capacity` long)."""
        self.buffer[:] = values
        self.write_idx = 0

    def clear(self) -> None:
        self.buffer.fill(0)
        self.write_idx = 0


class CorrelatorBlock:
    """
    One correlator block: shift register, accumulators, monitors and the pair buffer that
    feeds the next block.

    Per channel k with delay j (in this block's samples):
        raw_sums[k]        sum of y(i) * y(i - j)
        direct_monitors[k] sum of y(i)
        delayed_monitors[k] sum of y(i - j)
        update_counts[k]   number of i with i >= j
    """

    def __init__(self, index: int, delays: list[int], dilation: int):
        self.index = index
        self.delays = list(delays)
        self.dilation = dilation
        self.register = RingBuffer(max(self.delays))
        self.raw_sums = [0] * len(self.delays)
        self.direct_monitors = [0] * len(self.delays)
        self.delayed_monitors = [0] * len(self.delays)
        self.update_counts = [0] * len(self.delays)
        self.samples_seen = 0
        self.total = 0
        self.pair_buffer = 0
        self.cycle_counter = 0

    def clear(self) -> None:
        self.register.clear()
        n = len(self.delays)
        self.raw_sums = [0] * n
        self.direct_monitors = [0] * n
        self.delayed_monitors = [0] * n
        self.update_counts = [0] * n
        self.samples_seen = 0
        self.total = 0
        self.pair_buffer = 0
        self.cycle_counter = 0

    def _check_overflow(self) -> None:
        for k, delay in enumerate(self.delays):
            if (
                self.raw_sums[k] > UINT64_MAX
                or self.direct_monitors[k] > UINT64_MAX
                or self.delayed_monitors[k] > UINT64_MAX
            ):
                raise AccumulatorOverflowError(
                    f"64-bit accumulator overflow in block {self.index}, delay {delay}"
                )

    def shift_in(self, value: int) -> Optional[int]:
        """
        Accumulate one sample.

        Returns:
            Optional[int]: The coarsened sample for the next block when the clock-enable
                period completes, else None.
        """
        i = self.samples_seen
        for k, delay in enumerate(self.delays):
            if i >= delay:
                delayed = self.register.ago(delay)
                self.raw_sums[k] += value * delayed
                self.direct_monitors[k] += value
                self.delayed_monitors[k] += delayed
                self.update_counts[k] += 1
        self.register.append(value)
        self.samples_seen += 1
        self.total += value
        self._check_overflow()

        self.pair_buffer += value
        self.cycle_counter += 1
        if self.cycle_counter == self.dilation:
            out = self.pair_buffer
            self.pair_buffer = 0
            self.cycle_counter = 0
            return out
        return None

    def extend(self, chunk: SparseChunk) -> Optional[SparseChunk]:
        """
        Accumulate a stretch of samples given sparsely.

        Returns:
            Optional[SparseChunk]: The completed coarsened samples for the next block.
        """
        start, length = chunk.start, chunk.length
        if start != self.samples_seen:
            raise MalformedStreamError(
                f"block {self.index} expected samples from {self.samples_seen}, got {start}"
            )
        if length == 0:
            return None
        indices = np.asarray(chunk.indices, dtype=np.int64)
        values = np.asarray(chunk.values, dtype=np.int64)
        stop = start + length
        if indices.size and (indices[0] < start or indices[-1] >= stop):
            raise MalformedStreamError(f"chunk indices fall outside [{start}, {stop})")

        # history: the register holds samples [start - R, start)
        capacity = self.register.capacity
        history = self.register.ordered()
        hist_idx = np.arange(start - capacity, start, dtype=np.int64)
        keep = (hist_idx >= 0) & (history != 0)
        comb_idx = np.concatenate([hist_idx[keep], indices])
        comb_val = np.concatenate([history[keep], values])
        if comb_val.size and int(comb_val.max()) * comb_val.size >= _INT64_SAFE:
            comb_csum = np.concatenate([[0], np.cumsum(comb_val.astype(object))])
        else:
            comb_csum = np.concatenate([[0], np.cumsum(comb_val)])

        for k, delay in enumerate(self.delays):
            first = max(start, delay)
            if first >= stop:
                continue
            self.update_counts[k] += stop - first

            target = indices - delay
            pos = np.searchsorted(comb_idx, target)
            found = pos < comb_idx.size
            found[found] = comb_idx[pos[found]] == target[found]
            self.raw_sums[k] += _dot_exact(values[found], comb_val[pos[found]])

            self.direct_monitors[k] += _sum_exact(values[indices >= delay])

            lo = np.searchsorted(comb_idx, first - delay)
            hi = np.searchsorted(comb_idx, stop - delay)
            self.delayed_monitors[k] += int(comb_csum[hi]) - int(comb_csum[lo])

        # new register contents: samples [stop - R, stop)
        window = np.zeros(capacity, dtype=np.int64)
        sel = comb_idx >= stop - capacity
        window[comb_idx[sel] - (stop - capacity)] = comb_val[sel]
        self.register.load(window)

        self.samples_seen = stop
        self.total += _sum_exact(values)
        self._check_overflow()

        return self._coarsen(start, stop, indices, values)

    def _coarsen(self, start: int, stop: int, indices: np.ndarray, values: np.ndarray) -> Optional[SparseChunk]:
        n = self.dilation
        first_group = start // n
        done = stop // n
        groups = indices // n
        if self.pair_buffer:
            groups = np.concatenate([[first_group], groups])
            values = np.concatenate([[self.pair_buffer], values])
        if groups.size:
            # groups are sorted: sum runs of equal group index
            heads = np.flatnonzero(np.concatenate([[True], groups[1:] != groups[:-1]]))
            uniq = groups[heads]
            sums = np.add.reduceat(values, heads)
        else:
            uniq = groups
            sums = values

        partial = uniq == done
        self.pair_buffer = int(sums[partial][0]) if partial.any() else 0
        self.cycle_counter = stop % n
        if done == first_group:
            return None
        complete = ~partial
        return SparseChunk(first_group, done - first_group, uniq[complete], sums[complete])

    def state_size(self) -> int:
        return self.register.capacity + 4 * len(self.delays) + 4


class MultiTauCorrelator:
    """
    Multi-tau correlator engine with the Idle -> Ready -> Processing -> Done lifecycle.

    Single writer: one caller pushes samples; snapshots are taken between pushes.
    """

    def __init__(self, config: Optional[CorrelatorConfig] = None):
        self.config = config or CorrelatorConfig()
        self.blocks = [
            CorrelatorBlock(s, self.config.block_delays(s), self.config.dilation)
            for s in range(self.config.num_blocks)
        ]
        self.lifecycle = Lifecycle.IDLE

    def _transition(self, expected: Lifecycle, target: Lifecycle) -> None:
        if self.lifecycle is not expected:
            raise LifecycleError(
                f"cannot move to {target.value} from {self.lifecycle.value}; expected {expected.value}"
            )
        logger.debug(f"Correlator {self.lifecycle.value} -> {target.value}")
        self.lifecycle = target

    def arm(self) -> "MultiTauCorrelator":
        """Idle -> Ready."""
        self._transition(Lifecycle.IDLE, Lifecycle.READY)
        return self

    def start(self) -> "MultiTauCorrelator":
        """Ready -> Processing."""
        self._transition(Lifecycle.READY, Lifecycle.PROCESSING)
        return self

    def stop(self) -> "MultiTauCorrelator":
        """Processing -> Done. Accumulators are left untouched."""
        self._transition(Lifecycle.PROCESSING, Lifecycle.DONE)
        return self

    def clear(self) -> "MultiTauCorrelator":
        """Any state -> Idle with every accumulator zeroed."""
        for block in self.blocks:
            block.clear()
        logger.debug(f"Correlator {self.lifecycle.value} -> idle (cleared)")
        self.lifecycle = Lifecycle.IDLE
        return self

    def _require_processing(self) -> None:
        if self.lifecycle is not Lifecycle.PROCESSING:
            raise LifecycleError(f"samples are accepted only while processing, state is {self.lifecycle.value}")

    @property
    def total_samples(self) -> int:
        return self.blocks[0].samples_seen

    @property
    def total_time(self) -> float:
        return self.total_samples * self.config.base_sample_period

    def push_sample(self, count: int) -> None:
        self._require_processing()
        count = int(count)
        if count < 0:
            raise MalformedStreamError(f"sample counts must be non-negative, got {count}")
        out: Optional[int] = count
        for block in self.blocks:
            if out is None:
                break
            out = block.shift_in(out)

    def push_chunk(self, chunk: SparseChunk) -> None:
        self._require_processing()
        if chunk.values.size and int(np.min(chunk.values)) < 0:
            raise MalformedStreamError("sample counts must be non-negative")
        current: Optional[SparseChunk] = chunk
        for block in self.blocks:
            if current is None:
                break
            current = block.extend(current)

    def push_samples(self, counts: Iterable[int]) -> None:
        counts = np.asarray(counts, dtype=np.int64)
        nz = np.flatnonzero(counts)
        start = self.total_samples
        self.push_chunk(SparseChunk(start, int(counts.size), nz + start, counts[nz]))

    def push_sparse(self, indices: np.ndarray, values: np.ndarray, length: int) -> None:
        """Push `length` samples given by their non-zero entries; indices are relative to this stretch."""
        start = self.total_samples
        indices = np.asarray(indices, dtype=np.int64)
        self.push_chunk(SparseChunk(start, int(length), indices + start, np.asarray(values, dtype=np.int64)))

    def snapshot(self) -> Correlogram:
        """
        Point-in-time read of every channel. Does not mutate the engine.

        Raises:
            NoDataError: before the engine has been started.
        """
        if self.lifecycle in (Lifecycle.IDLE, Lifecycle.READY):
            raise NoDataError(f"no data to read in state {self.lifecycle.value}")
        records = []
        base = self.config.base_sample_period
        for block in self.blocks:
            factor = self.config.block_sample_factor(block.index)
            for k, delay in enumerate(block.delays):
                lag_samples = delay * factor
                records.append(
                    ChannelRecord(
                        block=block.index,
                        delay=delay,
                        lag_samples=lag_samples,
                        lag=lag_samples * base,
                        raw_sum=block.raw_sums[k],
                        direct_monitor=block.direct_monitors[k],
                        delayed_monitor=block.delayed_monitors[k],
                        update_count=block.update_counts[k],
                        g=normalize_symmetric(
                            block.raw_sums[k],
                            block.direct_monitors[k],
                            block.delayed_monitors[k],
                            block.update_counts[k],
                        ),
                    )
                )
        return Correlogram(self.config, self.total_samples, tuple(records))

    def state_size(self) -> int:
        """Number of stored integers; a function of the configuration only."""
        return sum(block.state_size() for block in self.blocks)


class _SnapshotTimer:
    def __init__(self, every: Optional[float], callback: Optional[Callable[[Correlogram], None]]):
        if every is not None and not every > 0:
            raise ConfigurationError(f"snapshot interval must be positive, got {every}")
        self.every = every if callback is not None else None
        self.callback = callback
        self.next_at = every

    def check(self, engine: "MultiTauCorrelator") -> None:
        if self.every is None or engine.total_time < self.next_at:
            return
        self.callback(engine.snapshot())
        while self.next_at <= engine.total_time:
            self.next_at += self.every


def correlate_chunks(
    chunks: Iterable[SparseChunk],
    config: Optional[CorrelatorConfig] = None,
    snapshot_every: Optional[float] = None,
    on_snapshot: Optional[Callable[[Correlogram], None]] = None,
) -> Correlogram:
    """
    Run a full acquisition: Idle -> Ready -> Processing (all chunks) -> Done, final snapshot.

    Args:
        chunks: Sparse base-sample chunks in time order.
        config: Correlator geometry.
        snapshot_every: Stream time between progress snapshots, in seconds.
        on_snapshot: Receives every progress snapshot.
    """
    engine = MultiTauCorrelator(config).arm().start()
    timer = _SnapshotTimer(snapshot_every, on_snapshot)
    for chunk in chunks:
        engine.push_chunk(chunk)
        logger.debug(f"Correlated {engine.total_samples} samples ({engine.total_time:.3f} s)")
        timer.check(engine)
    engine.stop()
    logger.info(f"Correlation finished: {engine.total_samples} samples, {engine.total_time:.3f} s")
    return engine.snapshot()


async def correlate_event_blocks(
    blocks: AsyncIterable[np.ndarray],
    duration: int,
    config: Optional[CorrelatorConfig] = None,
    chunk_samples: int = 2**22,
    snapshot_every: Optional[float] = None,
    on_snapshot: Optional[Callable[[Correlogram], None]] = None,
) -> Correlogram:
    """
    Same as `correlate_chunks`, fed by event tick blocks read asynchronously from a file.

    Binning and correlation of each block run in a worker thread, so the event loop only
    waits on file reads.

    Args:
        blocks: Time-ordered blocks of event ticks.
        duration: Observation window in ticks.
    """
    config = config or CorrelatorConfig()
    engine = MultiTauCorrelator(config).arm().start()
    binner = SampleBinner(duration, base_period_ticks(config), chunk_samples)
    timer = _SnapshotTimer(snapshot_every, on_snapshot)

    def consume(chunks: Iterator[SparseChunk]) -> None:
        for chunk in chunks:
            engine.push_chunk(chunk)
            timer.check(engine)

    async for block in blocks:
        await asyncio.to_thread(consume, binner.feed(block))
    await asyncio.to_thread(consume, binner.finish())
    engine.stop()
    logger.info(f"Correlation finished: {engine.total_samples} samples, {engine.total_time:.3f} s")
    return engine.snapshot()


def correlate_stream(
    stream: PhotonEventStream,
    config: Optional[CorrelatorConfig] = None,
    chunk_samples: int = 2**22,
    **kwargs,
) -> Correlogram:
    """Correlate an in-memory photon stream."""
    config = config or CorrelatorConfig()
    chunks: Iterator[SparseChunk] = iter_sample_chunks(
        iter([stream.events]), stream.duration, base_period_ticks(config), chunk_samples
    )
    return correlate_chunks(chunks, config, **kwargs)

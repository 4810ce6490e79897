from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import NamedTuple, Optional

import numpy as np

from app.errors import ConfigurationError, PhysicsValidationError

# One 800 MHz clock period. Kept exact; floats appear only at reporting boundaries.
TICK_NS = Fraction(5, 4)
TICK_SECONDS = Fraction(5, 4) / 10**9
TICKS_PER_SAMPLE = 8
# Detector pulse width (10 ns) in ticks
MIN_GAP_TICKS = 8
MAX_TICK = 2**63 - 1

UINT64_MAX = 2**64 - 1


def ticks_to_seconds(ticks: int) -> float:
    return float(ticks * TICK_SECONDS)


@dataclass(frozen=True)
class PhotonEventStream:
    """
    Photon arrival times in ticks since stream start.

    Attributes:
        events (np.ndarray): strictly increasing int64 tick values.
        duration (int): observation window in ticks; every event is < duration.
    """

    events: np.ndarray
    duration: int

    def __post_init__(self):
        object.__setattr__(self, "events", np.asarray(self.events, dtype=np.int64))
        object.__setattr__(self, "duration", int(self.duration))

    def __len__(self) -> int:
        return int(self.events.size)

    @property
    def duration_seconds(self) -> float:
        return ticks_to_seconds(self.duration)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PhotonEventStream):
            return NotImplemented
        return self.duration == other.duration and np.array_equal(self.events, other.events)


@dataclass(frozen=True)
class IntervalRecord:
    """Counter output: clock cycles between consecutive events (first entry from stream start)."""

    raw_intervals: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "raw_intervals", np.asarray(self.raw_intervals, dtype=np.int64)
        )

    def __len__(self) -> int:
        return int(self.raw_intervals.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IntervalRecord):
            return NotImplemented
        return np.array_equal(self.raw_intervals, other.raw_intervals)


@dataclass(frozen=True)
class SampleSeries:
    """Photon counts per sampling interval."""

    counts: np.ndarray
    sample_period_ticks: int = TICKS_PER_SAMPLE

    def __post_init__(self):
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))
        object.__setattr__(self, "sample_period_ticks", int(self.sample_period_ticks))

    def __len__(self) -> int:
        return int(self.counts.size)

    @property
    def sample_period(self) -> float:
        return ticks_to_seconds(self.sample_period_ticks)


class Lifecycle(str, Enum):
    IDLE = "idle"
    READY = "ready"
    PROCESSING = "processing"
    DONE = "done"


class LagEntry(NamedTuple):
    block: int
    channel: int
    lag: float


@dataclass(frozen=True)
class CorrelatorConfig:
    """
    Geometry of the multi-tau correlator.

    Block 0 holds `first_block_channels` channels at delays 1..P0 base samples. Every later
    block continues the lag axis from the previous block's last lag in steps of its own sample
    period, base_sample_period * dilation**s.
    """

    num_blocks: int = 35
    channels_per_block: int = 8
    first_block_channels: int = 16
    base_sample_period: float = 1e-8
    dilation: int = 2

    def __post_init__(self):
        for name in ("num_blocks", "channels_per_block", "first_block_channels", "dilation"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value}")
        if self.dilation < 2 and self.num_blocks > 1:
            raise ConfigurationError("dilation must be at least 2 for more than one block")
        if not (self.base_sample_period > 0 and math.isfinite(self.base_sample_period)):
            raise ConfigurationError(
                f"base_sample_period must be positive, got {self.base_sample_period}"
            )
        for s in range(1, self.num_blocks):
            rem = self.block_start_lag(s) % self.dilation**s
            if rem:
                raise ConfigurationError(
                    f"block {s} lags are not whole multiples of its sample period; "
                    f"choose first_block_channels/channels_per_block/dilation accordingly"
                )

    @property
    def total_channels(self) -> int:
        return self.first_block_channels + (self.num_blocks - 1) * self.channels_per_block

    def block_sample_factor(self, block: int) -> int:
        """Block sample period in base samples."""
        return self.dilation**block

    def block_period(self, block: int) -> float:
        return self.base_sample_period * self.block_sample_factor(block)

    def block_start_lag(self, block: int) -> int:
        """Last lag of the previous block, in base samples (0 for block 0)."""
        if block == 0:
            return 0
        n, p = self.dilation, self.channels_per_block
        # P0 + P * (n + n^2 + ... + n^(block-1))
        return self.first_block_channels + p * sum(n**k for k in range(1, block))

    def block_delays(self, block: int) -> list[int]:
        """Per-channel delay indices in the block's own time base."""
        if block == 0:
            return list(range(1, self.first_block_channels + 1))
        start = self.block_start_lag(block) // self.block_sample_factor(block)
        return [start + k for k in range(1, self.channels_per_block + 1)]

    def lag_samples(self) -> list[int]:
        """Every channel's lag in base samples, in schedule order."""
        lags = []
        for s in range(self.num_blocks):
            factor = self.block_sample_factor(s)
            lags.extend(d * factor for d in self.block_delays(s))
        return lags


@dataclass(frozen=True)
class ChannelRecord:
    block: int
    delay: int
    lag_samples: int
    lag: float
    raw_sum: int
    direct_monitor: int
    delayed_monitor: int
    update_count: int
    g: Optional[float]

    @property
    def defined(self) -> bool:
        return self.g is not None

    def standard_error(self) -> Optional[float]:
        """Shot-noise estimate of the spread of g from the channel's counting statistics."""
        if self.g is None or self.raw_sum == 0:
            return None
        rel = 1.0 / self.raw_sum + 1.0 / self.direct_monitor + 1.0 / self.delayed_monitor
        return self.g * math.sqrt(rel)


@dataclass(frozen=True)
class Correlogram:
    config: CorrelatorConfig
    total_samples: int
    channels: tuple[ChannelRecord, ...]

    def __len__(self) -> int:
        return len(self.channels)

    @property
    def lags(self) -> np.ndarray:
        return np.array([c.lag for c in self.channels], dtype=float)

    @property
    def g(self) -> np.ndarray:
        """Normalized values with NaN for undefined channels."""
        return np.array([np.nan if c.g is None else c.g for c in self.channels], dtype=float)

    @property
    def defined(self) -> np.ndarray:
        return np.array([c.defined for c in self.channels], dtype=bool)

    @property
    def update_counts(self) -> np.ndarray:
        return np.array([c.update_count for c in self.channels], dtype=float)

    @property
    def total_time(self) -> float:
        return self.total_samples * self.config.base_sample_period


@dataclass(frozen=True)
class DirectCorrelogram:
    """
    Brute-force estimate: sums[k] = sum_i x(i) x(i + lags[k]) over N - lags[k] terms.
    """

    lags: np.ndarray
    sums: tuple[int, ...]
    norm: np.ndarray
    num_samples: int


@dataclass(frozen=True)
class ExperimentParams:
    """
    Physical parameters of one DLS measurement. SI units throughout, angle in radians.
    """

    temperature: float = 298.15
    viscosity: float = 0.89e-3
    wavelength: float = 532e-9
    medium_refractive_index: float = 1.332
    scattering_angle: float = math.radians(30.0)
    particle_diameter: float = 530e-9
    mean_count_rate: float = 5e6
    coherence_factor: float = 1.0

    def __post_init__(self):
        positive = (
            "temperature",
            "viscosity",
            "wavelength",
            "medium_refractive_index",
            "particle_diameter",
            "mean_count_rate",
        )
        for name in positive:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise PhysicsValidationError(f"{name} must be strictly positive, got {value}")
        if not (0 < self.scattering_angle < math.pi):
            raise PhysicsValidationError(
                f"scattering_angle must lie in (0, pi), got {self.scattering_angle}"
            )
        if not (0 < self.coherence_factor <= 1):
            raise PhysicsValidationError(
                f"coherence_factor must lie in (0, 1], got {self.coherence_factor}"
            )


@dataclass(frozen=True)
class GroundTruth:
    q: float
    D: float
    gamma: float


@dataclass(frozen=True)
class IntensitySeries:
    """
    Relative scattered intensity sampled every `sample_period_ticks`.

    `start_sample` is the index of values[0] in the whole run, so chunks can be stitched.
    """

    values: np.ndarray
    sample_period_ticks: int
    mean_intensity: float
    start_sample: int = 0

    @property
    def sample_period(self) -> float:
        return ticks_to_seconds(self.sample_period_ticks)


@dataclass
class FitResult:
    B: float
    beta: float
    gamma: float
    residual_norm: float
    iterations: int
    converged: bool
    tau_min: float = 0.0
    tau_max: float = math.inf
    num_channels: int = 0
    weights: str = "uniform"

    def as_dict(self) -> dict:
        return {
            "B": self.B,
            "beta": self.beta,
            "gamma": self.gamma,
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "tau_min": self.tau_min,
            "tau_max": self.tau_max,
            "num_channels": self.num_channels,
            "weights": self.weights,
        }


@dataclass(frozen=True)
class SizeResult:
    D_exp: float
    d_exp: float
    E_r: Optional[float] = None

    def as_dict(self) -> dict:
        return {"D_exp": self.D_exp, "d_exp": self.d_exp, "E_r": self.E_r}


@dataclass(frozen=True)
class BiasRow:
    block: int
    delay: int
    lag: float
    g_multitau: float
    g_direct: float

    @property
    def bias(self) -> float:
        return self.g_multitau - self.g_direct


@dataclass
class RunConfig:
    """Parsed command line of one CLI invocation."""

    subcommand: str
    input_path: Optional[str] = None
    output_path: Optional[str] = None
    correlator: CorrelatorConfig = field(default_factory=CorrelatorConfig)
    params: ExperimentParams = field(default_factory=ExperimentParams)
    seed: int = 0
    snapshot_interval: Optional[float] = None


def seconds_to_ticks(seconds: float) -> int:
    """Nearest whole tick count; exact for multiples of 1.25 ns given in seconds."""
    return int(round(seconds / float(TICK_SECONDS)))

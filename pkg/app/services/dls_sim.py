"""
Synthetic DLS data: Brownian-motion parameters -> scattered field -> intensity -> photons.

The scattered field is a complex Gaussian first-order autoregressive process with field
correlation exp(-Gamma*tau/2), so the normalized intensity correlation is 1 + beta*exp(-Gamma*tau)
(Siegert form). Photons are drawn per 10 ns base sample with probability I(t)*rate*10 ns.
"""

import logging
import math
from dataclasses import replace
from typing import Iterator, Optional

import numpy as np
from scipy.constants import k as BOLTZMANN
from scipy.constants import pi
from scipy.signal import lfilter

from app.errors import ConfigurationError, PhysicsValidationError
from app.models import (MIN_GAP_TICKS, TICKS_PER_SAMPLE, ExperimentParams,
                        GroundTruth, IntensitySeries, PhotonEventStream,
                        seconds_to_ticks, ticks_to_seconds)

logger = logging.getLogger(__name__)

GENERATOR_NAME = "numpy.PCG64"
BASE_SAMPLE_SECONDS = ticks_to_seconds(TICKS_PER_SAMPLE)

DEFAULT_DIAMETERS = (240e-9, 360e-9, 530e-9, 805e-9)
DEFAULT_ANGLES_DEG = (15.0, 30.0, 45.0, 60.0)


def scattering_vector(params: ExperimentParams) -> float:
    return 4 * pi * params.medium_refractive_index / params.wavelength * math.sin(params.scattering_angle / 2)


def stokes_einstein(temperature: float, viscosity: float, diameter: float) -> float:
    """Diffusion coefficient of a sphere, D = k_B*T / (3*pi*eta*d)."""
    return BOLTZMANN * temperature / (3 * pi * viscosity * diameter)


def ground_truth(params: ExperimentParams) -> GroundTruth:
    """
    Closed-form q, D and Gamma = 2*D*q^2 for a monodisperse suspension.
    """
    q = scattering_vector(params)
    diffusion = stokes_einstein(params.temperature, params.viscosity, params.particle_diameter)
    return GroundTruth(q=q, D=diffusion, gamma=2 * diffusion * q**2)


def make_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent field and photon generators derived from one seed."""
    field_seq, photon_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(field_seq), np.random.default_rng(photon_seq)


def _ar_coefficient(gamma: float, sample_period: float) -> float:
    if not math.isfinite(gamma) or gamma < 0:
        raise PhysicsValidationError(f"decay rate must be finite and non-negative, got {gamma}")
    a = math.exp(-gamma * sample_period / 2)
    if not 0 <= a <= 1:
        raise PhysicsValidationError(f"unstable field recurrence coefficient {a}")
    if gamma * sample_period >= 0.1:
        logger.warning(
            f"Intensity sample period {sample_period:.3g} s is coarse for decay rate {gamma:.3g} 1/s "
            f"(Gamma*dt = {gamma * sample_period:.3g})"
        )
    return a


def iter_intensity(
    truth: GroundTruth,
    beta: float,
    mean_intensity: float,
    sample_period: float,
    num_samples: int,
    rng: np.random.Generator,
    chunk_samples: int = 2**20,
) -> Iterator[IntensitySeries]:
    """
    Stream the intensity trace chunk by chunk; the field state carries across chunks.

    beta < 1 is realised by mixing a constant floor f = 1 - sqrt(beta) into the speckle intensity.
    """
    if not 0 < beta <= 1:
        raise PhysicsValidationError(f"coherence factor must lie in (0, 1], got {beta}")
    if mean_intensity < 0:
        raise PhysicsValidationError(f"mean intensity must be non-negative, got {mean_intensity}")
    period_ticks = seconds_to_ticks(sample_period)
    if period_ticks < 1:
        raise ConfigurationError(f"intensity sample period {sample_period} s is below one tick")
    a = _ar_coefficient(truth.gamma, ticks_to_seconds(period_ticks))
    b = math.sqrt(1 - a * a)
    floor = 1 - math.sqrt(beta)

    def complex_normal(size: int) -> np.ndarray:
        pairs = rng.standard_normal((size, 2))
        return (pairs[:, 0] + 1j * pairs[:, 1]) / math.sqrt(2)

    # previous field value drawn from the stationary distribution
    previous = complex_normal(1)[0]
    produced = 0
    while produced < num_samples:
        size = min(chunk_samples, num_samples - produced)
        noise = complex_normal(size)
        field, _ = lfilter([b], [1, -a], noise, zi=[a * previous])
        previous = field[-1]
        speckle = np.abs(field) ** 2
        values = mean_intensity * ((1 - floor) * speckle + floor)
        yield IntensitySeries(values, period_ticks, mean_intensity, start_sample=produced)
        produced += size


def generate_intensity(
    truth: GroundTruth,
    beta: float,
    mean_intensity: float,
    sample_period: float,
    num_samples: int,
    seed: int,
) -> IntensitySeries:
    """
    Intensity trace whose ACF is B + beta*B*exp(-Gamma*tau) in expectation, B = mean_intensity^2.

    Deterministic given the seed.
    """
    rng, _ = make_rngs(seed)
    chunks = list(iter_intensity(truth, beta, mean_intensity, sample_period, num_samples, rng))
    values = np.concatenate([c.values for c in chunks]) if chunks else np.empty(0)
    return IntensitySeries(values, seconds_to_ticks(sample_period), mean_intensity)


def _distinct_offsets(counts: np.ndarray, span: int, rng: np.random.Generator) -> np.ndarray:
    """
    For each group g draw counts[g] distinct offsets in [0, span), uniformly over subsets.
    Result is grouped in order of g.
    """
    total = int(counts.sum())
    if span == 1:
        return np.zeros(total, dtype=np.int64)
    owner = np.repeat(np.arange(counts.size, dtype=np.int64), counts)
    offsets = rng.integers(0, span, size=total, dtype=np.int64)

    dense = counts > span // 2
    if dense.any():
        for g in np.flatnonzero(dense):
            sel = owner == g
            offsets[sel] = rng.choice(span, size=int(counts[g]), replace=False)

    # redraw collisions until every group's offsets are distinct
    while True:
        order = np.lexsort((offsets, owner))
        key_owner, key_off = owner[order], offsets[order]
        clash = np.flatnonzero((key_owner[1:] == key_owner[:-1]) & (key_off[1:] == key_off[:-1])) + 1
        if clash.size == 0:
            break
        redo = order[clash]
        offsets[redo] = rng.integers(0, span, size=redo.size, dtype=np.int64)
    return offsets


def generate_photons(
    intensity: IntensitySeries,
    mean_count_rate: float,
    rng: np.random.Generator | int,
    total_samples: Optional[int] = None,
    previous_tick: Optional[int] = None,
    gap_warning_fraction: float = 1e-3,
) -> PhotonEventStream:
    """
    Inhomogeneous Poisson photons from an intensity trace.

    Every 10 ns base sample emits a photon with probability min(1, I/mean * rate * 10 ns), the
    intensity being held over its own sample period. Within a sample the photon lands on a
    uniform tick, pushed later when needed to keep 8 ticks from the previous photon.

    Args:
        intensity (IntensitySeries): Trace (or a chunk of it, see start_sample).
        mean_count_rate (float): Counts per second at mean intensity.
        rng: Generator or seed.
        total_samples (int | None): Base samples in the whole run; photons beyond are dropped.
        previous_tick (int | None): Last photon of the preceding chunk.
        gap_warning_fraction (float): Fraction of clamped photons that triggers a warning.

    Returns:
        PhotonEventStream: Events of this chunk; duration runs to the end of the chunk.
    """
    if not isinstance(rng, np.random.Generator):
        _, rng = make_rngs(int(rng))
    if mean_count_rate < 0:
        raise PhysicsValidationError(f"count rate must be non-negative, got {mean_count_rate}")
    per_sample, rem = divmod(intensity.sample_period_ticks, TICKS_PER_SAMPLE)
    if rem or per_sample < 1:
        raise ConfigurationError(
            f"intensity sample period must be a whole number of 10 ns samples, got "
            f"{intensity.sample_period_ticks} ticks"
        )
    if mean_count_rate * ticks_to_seconds(1) > 0.1:
        logger.warning(f"Count rate {mean_count_rate:.3g} cps is high for 1.25 ns tick thinning")

    first_sample = intensity.start_sample * per_sample
    end_sample = first_sample + intensity.values.size * per_sample
    if total_samples is not None:
        end_sample = min(end_sample, total_samples)
    duration = end_sample * TICKS_PER_SAMPLE

    if intensity.mean_intensity > 0:
        relative = intensity.values / intensity.mean_intensity
    else:
        relative = np.zeros_like(intensity.values)
    prob = np.clip(relative * mean_count_rate * BASE_SAMPLE_SECONDS, 0.0, 1.0)
    counts = rng.binomial(per_sample, prob).astype(np.int64)

    offsets = _distinct_offsets(counts, per_sample, rng)
    owner = np.repeat(np.arange(counts.size, dtype=np.int64), counts)
    samples = np.sort(first_sample + owner * per_sample + offsets)
    samples = samples[samples < end_sample]

    if samples.size == 0:
        return PhotonEventStream(np.empty(0, dtype=np.int64), duration)

    raw = rng.integers(0, TICKS_PER_SAMPLE, size=samples.size, dtype=np.int64)
    # prepend the previous chunk's last photon so the clamp can see it
    if previous_tick is not None:
        samples = np.concatenate([[previous_tick // TICKS_PER_SAMPLE], samples])
        raw = np.concatenate([[previous_tick % TICKS_PER_SAMPLE], raw])
    run_id = np.cumsum(np.concatenate([[0], samples[1:] != samples[:-1] + 1]))
    shifted = run_id * TICKS_PER_SAMPLE + raw
    offset = np.maximum.accumulate(shifted) - run_id * TICKS_PER_SAMPLE
    if previous_tick is not None:
        samples, raw, offset = samples[1:], raw[1:], offset[1:]
    ticks = samples * TICKS_PER_SAMPLE + offset

    clamped = np.count_nonzero(offset != raw)
    if samples.size and clamped / samples.size > gap_warning_fraction:
        logger.warning(
            f"{clamped} of {samples.size} photons ({clamped / samples.size:.2%}) were moved to keep "
            f"the {MIN_GAP_TICKS}-tick pulse gap; the count rate is high for the detector model"
        )
    return PhotonEventStream(ticks, duration)


def iter_simulated_events(
    params: ExperimentParams,
    duration: float,
    seed: int,
    intensity_period: float = 1e-6,
    chunk_samples: int = 2**20,
) -> Iterator[np.ndarray]:
    """
    Simulate a full acquisition and yield photon ticks block by block (constant memory).
    """
    truth = ground_truth(params)
    field_rng, photon_rng = make_rngs(seed)
    total_samples = seconds_to_ticks(duration) // TICKS_PER_SAMPLE
    period_ticks = seconds_to_ticks(intensity_period)
    per_sample = period_ticks // TICKS_PER_SAMPLE
    if per_sample < 1 or period_ticks % TICKS_PER_SAMPLE:
        raise ConfigurationError(f"intensity period {intensity_period} s is not a multiple of 10 ns")
    num_intensity = -(-total_samples // per_sample)

    logger.info(
        f"Simulating {duration} s: d={params.particle_diameter * 1e9:.1f} nm, "
        f"theta={math.degrees(params.scattering_angle):.1f} deg, Gamma={truth.gamma:.4g} 1/s, "
        f"rate={params.mean_count_rate:.3g} cps, seed={seed}"
    )
    previous_tick = None
    for chunk in iter_intensity(
        truth,
        params.coherence_factor,
        1.0,
        ticks_to_seconds(period_ticks),
        num_intensity,
        field_rng,
        chunk_samples,
    ):
        photons = generate_photons(
            chunk, params.mean_count_rate, photon_rng, total_samples, previous_tick
        )
        if len(photons):
            previous_tick = int(photons.events[-1])
            yield photons.events


def simulate_stream(
    params: ExperimentParams,
    duration: float,
    seed: int,
    intensity_period: float = 1e-6,
) -> PhotonEventStream:
    """In-memory simulated acquisition of `duration` seconds."""
    blocks = list(iter_simulated_events(params, duration, seed, intensity_period))
    events = np.concatenate(blocks) if blocks else np.empty(0, dtype=np.int64)
    total_ticks = (seconds_to_ticks(duration) // TICKS_PER_SAMPLE) * TICKS_PER_SAMPLE
    return PhotonEventStream(events, total_ticks)


def grid_params(base: ExperimentParams) -> list[ExperimentParams]:
    """The 4 diameters x 4 angles measurement grid around `base`."""
    return [
        replace(base, particle_diameter=d, scattering_angle=math.radians(angle))
        for d in DEFAULT_DIAMETERS
        for angle in DEFAULT_ANGLES_DEG
    ]

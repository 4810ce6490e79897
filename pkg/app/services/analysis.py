"""
Single-exponential analysis of a correlogram: g(tau) = B + beta*exp(-Gamma*tau), then
Stokes-Einstein sizing from the fitted decay rate.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from joblib import Parallel, delayed
from scipy.constants import k as BOLTZMANN
from scipy.constants import pi
from scipy.optimize import least_squares

from app.errors import (InsufficientDataError, PhysicsValidationError,
                        RankDeficientFitError)
from app.models import (TICKS_PER_SAMPLE, CorrelatorConfig, Correlogram,
                        ExperimentParams, FitResult, SizeResult,
                        seconds_to_ticks)
from app.services.dls_sim import (grid_params, ground_truth,
                                  iter_simulated_events, scattering_vector)
from app.services.multitau import base_period_ticks, correlate_chunks
from app.services.photon_events import iter_sample_chunks

logger = logging.getLogger(__name__)

# 10 to 100 ns is warm-up time of the counting chain
DEFAULT_TAU_MIN = 100e-9
MIN_FIT_CHANNELS = 8
WEIGHT_POLICIES = ("uniform", "counts")


def model(tau: np.ndarray, B: float, beta: float, gamma: float) -> np.ndarray:
    return B + beta * np.exp(-gamma * np.asarray(tau, dtype=float))


def model_jacobian(tau: np.ndarray, B: float, beta: float, gamma: float) -> np.ndarray:
    """Partial derivatives of `model` with respect to (B, beta, Gamma), one row per lag."""
    tau = np.asarray(tau, dtype=float)
    decay = np.exp(-gamma * tau)
    return np.column_stack([np.ones_like(tau), decay, -beta * tau * decay])


def initial_guess(tau: np.ndarray, g: np.ndarray) -> tuple[float, float, float]:
    """
    Starting point for the fit.

    B is the mean over the last decade of lags, beta the excess at the first lag, and Gamma the
    negative slope of ln(g - B) over channels still above a tenth of beta.
    """
    tau = np.asarray(tau, dtype=float)
    g = np.asarray(g, dtype=float)
    tail = tau >= tau[-1] / 10
    B = float(np.mean(g[tail]))
    beta = float(g[0] - B)
    if not beta > 0:
        raise RankDeficientFitError("no decay above the baseline in the fit window")
    strong = (g - B) > 0.1 * beta
    if np.count_nonzero(strong) >= 2:
        slope, _ = np.polyfit(tau[strong], np.log(g[strong] - B), 1)
        gamma = -float(slope)
    else:
        gamma = math.nan
    if not gamma > 0:
        gamma = 1.0 / float(np.median(tau))
    return B, beta, gamma


def _weights(correlogram: Correlogram, mask: np.ndarray, policy: str) -> np.ndarray:
    if policy == "uniform":
        return np.ones(np.count_nonzero(mask))
    if policy == "counts":
        m = correlogram.update_counts[mask]
        return m / m.mean()
    raise ValueError(f"unknown weight policy {policy!r}; expected one of {WEIGHT_POLICIES}")


def fit_exponential(
    correlogram: Correlogram,
    tau_min: Optional[float] = None,
    tau_max: Optional[float] = None,
    weights: str = "uniform",
    max_iter: int = 200,
) -> FitResult:
    """
    Least-squares fit of B + beta*exp(-Gamma*tau) to the defined channels of a correlogram.

    Args:
        correlogram (Correlogram): Measured correlogram.
        tau_min (float | None): Lower lag bound, default 100 ns.
        tau_max (float | None): Upper lag bound, default 10 / Gamma_init.
        weights (str): "uniform" or "counts" (weight by update count M_j).
        max_iter (int): Function evaluation budget.

    Returns:
        FitResult: Best parameters found; `converged` is False when the budget ran out.

    Raises:
        InsufficientDataError: fewer than 8 usable channels.
        RankDeficientFitError: flat data, Gamma is unidentifiable.
    """
    tau_min = DEFAULT_TAU_MIN if tau_min is None else tau_min
    tau_all = correlogram.lags
    g_all = correlogram.g
    usable = correlogram.defined & np.isfinite(g_all) & (tau_all >= tau_min)
    if tau_max is not None:
        usable &= tau_all <= tau_max
    if np.count_nonzero(usable) < MIN_FIT_CHANNELS:
        raise InsufficientDataError(
            f"{np.count_nonzero(usable)} defined channels in the fit window; need {MIN_FIT_CHANNELS}"
        )
    if np.ptp(g_all[usable]) == 0:
        raise RankDeficientFitError("all channels in the fit window are equal; Gamma is unidentifiable")

    x0 = initial_guess(tau_all[usable], g_all[usable])
    if tau_max is None:
        tau_max = 10.0 / x0[2]
        window = usable & (tau_all <= tau_max)
        if np.count_nonzero(window) >= MIN_FIT_CHANNELS:
            usable = window
        else:
            tau_max = float(tau_all[usable].max())

    tau = tau_all[usable]
    g = g_all[usable]
    sqrt_w = np.sqrt(_weights(correlogram, usable, weights))

    def residuals(x):
        return sqrt_w * (model(tau, *x) - g)

    def jacobian(x):
        return sqrt_w[:, None] * model_jacobian(tau, *x)

    result = least_squares(
        residuals,
        np.asarray(x0, dtype=float),
        jac=jacobian,
        method="lm",
        x_scale="jac",
        xtol=1e-8,
        gtol=1e-10,
        ftol=1e-15,
        max_nfev=max_iter,
    )
    B, beta, gamma = (float(v) for v in result.x)
    converged = result.status in (1, 3, 4) or float(np.max(np.abs(result.grad))) < 1e-10
    if not (gamma > 0 and beta > 0):
        logger.warning(f"Fit left the physical region: beta={beta:.4g}, Gamma={gamma:.4g}")
        converged = False
    if not converged:
        logger.warning(f"Fit did not converge after {result.nfev} evaluations: {result.message}")
    logger.info(f"Fit: B={B:.6g} beta={beta:.6g} Gamma={gamma:.6g} 1/s over {tau.size} channels")
    return FitResult(
        B=B,
        beta=beta,
        gamma=gamma,
        residual_norm=float(np.linalg.norm(result.fun)),
        iterations=int(result.nfev),
        converged=converged,
        tau_min=float(tau_min),
        tau_max=float(tau_max),
        num_channels=int(tau.size),
        weights=weights,
    )


def size_from_decay(gamma: float, params: ExperimentParams, d_cert: Optional[float] = None) -> SizeResult:
    """
    Invert a decay rate: D = Gamma / (2 q^2), d = k_B*T / (3*pi*eta*D).
    """
    if not (math.isfinite(gamma) and gamma > 0):
        raise PhysicsValidationError(f"decay rate must be positive, got {gamma}")
    q = scattering_vector(params)
    diffusion = gamma / (2 * q**2)
    diameter = BOLTZMANN * params.temperature / (3 * pi * params.viscosity * diffusion)
    error = relative_error(diameter, d_cert) if d_cert is not None else None
    return SizeResult(D_exp=diffusion, d_exp=diameter, E_r=error)


def relative_error(d_exp: float, d_cert: float) -> float:
    """Deviation from the certified diameter, in percent."""
    if not d_cert > 0:
        raise PhysicsValidationError(f"certified diameter must be positive, got {d_cert}")
    return 100.0 * abs(d_exp - d_cert) / d_cert


def model_curve(fit: FitResult, tau: np.ndarray) -> np.ndarray:
    """Two columns (tau, model) for plotting."""
    tau = np.asarray(tau, dtype=float)
    return np.column_stack([tau, model(tau, fit.B, fit.beta, fit.gamma)])


def analyze(
    correlogram: Correlogram,
    params: ExperimentParams,
    d_cert: Optional[float] = None,
    **fit_options,
) -> tuple[FitResult, SizeResult]:
    fit = fit_exponential(correlogram, **fit_options)
    return fit, size_from_decay(fit.gamma, params, d_cert)


@dataclass(frozen=True)
class GridRow:
    diameter: float
    angle_deg: float
    gamma_true: float
    gamma_fit: float
    d_exp: float
    E_r: float
    converged: bool


def _grid_cell(
    params: ExperimentParams,
    duration: float,
    seed: int,
    config: CorrelatorConfig,
    intensity_period: float,
) -> GridRow:
    total_ticks = (seconds_to_ticks(duration) // TICKS_PER_SAMPLE) * TICKS_PER_SAMPLE
    events = iter_simulated_events(params, duration, seed, intensity_period)
    chunks = iter_sample_chunks(events, total_ticks, base_period_ticks(config), 2**24)
    correlogram = correlate_chunks(chunks, config)
    fit, size = analyze(correlogram, params, d_cert=params.particle_diameter)
    return GridRow(
        diameter=params.particle_diameter,
        angle_deg=math.degrees(params.scattering_angle),
        gamma_true=ground_truth(params).gamma,
        gamma_fit=fit.gamma,
        d_exp=size.d_exp,
        E_r=size.E_r,
        converged=fit.converged,
    )


def run_grid(
    base: ExperimentParams,
    duration: float,
    seed: int,
    config: Optional[CorrelatorConfig] = None,
    intensity_period: float = 1e-6,
    n_jobs: int = 1,
) -> list[GridRow]:
    """
    Simulate, correlate and size every diameter x angle pair of the measurement grid.

    Cell i is seeded with seed + i, so the result does not depend on n_jobs.
    """
    config = config or CorrelatorConfig()
    cells = grid_params(base)
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_grid_cell)(p, duration, seed + i, config, intensity_period)
        for i, p in enumerate(cells)
    )
    logger.info(f"Grid finished: mean E_r {np.mean([r.E_r for r in rows]):.2f}%")
    return list(rows)

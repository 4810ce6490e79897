import math
from dataclasses import replace

import numpy as np
import pytest

from app.errors import (InsufficientDataError, PhysicsValidationError,
                        RankDeficientFitError)
from app.models import (ChannelRecord, CorrelatorConfig, Correlogram,
                        ExperimentParams)
from app.services.analysis import (analyze, fit_exponential, initial_guess,
                                   model, model_curve, model_jacobian,
                                   relative_error, size_from_decay)
from app.services.dls_sim import ground_truth, simulate_stream
from app.services.multitau import correlate_stream


def synthetic_correlogram(values_at, config=None):
    """Correlogram on the configured lag grid with g given by `values_at(tau)`."""
    config = config or CorrelatorConfig()
    records = []
    lag_samples = config.lag_samples()
    k = 0
    for s in range(config.num_blocks):
        for delay in config.block_delays(s):
            lag = lag_samples[k] * config.base_sample_period
            records.append(
                ChannelRecord(
                    block=s,
                    delay=delay,
                    lag_samples=lag_samples[k],
                    lag=lag,
                    raw_sum=1,
                    direct_monitor=1,
                    delayed_monitor=1,
                    update_count=1000 + k,
                    g=float(values_at(lag)),
                )
            )
            k += 1
    return Correlogram(config, 10**9, tuple(records))


class TestModel:
    def test_jacobian_matches_finite_differences(self, rng):
        tau = np.array(CorrelatorConfig().lag_samples(), dtype=float) * 1e-8
        tau = tau[tau < 1.0]
        for _ in range(20):
            x = np.array([rng.uniform(0.5, 2), rng.uniform(0.1, 1), 10 ** rng.uniform(1, 5)])
            analytic = model_jacobian(tau, *x)
            numeric = np.empty_like(analytic)
            for i in range(3):
                h = 1e-6 * abs(x[i])
                up, down = x.copy(), x.copy()
                up[i] += h
                down[i] -= h
                numeric[:, i] = (model(tau, *up) - model(tau, *down)) / (2 * h)
            for i in range(3):
                scale = np.abs(analytic[:, i]).max()
                np.testing.assert_allclose(numeric[:, i], analytic[:, i], rtol=1e-6, atol=1e-6 * scale)

    def test_initial_guess(self):
        tau = np.logspace(-7, 1, 200)
        B, beta, gamma = initial_guess(tau, model(tau, 1.0, 0.8, 100.0))
        assert B == pytest.approx(1.0, abs=1e-9)
        assert beta == pytest.approx(0.8, rel=1e-3)
        assert gamma == pytest.approx(100.0, rel=0.05)


class TestFitExponential:
    def test_noiseless_recovery(self):
        correlogram = synthetic_correlogram(lambda tau: model(tau, 1.0, 0.8, 100.0))
        fit = fit_exponential(correlogram)
        assert fit.converged
        assert fit.B == pytest.approx(1.0, rel=1e-6)
        assert fit.beta == pytest.approx(0.8, rel=1e-6)
        assert fit.gamma == pytest.approx(100.0, rel=1e-6)
        assert fit.tau_min == pytest.approx(100e-9)
        assert math.isfinite(fit.residual_norm)

    def test_count_weights(self):
        correlogram = synthetic_correlogram(lambda tau: model(tau, 1.0, 0.5, 3e3))
        fit = fit_exponential(correlogram, weights="counts")
        assert fit.gamma == pytest.approx(3e3, rel=1e-6)
        assert fit.weights == "counts"

    def test_scale_equivariance(self):
        c = 3.0
        base = fit_exponential(synthetic_correlogram(lambda tau: model(tau, 1.0, 0.8, 500.0)))
        scaled = fit_exponential(synthetic_correlogram(lambda tau: c * model(tau, 1.0, 0.8, 500.0)))
        assert scaled.B == pytest.approx(c * base.B, rel=1e-6)
        assert scaled.beta == pytest.approx(c * base.beta, rel=1e-6)
        assert scaled.gamma == pytest.approx(base.gamma, rel=1e-6)

    def test_flat_data_is_rank_deficient(self):
        with pytest.raises(RankDeficientFitError):
            fit_exponential(synthetic_correlogram(lambda tau: 1.0))

    def test_narrow_window(self):
        correlogram = synthetic_correlogram(lambda tau: model(tau, 1.0, 0.8, 100.0))
        with pytest.raises(InsufficientDataError):
            fit_exponential(correlogram, tau_min=100e-9, tau_max=150e-9)

    def test_budget_exhausted(self, rng):
        noise = iter(rng.normal(0, 0.02, 288))
        correlogram = synthetic_correlogram(lambda tau: model(tau, 1.0, 0.8, 100.0) + next(noise))
        fit = fit_exponential(correlogram, tau_max=1.0, max_iter=1)
        assert not fit.converged
        assert math.isfinite(fit.gamma)

    def test_undefined_channels_are_skipped(self):
        correlogram = synthetic_correlogram(lambda tau: model(tau, 1.0, 0.8, 100.0))
        channels = list(correlogram.channels)
        for k in range(20, 40):
            channels[k] = replace(channels[k], g=None)
        fit = fit_exponential(Correlogram(correlogram.config, correlogram.total_samples, tuple(channels)))
        assert fit.gamma == pytest.approx(100.0, rel=1e-6)

    def test_model_curve(self):
        correlogram = synthetic_correlogram(lambda tau: model(tau, 1.0, 0.8, 100.0))
        fit = fit_exponential(correlogram)
        curve = model_curve(fit, correlogram.lags)
        assert curve.shape == (288, 2)
        np.testing.assert_allclose(curve[:, 1], correlogram.g, rtol=1e-6)


class TestSizing:
    def test_exact_inverse_of_ground_truth(self):
        params = ExperimentParams()
        size = size_from_decay(ground_truth(params).gamma, params)
        assert size.d_exp == pytest.approx(530e-9, rel=1e-12)
        assert size.E_r is None

    def test_doubling_gamma_halves_diameter(self):
        params = ExperimentParams()
        a = size_from_decay(100.0, params)
        b = size_from_decay(200.0, params)
        assert b.d_exp == pytest.approx(a.d_exp / 2, rel=1e-14)
        assert b.D_exp == pytest.approx(2 * a.D_exp, rel=1e-14)

    def test_non_positive_gamma(self):
        with pytest.raises(PhysicsValidationError):
            size_from_decay(0.0, ExperimentParams())

    @pytest.mark.parametrize(
        "d_exp, d_cert, expected",
        [(530, 530, 0.0), (545.9, 530, 3.0), (515, 530, 2.8302)],
    )
    def test_relative_error(self, d_exp, d_cert, expected):
        assert relative_error(d_exp, d_cert) == pytest.approx(expected, abs=1e-4)

    def test_relative_error_needs_positive_reference(self):
        with pytest.raises(PhysicsValidationError):
            relative_error(1.0, 0.0)


def test_simulated_pipeline_recovers_decay_rate():
    """A thin medium keeps the decay fast, so 0.2 s spans some 2e4 correlation times."""
    params = ExperimentParams(
        particle_diameter=240e-9, scattering_angle=math.radians(60), viscosity=0.89e-5
    )
    truth = ground_truth(params)
    stream = simulate_stream(params, 0.2, seed=12, intensity_period=1e-7)
    correlogram = correlate_stream(stream)
    fit, size = analyze(correlogram, params, d_cert=240e-9)
    assert fit.converged
    assert fit.gamma == pytest.approx(truth.gamma, rel=0.05)
    assert size.E_r <= 6.0

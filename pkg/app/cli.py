"""
Command-line entry point: simulate, correlate, fit, size, compare and grid.

Every output file starts with '#' provenance lines (version, seed, generator, correlator
configuration, input digest) and never with a wall-clock time, so the same flags always
produce byte-identical files.
"""

import argparse
import asyncio
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from app.errors import (FileFormatError, MultitauError,
                        NonConvergenceError, PhysicsValidationError)
from app.logs import configure_logging
from app.models import (TICKS_PER_SAMPLE, CorrelatorConfig, Correlogram,
                        ExperimentParams, FitResult, RunConfig,
                        seconds_to_ticks)
from app.services import package_version
from app.services.analysis import (WEIGHT_POLICIES, fit_exponential,
                                   model_curve, run_grid, size_from_decay)
from app.services.direct_corr import averaging_bias, bias_summary
from app.services.dls_sim import (GENERATOR_NAME, ground_truth,
                                  iter_simulated_events)
from app.services.multitau import base_period_ticks, correlate_event_blocks
from app.services.photon_events import bin_to_samples
from app.services.storage import FileStorage, params_from_mapping

logger = logging.getLogger(__name__)

EXIT_OK = 0
# OSError outside the parsers; the MultitauError classes carry their own codes
EXIT_IO = 7


def _env_int(name: str, default: int) -> int:
    return int(os.getenv(name, str(default)))


def _add_params_flags(parser: argparse.ArgumentParser, with_geometry: bool) -> None:
    group = parser.add_argument_group("experiment")
    if with_geometry:
        group.add_argument("--diameter", type=float, help="particle diameter, nm (default 530)")
        group.add_argument("--angle", type=float, help="scattering angle, degrees (default 30)")
        group.add_argument("--rate", type=float, help="mean count rate, counts/s (default 5e6)")
        group.add_argument("--beta", type=float, help="coherence factor in (0, 1] (default 1)")
    group.add_argument("--temperature", type=float, help="K (default 298.15)")
    group.add_argument("--viscosity", type=float, help="Pa*s (default 0.89e-3)")
    group.add_argument("--wavelength", type=float, help="vacuum wavelength, nm (default 532)")
    group.add_argument("--medium-index", type=float, help="refractive index of the medium (default 1.332)")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("correlator")
    group.add_argument("--blocks", type=int, default=35, help="number of blocks S")
    group.add_argument("--channels", type=int, default=8, help="channels per block P")
    group.add_argument("--first-channels", type=int, default=16, help="channels of block 0, P0")
    group.add_argument("--base-period", type=float, default=1e-8, help="base sample period, s")
    group.add_argument("--dilation", type=int, default=2, help="sample-time dilation n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multitau", description="Multi-tau photon correlator and DLS sizing")
    parser.add_argument("--log-level", default=None, help="overrides LOG_LEVEL")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    simulate = sub.add_parser("simulate", help="simulate a DLS photon stream")
    _add_params_flags(simulate, with_geometry=True)
    simulate.add_argument("--duration", type=float, default=1.0, help="acquisition time, s")
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--intensity-period", type=float, default=1e-6, help="intensity sample period, s")
    simulate.add_argument("--format", choices=("text", "binary"), default="text")
    simulate.add_argument("--out", required=True, help="timestamp file")
    simulate.add_argument("--truth", default=None, help="ground-truth sidecar (default <out>.truth)")

    correlate = sub.add_parser("correlate", help="correlate a timestamp file")
    correlate.add_argument("--in", dest="input", required=True)
    correlate.add_argument("--duration", type=float, default=None, help="override the header duration, s")
    correlate.add_argument("--out", required=True)
    correlate.add_argument("--snapshot-interval", type=float, default=None, help="stream seconds between snapshots")
    correlate.add_argument("--snapshot-dir", default=None, help="where snapshots go (default: next to --out)")
    _add_config_flags(correlate)

    fit = sub.add_parser("fit", help="fit B + beta*exp(-Gamma*tau) to a correlogram")
    fit.add_argument("--in", dest="input", required=True)
    fit.add_argument("--out", required=True)
    fit.add_argument("--tau-min", type=float, default=None)
    fit.add_argument("--tau-max", type=float, default=None)
    fit.add_argument("--weights", choices=WEIGHT_POLICIES, default="uniform")
    fit.add_argument("--max-iter", type=int, default=200)
    fit.add_argument("--curve", default=None, help="two-column model curve (default <out>.curve)")

    size = sub.add_parser("size", help="particle size from a fit report")
    size.add_argument("--fit", required=True, help="fit report")
    size.add_argument("--params", default=None, help="ground-truth sidecar with the experiment parameters")
    size.add_argument("--cert", type=float, default=None, help="certified diameter, nm")
    size.add_argument("--out", default=None, help="size report (default: stdout)")
    _add_params_flags(size, with_geometry=False)

    compare = sub.add_parser("compare", help="multi-tau averaging bias against the direct correlator")
    compare.add_argument("--in", dest="input", required=True)
    compare.add_argument("--max-block", type=int, default=6)
    compare.add_argument("--out", default=None, help="bias report (default: stdout)")
    _add_config_flags(compare)

    grid = sub.add_parser("grid", help="simulate and size the 4 diameters x 4 angles grid")
    grid.add_argument("--duration", type=float, default=60.0)
    grid.add_argument("--seed", type=int, default=0)
    grid.add_argument("--rate", type=float, default=5e5)
    grid.add_argument("--intensity-period", type=float, default=1e-6)
    grid.add_argument("--jobs", type=int, default=1)
    grid.add_argument("--out", required=True)
    return parser


def _params_from_args(args: argparse.Namespace, base: Optional[ExperimentParams] = None) -> ExperimentParams:
    overrides = {}
    if getattr(args, "diameter", None) is not None:
        overrides["particle_diameter"] = args.diameter * 1e-9
    if getattr(args, "angle", None) is not None:
        overrides["scattering_angle"] = math.radians(args.angle)
    if getattr(args, "rate", None) is not None:
        overrides["mean_count_rate"] = args.rate
    if getattr(args, "beta", None) is not None:
        overrides["coherence_factor"] = args.beta
    if args.temperature is not None:
        overrides["temperature"] = args.temperature
    if args.viscosity is not None:
        overrides["viscosity"] = args.viscosity
    if args.wavelength is not None:
        overrides["wavelength"] = args.wavelength * 1e-9
    if args.medium_index is not None:
        overrides["medium_refractive_index"] = args.medium_index
    return replace(base or ExperimentParams(), **overrides)


def _config_from_args(args: argparse.Namespace) -> CorrelatorConfig:
    return CorrelatorConfig(
        num_blocks=args.blocks,
        channels_per_block=args.channels,
        first_block_channels=args.first_channels,
        base_sample_period=args.base_period,
        dilation=args.dilation,
    )


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Collect the flags of one invocation; physics and geometry are validated here."""
    run = RunConfig(
        subcommand=args.subcommand,
        input_path=getattr(args, "input", None),
        output_path=getattr(args, "out", None),
        seed=getattr(args, "seed", 0),
        snapshot_interval=getattr(args, "snapshot_interval", None),
    )
    if args.subcommand == "simulate":
        run.params = _params_from_args(args)
    if args.subcommand in ("correlate", "compare"):
        run.correlator = _config_from_args(args)
    return run


def _config_provenance(config: CorrelatorConfig) -> dict:
    return {
        "blocks": config.num_blocks,
        "channels": config.channels_per_block,
        "first_channels": config.first_block_channels,
        "base_period": config.base_sample_period,
        "dilation": config.dilation,
    }


def _params_values(params: ExperimentParams) -> dict:
    return {name: getattr(params, name) for name in ExperimentParams.__dataclass_fields__}


async def cmd_simulate(run: RunConfig, args: argparse.Namespace, storage: FileStorage) -> int:
    if not (args.duration >= 0 and math.isfinite(args.duration)):
        raise PhysicsValidationError(f"duration must be non-negative, got {args.duration}")
    params = run.params
    truth = ground_truth(params)
    total_ticks = (seconds_to_ticks(args.duration) // TICKS_PER_SAMPLE) * TICKS_PER_SAMPLE
    provenance = {
        "version": package_version(),
        "generator": GENERATOR_NAME,
        "seed": run.seed,
        "intensity_period": args.intensity_period,
        **_params_values(params),
    }
    blocks = iter_simulated_events(
        params, args.duration, run.seed, args.intensity_period, _env_int("EVENT_CHUNK_SIZE", 2**20)
    )
    written = await storage.write_events(
        blocks, total_ticks, run.output_path, binary=args.format == "binary", provenance=provenance
    )
    sidecar = args.truth or str(Path(run.output_path).with_suffix(".truth"))
    await storage.write_key_values(
        {
            "q": truth.q,
            "D": truth.D,
            "gamma": truth.gamma,
            "seed": run.seed,
            "generator": GENERATOR_NAME,
            "duration": args.duration,
            "events": written,
            **_params_values(params),
        },
        sidecar,
        provenance={"version": package_version()},
    )
    logger.info(f"Simulated {written} events; ground truth in {sidecar}")
    return EXIT_OK


async def cmd_correlate(run: RunConfig, args: argparse.Namespace, storage: FileStorage) -> int:
    config = run.correlator
    duration, _, _ = await storage.read_event_header(run.input_path)
    if args.duration is not None:
        if not (args.duration >= 0 and math.isfinite(args.duration)):
            raise PhysicsValidationError(f"duration must be non-negative, got {args.duration}")
        duration = seconds_to_ticks(args.duration)

    snapshots: list[Correlogram] = []

    def on_snapshot(correlogram: Correlogram) -> None:
        logger.info(f"Snapshot at {correlogram.total_time:.3f} s of stream time")
        snapshots.append(correlogram)

    correlogram = await correlate_event_blocks(
        storage.iter_event_blocks(run.input_path, _env_int("EVENT_CHUNK_SIZE", 2**20), duration),
        duration,
        config,
        chunk_samples=_env_int("CORRELATOR_CHUNK_SAMPLES", 2**22),
        snapshot_every=run.snapshot_interval,
        on_snapshot=on_snapshot if run.snapshot_interval else None,
    )
    provenance = {
        "version": package_version(),
        "input": Path(run.input_path).name,
        "input_sha256": await storage.sha256_of(run.input_path),
        "duration_ticks": duration,
    }
    await storage.write_correlogram(correlogram, run.output_path, provenance)

    if snapshots:
        out = Path(run.output_path)
        folder = Path(args.snapshot_dir) if args.snapshot_dir else out.parent
        for k, snap in enumerate(snapshots, start=1):
            await storage.write_correlogram(
                snap, folder / f"{out.stem}.snapshot{k:04d}{out.suffix}", provenance
            )
    return EXIT_OK


async def cmd_fit(run: RunConfig, args: argparse.Namespace, storage: FileStorage) -> int:
    correlogram = await storage.read_correlogram(run.input_path)
    fit = fit_exponential(
        correlogram, tau_min=args.tau_min, tau_max=args.tau_max, weights=args.weights, max_iter=args.max_iter
    )
    provenance = {
        "version": package_version(),
        "input": Path(run.input_path).name,
        "input_sha256": await storage.sha256_of(run.input_path),
    }
    await storage.write_key_values(fit.as_dict(), run.output_path, provenance)
    curve = args.curve or str(Path(run.output_path).with_suffix(".curve"))
    await storage.write_table(("tau", "model"), model_curve(fit, correlogram.lags).tolist(), curve, provenance)
    if not fit.converged:
        raise NonConvergenceError(
            f"fit did not converge after {fit.iterations} evaluations; {run.output_path} holds the best parameters found"
        )
    return EXIT_OK


def _fit_from_report(values: dict[str, str]) -> FitResult:
    try:
        return FitResult(
            B=float(values["B"]),
            beta=float(values["beta"]),
            gamma=float(values["gamma"]),
            residual_norm=float(values.get("residual_norm", "nan")),
            iterations=int(values.get("iterations", "0")),
            converged=values.get("converged", "true") == "true",
        )
    except (KeyError, ValueError) as e:
        raise FileFormatError(f"fit report is missing or has a malformed entry: {e}")


async def cmd_size(run: RunConfig, args: argparse.Namespace, storage: FileStorage) -> int:
    fit = _fit_from_report(await storage.read_key_values(args.fit))
    base = ExperimentParams()
    if args.params:
        base = params_from_mapping(await storage.read_key_values(args.params))
    params = _params_from_args(args, base)
    d_cert = args.cert * 1e-9 if args.cert is not None else None
    size = size_from_decay(fit.gamma, params, d_cert)
    report = {"gamma": fit.gamma, **size.as_dict(), "d_cert": d_cert, **_params_values(params)}
    provenance = {"version": package_version(), "fit_sha256": await storage.sha256_of(args.fit)}
    if run.output_path:
        await storage.write_key_values(report, run.output_path, provenance)
    else:
        for key, value in report.items():
            print(f"{key}={value}")
    if not fit.converged:
        raise NonConvergenceError(f"{args.fit} reports an unconverged fit; the size was computed from it anyway")
    return EXIT_OK


async def cmd_compare(run: RunConfig, args: argparse.Namespace, storage: FileStorage) -> int:
    stream = await storage.read_stream(run.input_path)
    series = bin_to_samples(stream, base_period_ticks(run.correlator))
    rows = averaging_bias(series, run.correlator, args.max_block)
    summary = bias_summary(rows)
    table = [(r.block, r.delay, r.lag, r.g_multitau, r.g_direct, r.bias) for r in rows]
    columns = ("block", "delay", "lag_seconds", "g_multitau", "g_direct", "bias")
    footer = {f"mean_abs_bias_block{block}": value for block, value in summary.items()}
    if run.output_path:
        provenance = {
            "version": package_version(),
            "input": Path(run.input_path).name,
            "input_sha256": await storage.sha256_of(run.input_path),
            **_config_provenance(run.correlator),
        }
        await storage.write_table(columns, table, run.output_path, provenance, footer)
    else:
        print("# " + " ".join(columns))
        for row in table:
            print(" ".join(str(v) for v in row))
        for key, value in footer.items():
            print(f"# {key}={value}")
    return EXIT_OK


async def cmd_grid(run: RunConfig, args: argparse.Namespace, storage: FileStorage) -> int:
    base = ExperimentParams(mean_count_rate=args.rate)
    rows = await asyncio.to_thread(
        run_grid, base, args.duration, run.seed, None, args.intensity_period, args.jobs
    )
    columns = ("diameter_nm", "angle_deg", "gamma_true", "gamma_fit", "d_exp_nm", "E_r", "converged")
    table = [
        (r.diameter * 1e9, r.angle_deg, r.gamma_true, r.gamma_fit, r.d_exp * 1e9, r.E_r, r.converged)
        for r in rows
    ]
    mean_error = sum(r.E_r for r in rows) / len(rows)
    provenance = {
        "version": package_version(),
        "generator": GENERATOR_NAME,
        "seed": run.seed,
        "duration": args.duration,
        "rate": args.rate,
        "intensity_period": args.intensity_period,
    }
    await storage.write_table(columns, table, run.output_path, provenance, {"mean_E_r": mean_error})
    failed = [r for r in rows if not r.converged]
    if failed:
        raise NonConvergenceError(f"{len(failed)} of {len(rows)} grid cells did not converge; see {run.output_path}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "correlate": cmd_correlate,
    "fit": cmd_fit,
    "size": cmd_size,
    "compare": cmd_compare,
    "grid": cmd_grid,
}


def main(argv: Optional[list[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    storage = FileStorage(".")
    try:
        run = build_run_config(args)
        return asyncio.run(COMMANDS[run.subcommand](run, args, storage))
    except MultitauError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

import logging
import time
import uuid
from typing import Annotated, Optional

from fastapi import APIRouter, File, Query, UploadFile

from app.controllers.utils.responses import (as_http_error, response400,
                                             response422)
from app.dependencies import (ChunkSamples, EventChunkSize, FileStorage,
                              ProgressReporter)
from app.errors import MultitauError
from app.models import CorrelatorConfig, seconds_to_ticks
from app.schemas import ChannelOut, CorrelogramOut, LagEntryOut, ScheduleOut
from app.services import hash_bytes_sha256
from app.services.multitau import correlate_event_blocks, lag_schedule

logger = logging.getLogger(__name__)

router = APIRouter(
    tags=["correlator"],
    responses={400: response400, 422: response422},
)


def _config(blocks: int, channels: int, first_channels: int, base_period: float, dilation: int) -> CorrelatorConfig:
    return CorrelatorConfig(
        num_blocks=blocks,
        channels_per_block=channels,
        first_block_channels=first_channels,
        base_sample_period=base_period,
        dilation=dilation,
    )


@router.get(
    "/schedule",
    response_model=ScheduleOut,
    summary="Lag schedule",
    description="Lag of every correlation channel for the given correlator geometry.",
)
async def get_schedule(
    blocks: Annotated[int, Query(ge=1, description="Number of blocks S")] = 35,
    channels: Annotated[int, Query(ge=1, description="Channels per block P")] = 8,
    first_channels: Annotated[int, Query(ge=1, description="Channels of block 0")] = 16,
    base_period: Annotated[float, Query(gt=0, description="Base sample period, s")] = 1e-8,
    dilation: Annotated[int, Query(ge=2, description="Sample-time dilation")] = 2,
) -> ScheduleOut:
    try:
        config = _config(blocks, channels, first_channels, base_period, dilation)
    except MultitauError as e:
        raise as_http_error(e)
    schedule = lag_schedule(config)
    return ScheduleOut(
        total_channels=config.total_channels,
        first_lag=schedule[0].lag,
        last_lag=schedule[-1].lag,
        last_block_period=config.block_period(config.num_blocks - 1),
        schedule=[LagEntryOut(**entry._asdict()) for entry in schedule],
    )


@router.post(
    "/correlate",
    response_model=CorrelogramOut,
    summary="Correlate a timestamp file",
    description="Runs a full acquisition over an uploaded timestamp file (text or binary) "
    "and returns the final correlogram.",
)
async def correlate(
    file: Annotated[UploadFile, File(..., description="Timestamp file")],
    storage: FileStorage,
    progress: ProgressReporter,
    event_chunk_size: EventChunkSize,
    chunk_samples: ChunkSamples,
    duration: Annotated[Optional[float], Query(ge=0, description="Override the header duration, s")] = None,
    blocks: Annotated[int, Query(ge=1)] = 35,
    channels: Annotated[int, Query(ge=1)] = 8,
    first_channels: Annotated[int, Query(ge=1)] = 16,
    base_period: Annotated[float, Query(gt=0)] = 1e-8,
    dilation: Annotated[int, Query(ge=2)] = 2,
) -> CorrelogramOut:
    """
    Store the upload under its digest, stream it through the correlator, then delete it.

    Args:
        file: Timestamp file in the text or binary layout.
        storage: Storage service dependency.
        progress: Run statistics.
        duration: Observation window override in seconds.

    Returns:
        CorrelogramOut: Every channel with its integer accumulators and normalized value.
    """
    contents = await file.read()
    digest = hash_bytes_sha256(contents)
    logger.info(f"Correlation requested - File: {file.filename}, sha256: {digest[:12]}")
    path = await storage.save_bytes_by_path(contents, f"uploads/{digest}-{uuid.uuid4().hex[:8]}")

    started = time.perf_counter()
    try:
        config = _config(blocks, channels, first_channels, base_period, dilation)
        header_duration, _, _ = await storage.read_event_header(path)
        window = header_duration if duration is None else seconds_to_ticks(duration)
        correlogram = await correlate_event_blocks(
            storage.iter_event_blocks(path, event_chunk_size, window),
            window,
            config,
            chunk_samples=chunk_samples,
        )
    except MultitauError as e:
        raise as_http_error(e)
    finally:
        # uploads are kept only for the duration of the run
        await storage.delete_file_by_path(path)
    progress.run_processed(time.perf_counter() - started, correlogram.total_samples)

    return CorrelogramOut(
        digest=digest,
        total_samples=correlogram.total_samples,
        total_time=correlogram.total_time,
        channels=[ChannelOut.model_validate(c) for c in correlogram.channels],
    )

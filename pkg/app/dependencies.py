import os
from typing import Annotated

from fastapi import Depends

from app.services.progress import ProgressReporter
from app.services.storage import FileStorage

# one reporter per process; the service keeps no external cache
progress_reporter = ProgressReporter()


def get_storage_service() -> FileStorage:
    return FileStorage(os.getenv("STORAGE_FOLDER", "./storage"))


def get_progress_reporter() -> ProgressReporter:
    return progress_reporter


def get_event_chunk_size() -> int:
    return int(os.getenv("EVENT_CHUNK_SIZE", str(2**20)))


def get_chunk_samples() -> int:
    return int(os.getenv("CORRELATOR_CHUNK_SAMPLES", str(2**22)))


FileStorage = Annotated[FileStorage, Depends(get_storage_service)]
ProgressReporter = Annotated[ProgressReporter, Depends(get_progress_reporter)]
EventChunkSize = Annotated[int, Depends(get_event_chunk_size)]
ChunkSamples = Annotated[int, Depends(get_chunk_samples)]

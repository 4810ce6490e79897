from fastapi import APIRouter

from app.dependencies import ProgressReporter
from app.schemas import MetricsOut

router = APIRouter(
    prefix="/metrics",
    tags=["metrics"],
)


@router.get(
    "",
    response_model=MetricsOut,
    summary="Get Metrics",
    description="Correlation runs served by this process and their processing times.",
    responses={
        200: {
            "description": "Metrics retrieved successfully",
            "content": {
                "application/json": {
                    "example": {
                        "runs_processed": 3,
                        "samples_processed": 300000000,
                        "min_processing_time": 0.8,
                        "max_processing_time": 2.5,
                        "average_processing_time": 1.4,
                        "last_processing_time": 0.9,
                        "total_processing_time": 4.2,
                        "latest_run_timestamp": "2026-10-01 12:00:00",
                        "runs_processed_last_24h": 3,
                    }
                }
            },
        },
    },
)
async def get_metrics(progress: ProgressReporter):
    return progress.get_metrics()

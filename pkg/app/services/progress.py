import time
from dataclasses import dataclass, field
from typing import Optional


@dataclass
class ProgressReporter:
    """
    In-process run statistics: how many correlation runs finished, how many base samples they
    covered and how long they took.
    """

    runs_processed: int = 0
    samples_processed: int = 0
    min_processing_time: Optional[float] = None
    max_processing_time: float = 0.0
    total_processing_time: float = 0.0
    last_processing_time: float = 0.0
    latest_run_timestamp: Optional[str] = None
    _history: list[float] = field(default_factory=list, repr=False)

    def run_processed(self, time_taken: float, samples: int = 0) -> None:
        self.runs_processed += 1
        self.samples_processed += samples
        if self.min_processing_time is None or time_taken < self.min_processing_time:
            self.min_processing_time = time_taken
        self.max_processing_time = max(self.max_processing_time, time_taken)
        self.total_processing_time += time_taken
        self.last_processing_time = time_taken

        now = time.time()
        self.latest_run_timestamp = time.strftime("%Y-%m-%d %H:%M:%S", time.localtime(now))
        # keep only the last 24h
        self._history = [ts for ts in self._history if ts > now - 86400]
        self._history.append(now)

    @property
    def average_processing_time(self) -> float:
        return self.total_processing_time / self.runs_processed if self.runs_processed else 0.0

    def get_metrics(self) -> dict:
        one_day_ago = time.time() - 86400
        return {
            "runs_processed": self.runs_processed,
            "samples_processed": self.samples_processed,
            "min_processing_time": self.min_processing_time,
            "max_processing_time": self.max_processing_time,
            "average_processing_time": self.average_processing_time,
            "last_processing_time": self.last_processing_time,
            "total_processing_time": self.total_processing_time,
            "latest_run_timestamp": self.latest_run_timestamp or "N/A",
            "runs_processed_last_24h": len([ts for ts in self._history if ts > one_day_ago]),
        }

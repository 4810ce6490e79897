import math
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class LagEntryOut(BaseModel):
    block: int
    channel: int
    lag: float


class ScheduleOut(BaseModel):
    total_channels: int
    first_lag: float
    last_lag: float
    last_block_period: float
    schedule: list[LagEntryOut]


class ChannelOut(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    block: int
    delay: int
    lag: float
    raw_sum: int
    direct_monitor: int
    delayed_monitor: int
    update_count: int
    g: Optional[float] = Field(None, description="null when the channel is undefined")


class CorrelogramOut(BaseModel):
    digest: str
    total_samples: int
    total_time: float
    channels: list[ChannelOut]


class FitOut(BaseModel):
    B: float
    beta: float
    gamma: float
    residual_norm: float
    iterations: int
    converged: bool
    tau_min: float
    tau_max: float
    num_channels: int
    weights: str


class SizeIn(BaseModel):
    """Decay rate plus experiment parameters; SI units, angle in degrees."""

    gamma: float = Field(..., gt=0)
    temperature: float = Field(298.15, gt=0)
    viscosity: float = Field(0.89e-3, gt=0)
    wavelength: float = Field(532e-9, gt=0)
    medium_refractive_index: float = Field(1.332, gt=0)
    scattering_angle_deg: float = Field(30.0, gt=0, lt=180)
    d_cert: Optional[float] = Field(None, gt=0)

    @property
    def scattering_angle(self) -> float:
        return math.radians(self.scattering_angle_deg)


class SizeOut(BaseModel):
    D_exp: float
    d_exp: float
    E_r: Optional[float] = None


class MetricsOut(BaseModel):
    runs_processed: int
    samples_processed: int
    min_processing_time: Optional[float]
    max_processing_time: float
    average_processing_time: float
    last_processing_time: float
    total_processing_time: float
    latest_run_timestamp: str
    runs_processed_last_24h: int

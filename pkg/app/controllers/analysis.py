import logging
from typing import Annotated, Optional

from fastapi import APIRouter, File, HTTPException, Query, UploadFile

from app.controllers.utils.responses import (as_http_error, response400,
                                             response422)
from app.errors import MultitauError
from app.models import ExperimentParams
from app.schemas import FitOut, SizeIn, SizeOut
from app.services.analysis import (WEIGHT_POLICIES, fit_exponential,
                                   size_from_decay)
from app.services.storage import correlogram_from_text

logger = logging.getLogger(__name__)

router = APIRouter(
    tags=["analysis"],
    responses={400: response400, 422: response422},
)


@router.post(
    "/fit",
    response_model=FitOut,
    summary="Fit a correlogram",
    description="Least-squares fit of B + beta*exp(-Gamma*tau) to an uploaded correlogram table.",
)
async def fit(
    file: Annotated[UploadFile, File(..., description="Correlogram table")],
    tau_min: Annotated[Optional[float], Query(gt=0, description="Lower lag bound, s")] = None,
    tau_max: Annotated[Optional[float], Query(gt=0, description="Upper lag bound, s")] = None,
    weights: Annotated[str, Query(description="uniform or counts")] = "uniform",
) -> FitOut:
    if weights not in WEIGHT_POLICIES:
        raise HTTPException(status_code=422, detail=f"weights must be one of {WEIGHT_POLICIES}")
    try:
        text = (await file.read()).decode("utf-8")
    except UnicodeDecodeError:
        raise HTTPException(status_code=400, detail="Invalid file encoding. Please upload a text correlogram.")
    try:
        correlogram = correlogram_from_text(text, file.filename)
        result = fit_exponential(correlogram, tau_min=tau_min, tau_max=tau_max, weights=weights)
    except MultitauError as e:
        raise as_http_error(e)
    return FitOut(**result.as_dict())


@router.post(
    "/size",
    response_model=SizeOut,
    summary="Size from a decay rate",
    description="Stokes-Einstein diameter for a fitted decay rate.",
)
async def size(body: SizeIn) -> SizeOut:
    try:
        params = ExperimentParams(
            temperature=body.temperature,
            viscosity=body.viscosity,
            wavelength=body.wavelength,
            medium_refractive_index=body.medium_refractive_index,
            scattering_angle=body.scattering_angle,
        )
        result = size_from_decay(body.gamma, params, body.d_cert)
    except MultitauError as e:
        raise as_http_error(e)
    return SizeOut(**result.as_dict())

import logging

from fastapi import HTTPException

from app.errors import MultitauError

logger = logging.getLogger(__name__)

response400 = {
    "description": "Input rejected by the correlator or the analysis",
    "content": {
        "application/json": {
            "example": {"detail": "upload.txt:3: expected an unsigned tick value, got 'abc'"}
        }
    },
}

response422 = {
    "description": "Request parameters failed validation",
    "content": {"application/json": {"example": {"detail": [{"loc": ["query", "blocks"], "msg": "..."}]}}},
}


def as_http_error(error: MultitauError) -> HTTPException:
    logger.warning(f"Request rejected - {type(error).__name__}: {error.message}")
    return HTTPException(status_code=400, detail=error.message)

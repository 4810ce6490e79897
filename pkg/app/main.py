import logging
import os
from contextlib import asynccontextmanager

from dotenv import load_dotenv
from fastapi import FastAPI, Request

from app.controllers.analysis import router as analysis_router
from app.controllers.correlator import router as correlator_router
from app.controllers.metrics import router as metrics_router
from app.logs import configure_logging
from app.services import package_version

load_dotenv()


@asynccontextmanager
async def lifespan(app: FastAPI):
    configure_logging()
    logging.info("Readout service starting up")
    yield
    logging.info("Readout service shutting down")


app = FastAPI(
    lifespan=lifespan,
    title="Multi-tau correlator readout",
    description="Correlate photon timestamp files, fit decay rates and size particles.",
    version=package_version(),
)

app.include_router(correlator_router)
app.include_router(analysis_router)
app.include_router(metrics_router)


@app.get("/")
async def index(request: Request):
    if os.getenv("ENV") == "development":
        from starlette.responses import RedirectResponse

        return RedirectResponse(url="/docs")
    return None


@app.get("/status")
async def status(request: Request):
    return {"status": "ok"}


@app.get("/version")
async def version(request: Request):
    return {"version": package_version()}

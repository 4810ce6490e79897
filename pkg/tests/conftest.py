import numpy as np
import pytest
from httpx import ASGITransport, AsyncClient

from app.dependencies import get_progress_reporter, get_storage_service
from app.main import app
from app.models import CorrelatorConfig
from app.services.progress import ProgressReporter
from app.services.storage import FileStorage


@pytest.fixture
def rng():
    """Seeded generator so every test sees the same random data."""
    return np.random.default_rng(20240601)


@pytest.fixture
def config():
    return CorrelatorConfig()


@pytest.fixture
def storage(tmp_path):
    return FileStorage(str(tmp_path))


@pytest.fixture(scope="function")
def progress():
    return ProgressReporter()


@pytest.fixture(scope="function", autouse=True)
def override_deps(tmp_path, progress):
    """
    Point the readout service at a temporary upload folder and a fresh reporter.
    """
    app.dependency_overrides[get_storage_service] = lambda: FileStorage(str(tmp_path / "uploads"))
    app.dependency_overrides[get_progress_reporter] = lambda: progress

    yield

    app.dependency_overrides.clear()


@pytest.fixture(scope="function")
async def client():
    async with AsyncClient(
        transport=ASGITransport(app=app), base_url="http://testserver"
    ) as ac:
        yield ac

import io

import numpy as np
import pytest

from app.models import PhotonEventStream
from app.services.multitau import correlate_stream
from app.services.storage import BINARY_HEADER


def timestamp_text(events, duration):
    body = "".join(f"{t}\n" for t in events)
    return f"# ticks=1.25ns duration={duration}\n{body}".encode("ascii")


async def upload(client, contents, name="events.txt", **params):
    files = {"file": (name, io.BytesIO(contents), "application/octet-stream")}
    return await client.post("/correlate", files=files, params=params)


class TestScheduleController:
    async def test_default_schedule(self, client):
        response = await client.get("/schedule")
        assert response.status_code == 200
        data = response.json()
        assert data["total_channels"] == 288
        assert len(data["schedule"]) == 288
        assert data["first_lag"] == pytest.approx(1e-8)
        assert data["last_lag"] == pytest.approx(2**38 * 1e-8)
        assert data["last_block_period"] == pytest.approx(2**34 * 1e-8)
        assert data["schedule"][16] == {"block": 1, "channel": 0, "lag": pytest.approx(18e-8)}

    async def test_custom_geometry(self, client):
        response = await client.get("/schedule", params={"blocks": 3, "channels": 4, "first_channels": 8})
        assert response.status_code == 200
        assert response.json()["total_channels"] == 16

    async def test_misaligned_geometry(self, client):
        response = await client.get("/schedule", params={"dilation": 3})
        assert response.status_code == 400
        assert "sample period" in response.json()["detail"]

    async def test_parameter_validation(self, client):
        response = await client.get("/schedule", params={"blocks": 0})
        assert response.status_code == 422


class TestCorrelateController:
    @pytest.fixture
    def stream(self, rng):
        events = np.cumsum(rng.integers(8, 200, 3000)).astype(np.int64)
        return PhotonEventStream(events, int(events[-1]) + 8)

    async def test_matches_library(self, client, stream):
        response = await upload(client, timestamp_text(stream.events.tolist(), stream.duration))
        assert response.status_code == 200
        data = response.json()
        expected = correlate_stream(stream)
        assert data["total_samples"] == expected.total_samples
        assert len(data["channels"]) == 288
        for got, want in zip(data["channels"], expected.channels):
            assert got["raw_sum"] == want.raw_sum
            assert got["update_count"] == want.update_count
            assert got["g"] == (None if want.g is None else pytest.approx(want.g, rel=1e-15))

    async def test_binary_upload(self, client, stream):
        contents = BINARY_HEADER.pack(b"PHOT", 1, stream.duration) + stream.events.astype("<u8").tobytes()
        text = await upload(client, timestamp_text(stream.events.tolist(), stream.duration))
        binary = await upload(client, contents, name="events.bin")
        assert binary.status_code == 200
        assert binary.json()["channels"] == text.json()["channels"]

    async def test_duration_override(self, client):
        response = await upload(client, timestamp_text([], 0), duration=1e-6)
        assert response.status_code == 200
        data = response.json()
        assert data["total_samples"] == 100
        assert all(c["g"] is None for c in data["channels"])

    async def test_malformed_upload(self, client):
        response = await upload(client, b"# ticks=1.25ns duration=1000\n0\nabc\n")
        assert response.status_code == 400
        assert ":3:" in response.json()["detail"]

    async def test_gap_violation(self, client):
        response = await upload(client, timestamp_text([0, 4], 100))
        assert response.status_code == 400

    async def test_metrics_count_runs(self, client, stream, progress):
        await upload(client, timestamp_text(stream.events.tolist(), stream.duration))
        await upload(client, timestamp_text(stream.events.tolist(), stream.duration))
        response = await client.get("/metrics")
        data = response.json()
        assert data["runs_processed"] == 2
        assert data["samples_processed"] == 2 * correlate_stream(stream).total_samples
        assert data["runs_processed_last_24h"] == 2
        assert data["latest_run_timestamp"] != "N/A"
        assert progress.runs_processed == 2

    async def test_uploads_are_removed(self, client, stream, tmp_path):
        await upload(client, timestamp_text(stream.events.tolist(), stream.duration))
        await upload(client, b"# ticks=1.25ns duration=1000\n0\nabc\n")
        assert list((tmp_path / "uploads" / "uploads").iterdir()) == []

import hashlib

import numpy as np
import pytest

from app.errors import FileFormatError
from app.models import ExperimentParams, PhotonEventStream
from app.services.multitau import correlate_stream
from app.services.storage import (BINARY_HEADER, correlogram_from_text,
                                  correlogram_to_text, format_value,
                                  params_from_mapping, parse_key_values)


def random_stream(rng, n=5000):
    events = np.cumsum(rng.integers(8, 400, n)).astype(np.int64)
    return PhotonEventStream(events, int(events[-1]) + 123)


class TestTimestampFiles:
    @pytest.mark.parametrize("binary", [False, True])
    async def test_write_and_read_back(self, storage, rng, binary):
        stream = random_stream(rng)
        written = await storage.write_stream(stream, "events.dat", binary=binary, provenance={"seed": 7})
        assert written == len(stream)
        restored = await storage.read_stream("events.dat")
        assert restored == stream

    async def test_text_layout(self, storage):
        stream = PhotonEventStream(np.array([0, 8, 100], dtype=np.int64), 200)
        await storage.write_stream(stream, "events.txt", provenance={"seed": 1})
        text = (await storage.get_file_by_path("events.txt")).decode()
        assert text == "# ticks=1.25ns duration=200\n# seed=1\n0\n8\n100\n"

    async def test_binary_layout(self, storage):
        stream = PhotonEventStream(np.array([3, 11], dtype=np.int64), 16)
        await storage.write_stream(stream, "events.bin", binary=True)
        data = await storage.get_file_by_path("events.bin")
        assert len(data) == BINARY_HEADER.size + 16
        assert data[:4] == b"PHOT"
        assert np.frombuffer(data[BINARY_HEADER.size:], dtype="<u8").tolist() == [3, 11]

    async def test_empty_stream(self, storage):
        await storage.write_stream(PhotonEventStream(np.empty(0, dtype=np.int64), 0), "empty.txt")
        restored = await storage.read_stream("empty.txt")
        assert len(restored) == 0
        assert restored.duration == 0

    async def test_blocks_are_bounded(self, storage, rng):
        stream = random_stream(rng, 1000)
        await storage.write_stream(stream, "events.txt")
        blocks = [b async for b in storage.iter_event_blocks("events.txt", block_size=64)]
        assert max(b.size for b in blocks) <= 64
        np.testing.assert_array_equal(np.concatenate(blocks), stream.events)

    async def test_missing_header(self, storage):
        await storage.save_text_by_path("0\n8\n", "bad.txt")
        with pytest.raises(FileFormatError, match="header"):
            await storage.read_stream("bad.txt")

    async def test_wrong_tick_unit(self, storage):
        await storage.save_text_by_path("# ticks=1ns duration=100\n0\n", "bad.txt")
        with pytest.raises(FileFormatError):
            await storage.read_stream("bad.txt")

    async def test_malformed_line_reports_line_number(self, storage):
        await storage.save_text_by_path("# ticks=1.25ns duration=1000\n0\n16\nabc\n40\n", "bad.txt")
        with pytest.raises(FileFormatError) as exc:
            await storage.read_stream("bad.txt")
        assert exc.value.line == 4
        assert exc.value.exit_code == 2
        assert ":4:" in str(exc.value)

    async def test_negative_tick_is_malformed(self, storage):
        await storage.save_text_by_path("# ticks=1.25ns duration=1000\n-8\n", "bad.txt")
        with pytest.raises(FileFormatError) as exc:
            await storage.read_stream("bad.txt")
        assert exc.value.line == 2

    async def test_gap_violation(self, storage):
        await storage.save_text_by_path("# ticks=1.25ns duration=1000\n0\n5\n", "bad.txt")
        with pytest.raises(FileFormatError, match="at least 8 ticks") as exc:
            await storage.read_stream("bad.txt")
        assert exc.value.line == 3

    async def test_gap_violation_across_blocks(self, storage):
        await storage.save_text_by_path("# ticks=1.25ns duration=1000\n0\n16\n20\n", "bad.txt")
        with pytest.raises(FileFormatError) as exc:
            [b async for b in storage.iter_event_blocks("bad.txt", block_size=2)]
        assert exc.value.line == 4

    async def test_event_outside_duration(self, storage):
        await storage.save_text_by_path("# ticks=1.25ns duration=10\n0\n16\n", "bad.txt")
        with pytest.raises(FileFormatError, match="outside"):
            await storage.read_stream("bad.txt")

    async def test_truncated_binary(self, storage):
        data = BINARY_HEADER.pack(b"PHOT", 1, 100) + b"\x00" * 12
        await storage.save_bytes_by_path(data, "bad.bin")
        with pytest.raises(FileFormatError, match="truncated"):
            await storage.read_stream("bad.bin")

    async def test_missing_file(self, storage):
        with pytest.raises(FileFormatError, match="no such file"):
            await storage.read_stream("nope.txt")

    async def test_sha256(self, storage):
        await storage.save_bytes_by_path(b"photons", "x.bin")
        assert await storage.sha256_of("x.bin") == hashlib.sha256(b"photons").hexdigest()


class TestCorrelogramFiles:
    async def test_round_trip(self, storage, rng):
        correlogram = correlate_stream(random_stream(rng))
        await storage.write_correlogram(correlogram, "c.txt", provenance={"version": "1.0.0"})
        assert await storage.read_correlogram("c.txt") == correlogram

    def test_undefined_channels_are_nan(self, rng):
        correlogram = correlate_stream(random_stream(rng, 50))
        text = correlogram_to_text(correlogram)
        assert " nan " in text
        restored = correlogram_from_text(text)
        assert restored.defined.tolist() == correlogram.defined.tolist()

    def test_row_count_must_match_config(self, rng):
        text = correlogram_to_text(correlate_stream(random_stream(rng, 50)))
        truncated = "\n".join(text.splitlines()[:-1]) + "\n"
        with pytest.raises(FileFormatError, match="channel rows"):
            correlogram_from_text(truncated, "c.txt")

    def test_malformed_row(self, rng):
        lines = correlogram_to_text(correlate_stream(random_stream(rng, 50))).splitlines()
        header = sum(1 for line in lines if line.startswith("#"))
        lines[header] = "1e-08 1.0 x 1 1 1"
        with pytest.raises(FileFormatError) as exc:
            correlogram_from_text("\n".join(lines), "c.txt")
        assert exc.value.line == header + 1


class TestKeyValues:
    async def test_reports_round_trip(self, storage):
        await storage.write_key_values(
            {"gamma": 123.5, "converged": True, "E_r": None, "iterations": 7},
            "fit.txt",
            provenance={"input": "c.txt"},
        )
        values = await storage.read_key_values("fit.txt")
        assert values == {"gamma": "123.5", "converged": "true", "E_r": "none", "iterations": "7"}

    async def test_malformed_report_line(self, storage):
        await storage.save_text_by_path("gamma=1\nbroken\n", "fit.txt")
        with pytest.raises(FileFormatError) as exc:
            await storage.read_key_values("fit.txt")
        assert exc.value.line == 2

    def test_parse_key_values(self):
        assert parse_key_values("# ticks=1.25ns duration=80") == {"ticks": "1.25ns", "duration": "80"}

    def test_float_formatting_is_exact(self):
        value = 0.1 + 0.2
        assert float(format_value(value)) == value

    def test_params_from_mapping(self):
        params = params_from_mapping({"particle_diameter": "2.4e-07", "seed": "4"})
        assert params.particle_diameter == 2.4e-7
        assert params.temperature == ExperimentParams().temperature

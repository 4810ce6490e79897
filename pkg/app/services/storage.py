import hashlib
import logging
import math
import os
import struct
from pathlib import Path
from typing import AsyncIterator, Iterable, Mapping, Optional, Union

import aiofiles
import numpy as np

from app.errors import FileFormatError
from app.models import (MAX_TICK, MIN_GAP_TICKS, ChannelRecord,
                        CorrelatorConfig, Correlogram, ExperimentParams,
                        PhotonEventStream)
from app.services.multitau import normalize_symmetric

logger = logging.getLogger(__name__)

BINARY_MAGIC = b"PHOT"
BINARY_VERSION = 1
# magic, version (uint32), duration (uint64)
BINARY_HEADER = struct.Struct("<4sIQ")
TEXT_HEADER = "# ticks=1.25ns duration={duration}"
CORRELOGRAM_COLUMNS = "lag_seconds g raw_sum direct_monitor delayed_monitor update_count"

_READ_SIZE = 1 << 20


def format_value(value) -> str:
    """Render a header/report value so that it parses back to the same number."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def parse_key_values(text: str) -> dict[str, str]:
    """Collect `key=value` tokens; leading '#' markers are ignored."""
    pairs: dict[str, str] = {}
    for token in text.replace("#", " ").split():
        if "=" in token:
            key, _, value = token.partition("=")
            pairs[key] = value
    return pairs


def params_from_mapping(values: Mapping[str, str]) -> ExperimentParams:
    """Build ExperimentParams from the keys a ground-truth sidecar carries; missing keys keep defaults."""
    fields = {}
    for name in ExperimentParams.__dataclass_fields__:
        if name in values:
            fields[name] = float(values[name])
    return ExperimentParams(**fields)


def _header_lines(provenance: Optional[Mapping[str, object]]) -> str:
    if not provenance:
        return ""
    return "".join(f"# {key}={format_value(value)}\n" for key, value in provenance.items())


class FileStorage:
    """
    Async readers and writers for every file the pipeline produces or consumes.
    """

    def __init__(self, base_path: str = "./storage") -> None:
        """
        Args:
            base_path (str, optional): Directory relative paths are resolved against.
        """
        self.base_path = Path(base_path)
        os.makedirs(self.base_path, exist_ok=True)

    def _get_file_path(self, path: Union[str, Path], create_missing: bool = False) -> Path:
        path = Path(path)
        if not path.is_absolute():
            path = self.base_path / path
        if create_missing:
            path.parent.mkdir(parents=True, exist_ok=True)
        return path

    async def get_file_by_path(self, path: Union[Path, str]) -> Optional[bytes]:
        """
        Args:
            path (Union[Path, str]): The file path.

        Returns:
            Optional[bytes]: The file content, or None if the file does not exist.
        """
        file_path = self._get_file_path(path)
        if not file_path.exists():
            logger.warning(f"File not found: {file_path}")
            return None
        try:
            async with aiofiles.open(file_path, "rb") as file:
                return await file.read()
        except OSError as e:
            logger.error(f"Error reading file {file_path}: {str(e)}")
            raise IOError(f"Failed to read file: {str(e)}")

    async def save_bytes_by_path(self, data: bytes, path: Union[str, Path]) -> Path:
        file_path = self._get_file_path(path, create_missing=True)
        try:
            async with aiofiles.open(file_path, "wb") as out_file:
                await out_file.write(data)
            logger.info(f"Bytes saved to {file_path}")
            return file_path
        except OSError as e:
            logger.error(f"Error saving bytes to {file_path}: {str(e)}")
            raise IOError(f"Failed to save bytes to {file_path}: {str(e)}")

    async def save_text_by_path(self, text: str, path: Union[str, Path]) -> Path:
        return await self.save_bytes_by_path(text.encode("utf-8"), path)

    async def delete_file_by_path(self, path: Union[Path, str]) -> bool:
        file_path = self._get_file_path(path)
        if not file_path.exists():
            logger.warning(f"Cannot delete: file not found: {file_path}")
            return False
        os.remove(file_path)
        logger.info(f"File deleted: {file_path}")
        return True

    async def sha256_of(self, path: Union[str, Path]) -> str:
        """SHA-256 of a file, read in blocks."""
        file_path = self._get_file_path(path)
        if not file_path.exists():
            raise FileFormatError("no such file", path=str(file_path))
        digest = hashlib.sha256()
        async with aiofiles.open(file_path, "rb") as file:
            while chunk := await file.read(_READ_SIZE):
                digest.update(chunk)
        return digest.hexdigest()

    # ------------------------------------------------------------------ timestamp files

    async def write_events(
        self,
        blocks: Iterable[np.ndarray],
        duration: int,
        path: Union[str, Path],
        binary: bool = False,
        provenance: Optional[Mapping[str, object]] = None,
    ) -> int:
        """
        Write a photon stream given as time-ordered tick blocks.

        Text files start with "# ticks=1.25ns duration=<N>" followed by optional "# key=value"
        provenance lines and one tick per line. Binary files carry a 16-byte header (magic "PHOT",
        version, duration) and little-endian uint64 ticks.

        Returns:
            int: Number of events written.
        """
        file_path = self._get_file_path(path, create_missing=True)
        written = 0
        async with aiofiles.open(file_path, "wb") as out:
            if binary:
                await out.write(BINARY_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, duration))
            else:
                header = TEXT_HEADER.format(duration=duration) + "\n" + _header_lines(provenance)
                await out.write(header.encode("ascii"))
            for block in blocks:
                block = np.asarray(block, dtype=np.int64)
                if block.size == 0:
                    continue
                if binary:
                    await out.write(block.astype("<u8").tobytes())
                else:
                    await out.write(("\n".join(map(str, block.tolist())) + "\n").encode("ascii"))
                written += int(block.size)
        logger.info(f"Wrote {written} events to {file_path}")
        return written

    async def write_stream(
        self,
        stream: PhotonEventStream,
        path: Union[str, Path],
        binary: bool = False,
        provenance: Optional[Mapping[str, object]] = None,
    ) -> int:
        return await self.write_events([stream.events], stream.duration, path, binary, provenance)

    async def read_event_header(self, path: Union[str, Path]) -> tuple[int, bool, dict[str, str]]:
        """
        Returns:
            tuple: (duration in ticks, binary flag, header key/values).
        """
        file_path = self._get_file_path(path)
        if not file_path.exists():
            raise FileFormatError("no such file", path=str(file_path))
        async with aiofiles.open(file_path, "rb") as file:
            head = await file.read(BINARY_HEADER.size)
            if head[:4] == BINARY_MAGIC:
                if len(head) < BINARY_HEADER.size:
                    raise FileFormatError("truncated binary header", path=str(file_path))
                _, version, duration = BINARY_HEADER.unpack(head)
                if version != BINARY_VERSION:
                    raise FileFormatError(f"unsupported binary version {version}", path=str(file_path))
                return int(duration), True, {"version": str(version)}
            await file.seek(0)
            header: dict[str, str] = {}
            first = (await file.readline()).decode("ascii", errors="replace")
            if not first.startswith("#"):
                raise FileFormatError("missing '# ticks=1.25ns duration=<N>' header", path=str(file_path), line=1)
            header.update(parse_key_values(first))
            while True:
                line = await file.readline()
                if not line.startswith(b"#"):
                    break
                header.update(parse_key_values(line.decode("ascii", errors="replace")))
        if header.get("ticks") != "1.25ns":
            raise FileFormatError("header must declare ticks=1.25ns", path=str(file_path), line=1)
        try:
            duration = int(header["duration"])
        except (KeyError, ValueError):
            raise FileFormatError("header must carry an integer duration", path=str(file_path), line=1)
        if duration < 0:
            raise FileFormatError(f"negative duration {duration}", path=str(file_path), line=1)
        return duration, False, header

    async def iter_event_blocks(
        self, path: Union[str, Path], block_size: int = 2**20, duration: Optional[int] = None
    ) -> AsyncIterator[np.ndarray]:
        """
        Yield the ticks of a timestamp file block by block, validating as it goes.

        Raises:
            FileFormatError: on a malformed line (text, with 1-based line number), a truncated
                record (binary) or a stream invariant violation.
        """
        file_path = self._get_file_path(path)
        header_duration, binary, _ = await self.read_event_header(path)
        duration = header_duration if duration is None else duration
        checker = _EventChecker(duration, str(file_path))
        if binary:
            async for block in self._iter_binary(file_path, block_size):
                checker.check(block, None)
                yield block
        else:
            async for block, first_line in self._iter_text(file_path, block_size):
                checker.check(block, first_line)
                yield block

    async def _iter_binary(self, file_path: Path, block_size: int) -> AsyncIterator[np.ndarray]:
        async with aiofiles.open(file_path, "rb") as file:
            await file.seek(BINARY_HEADER.size)
            while True:
                raw = await file.read(block_size * 8)
                if not raw:
                    return
                if len(raw) % 8:
                    raise FileFormatError("truncated tick record at end of file", path=str(file_path))
                ticks = np.frombuffer(raw, dtype="<u8")
                if ticks.size and int(ticks.max()) > MAX_TICK:
                    raise FileFormatError("tick value exceeds the 63-bit range", path=str(file_path))
                yield ticks.astype(np.int64)

    async def _iter_text(self, file_path: Path, block_size: int) -> AsyncIterator[tuple[np.ndarray, int]]:
        line_no = 0
        in_header = True
        lines: list[str] = []
        first_line = 0
        tail = b""
        async with aiofiles.open(file_path, "rb") as file:
            while True:
                data = await file.read(_READ_SIZE)
                if not data:
                    pieces = [tail] if tail.strip() else []
                else:
                    pieces = (tail + data).split(b"\n")
                    tail = pieces.pop()
                for raw in pieces:
                    line_no += 1
                    line = raw.decode("ascii", errors="replace").strip()
                    if in_header and line.startswith("#"):
                        continue
                    in_header = False
                    if not lines:
                        first_line = line_no
                    lines.append(line)
                    if len(lines) >= block_size:
                        yield _parse_tick_lines(lines, first_line, str(file_path)), first_line
                        lines = []
                if not data:
                    break
        if lines:
            yield _parse_tick_lines(lines, first_line, str(file_path)), first_line

    async def read_stream(self, path: Union[str, Path]) -> PhotonEventStream:
        """Read a whole timestamp file into memory."""
        duration, _, _ = await self.read_event_header(path)
        blocks = [block async for block in self.iter_event_blocks(path)]
        events = np.concatenate(blocks) if blocks else np.empty(0, dtype=np.int64)
        return PhotonEventStream(events, duration)

    # ------------------------------------------------------------------ correlograms

    async def write_correlogram(
        self,
        correlogram: Correlogram,
        path: Union[str, Path],
        provenance: Optional[Mapping[str, object]] = None,
    ) -> Path:
        """
        One channel per line: lag_seconds, g, raw_sum, direct_monitor, delayed_monitor,
        update_count. Undefined g is written as "nan".
        """
        return await self.save_text_by_path(correlogram_to_text(correlogram, provenance), path)

    async def read_correlogram(self, path: Union[str, Path]) -> Correlogram:
        data = await self.get_file_by_path(path)
        if data is None:
            raise FileFormatError("no such file", path=str(self._get_file_path(path)))
        return correlogram_from_text(data.decode("utf-8"), str(self._get_file_path(path)))

    # ------------------------------------------------------------------ key=value reports

    async def write_key_values(
        self,
        values: Mapping[str, object],
        path: Union[str, Path],
        provenance: Optional[Mapping[str, object]] = None,
    ) -> Path:
        """Sidecars and fit/size reports: '#' provenance lines, then one key=value per line."""
        body = "".join(f"{key}={format_value(value)}\n" for key, value in values.items())
        return await self.save_text_by_path(_header_lines(provenance) + body, path)

    async def read_key_values(self, path: Union[str, Path]) -> dict[str, str]:
        file_path = self._get_file_path(path)
        data = await self.get_file_by_path(path)
        if data is None:
            raise FileFormatError("no such file", path=str(file_path))
        values: dict[str, str] = {}
        for line_no, line in enumerate(data.decode("utf-8").splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not key:
                raise FileFormatError(f"expected key=value, got {line!r}", path=str(file_path), line=line_no)
            values[key.strip()] = value.strip()
        return values

    async def write_table(
        self,
        columns: Iterable[str],
        rows: Iterable[Iterable[object]],
        path: Union[str, Path],
        provenance: Optional[Mapping[str, object]] = None,
        footer: Optional[Mapping[str, object]] = None,
    ) -> Path:
        """Whitespace-separated table with a '#' header; used for curves, bias and grid reports."""
        text = _header_lines(provenance) + "# " + " ".join(columns) + "\n"
        text += "".join(" ".join(format_value(v) for v in row) + "\n" for row in rows)
        text += _header_lines(footer)
        return await self.save_text_by_path(text, path)


class _EventChecker:
    """Stream invariants checked across blocks, reported against file positions."""

    def __init__(self, duration: int, path: str):
        self.duration = duration
        self.path = path
        self.last: Optional[int] = None

    def check(self, block: np.ndarray, first_line: Optional[int]) -> None:
        if block.size == 0:
            return
        joined = block if self.last is None else np.concatenate([[self.last], block])
        offset = 0 if self.last is None else 1
        bad = np.flatnonzero(np.diff(joined) < MIN_GAP_TICKS)
        if bad.size:
            k = int(bad[0]) + 1 - offset
            raise FileFormatError(
                f"tick {int(block[k])} is not at least {MIN_GAP_TICKS} ticks after the previous event",
                path=self.path,
                line=None if first_line is None else first_line + k,
            )
        outside = np.flatnonzero(block >= self.duration)
        if outside.size:
            k = int(outside[0])
            raise FileFormatError(
                f"tick {int(block[k])} lies outside duration {self.duration}",
                path=self.path,
                line=None if first_line is None else first_line + k,
            )
        self.last = int(block[-1])


def _parse_tick_lines(lines: list[str], first_line: int, path: str) -> np.ndarray:
    text = np.array(lines, dtype=str)
    ok = np.char.isdigit(text) & (np.char.str_len(text) <= 19)
    for k in np.flatnonzero(ok & (np.char.str_len(text) == 19)):
        ok[k] = int(lines[k]) <= MAX_TICK
    if not ok.all():
        k = int(np.flatnonzero(~ok)[0])
        raise FileFormatError(
            f"expected an unsigned tick value, got {lines[k]!r}", path=path, line=first_line + k
        )
    return text.astype(np.int64)


def correlogram_to_text(correlogram: Correlogram, provenance: Optional[Mapping[str, object]] = None) -> str:
    config = correlogram.config
    lines = [
        "# multitau correlogram",
        f"# blocks={config.num_blocks} channels={config.channels_per_block} "
        f"first_channels={config.first_block_channels} "
        f"base_period={format_value(config.base_sample_period)} dilation={config.dilation}",
        f"# total_samples={correlogram.total_samples}",
    ]
    text = "\n".join(lines) + "\n" + _header_lines(provenance) + f"# {CORRELOGRAM_COLUMNS}\n"
    rows = []
    for c in correlogram.channels:
        g = "nan" if c.g is None else format_value(c.g)
        rows.append(
            f"{format_value(c.lag)} {g} {c.raw_sum} {c.direct_monitor} {c.delayed_monitor} {c.update_count}\n"
        )
    return text + "".join(rows)


def correlogram_from_text(text: str, path: Optional[str] = None) -> Correlogram:
    """
    Parse the correlogram table. The config header rebuilds the lag schedule; g is recomputed
    from the integer columns whenever it is defined.
    """
    header: dict[str, str] = {}
    rows: list[tuple[int, list[str]]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            header.update(parse_key_values(line))
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FileFormatError(f"expected 6 columns, got {len(parts)}", path=path, line=line_no)
        rows.append((line_no, parts))

    try:
        config = CorrelatorConfig(
            num_blocks=int(header["blocks"]),
            channels_per_block=int(header["channels"]),
            first_block_channels=int(header["first_channels"]),
            base_sample_period=float(header["base_period"]),
            dilation=int(header["dilation"]),
        )
        total_samples = int(header["total_samples"])
    except (KeyError, ValueError) as e:
        raise FileFormatError(f"incomplete correlogram header: {e}", path=path, line=1)
    if len(rows) != config.total_channels:
        raise FileFormatError(
            f"{len(rows)} channel rows for a {config.total_channels}-channel configuration", path=path
        )

    channels = []
    lag_samples = config.lag_samples()
    blocks = [s for s in range(config.num_blocks) for _ in config.block_delays(s)]
    delays = [d for s in range(config.num_blocks) for d in config.block_delays(s)]
    for k, (line_no, parts) in enumerate(rows):
        try:
            lag = float(parts[0])
            g_text = float(parts[1])
            raw, direct, delayed, count = (int(v) for v in parts[2:])
        except ValueError:
            raise FileFormatError(f"malformed channel row {' '.join(parts)!r}", path=path, line=line_no)
        if not math.isclose(lag, lag_samples[k] * config.base_sample_period, rel_tol=1e-9):
            raise FileFormatError(f"lag {lag} does not match the configured schedule", path=path, line=line_no)
        g = normalize_symmetric(raw, direct, delayed, count) if not math.isnan(g_text) else None
        channels.append(
            ChannelRecord(
                block=blocks[k],
                delay=delays[k],
                lag_samples=lag_samples[k],
                lag=lag,
                raw_sum=raw,
                direct_monitor=direct,
                delayed_monitor=delayed,
                update_count=count,
                g=g,
            )
        )
    logger.debug(f"Parsed correlogram with {len(channels)} channels from {path}")
    return Correlogram(config, total_samples, tuple(channels))


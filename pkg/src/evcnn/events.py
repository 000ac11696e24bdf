"""Event and stream containers, timestamp windowing, and stream file I/O.

Streams are stored struct-of-arrays (numpy) for speed; single events are
exposed as a small dataclass. Two self-describing file formats are
supported:

text    first line ``EVT <width> <height>``, then one ``ts,x,y,p`` line
        per event (ASCII, LF endings, p in {1,-1})
binary  magic ``EVT1``, width/height as little-endian u16, then 13-byte
        records: ts u64 LE, x u16 LE, y u16 LE, p s8
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CoordinateOutOfBounds,
    MalformedRecord,
    NonMonotoneTimestamp,
    ZeroWindow,
)

_BINARY_MAGIC = b"EVT1"
_RECORD = struct.Struct("<QHHb")  # ts, x, y, polarity


@dataclass(frozen=True)
class Event:
    """A single camera event: pixel position, microsecond timestamp, sign."""

    x: int
    y: int
    ts: int
    polarity: int


class EventStream:
    """An ordered event sequence bound to a sensor geometry.

    Internally keeps parallel numpy arrays (xs, ys, ts, ps); iteration
    yields :class:`Event` objects.
    """

    def __init__(self, sensor_width, sensor_height, xs=None, ys=None, ts=None, ps=None):
        self.sensor_width = int(sensor_width)
        self.sensor_height = int(sensor_height)
        self.xs = np.asarray(xs if xs is not None else [], dtype=np.uint16)
        self.ys = np.asarray(ys if ys is not None else [], dtype=np.uint16)
        self.ts = np.asarray(ts if ts is not None else [], dtype=np.uint64)
        self.ps = np.asarray(ps if ps is not None else [], dtype=np.int8)
        self._validate()

    @classmethod
    def from_events(cls, sensor_width, sensor_height, events):
        events = list(events)
        return cls(
            sensor_width,
            sensor_height,
            xs=[e.x for e in events],
            ys=[e.y for e in events],
            ts=[e.ts for e in events],
            ps=[e.polarity for e in events],
        )

    def _validate(self):
        n = len(self.ts)
        if not (len(self.xs) == len(self.ys) == len(self.ps) == n):
            raise MalformedRecord("event field arrays have mismatched lengths")
        if n == 0:
            return
        if np.any(self.xs >= self.sensor_width) or np.any(self.ys >= self.sensor_height):
            raise CoordinateOutOfBounds(
                f"event coordinates exceed sensor {self.sensor_width}x{self.sensor_height}"
            )
        if np.any(np.diff(self.ts.astype(np.int64)) < 0):
            raise NonMonotoneTimestamp("timestamps must be non-decreasing")
        if not np.all(np.isin(self.ps, (-1, 1))):
            raise MalformedRecord("polarity must be +1 or -1")

    def __len__(self):
        return len(self.ts)

    def __iter__(self):
        for x, y, t, p in zip(self.xs, self.ys, self.ts, self.ps):
            yield Event(int(x), int(y), int(t), int(p))

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.sensor_width == other.sensor_width
            and self.sensor_height == other.sensor_height
            and np.array_equal(self.xs, other.xs)
            and np.array_equal(self.ys, other.ys)
            and np.array_equal(self.ts, other.ts)
            and np.array_equal(self.ps, other.ps)
        )

    def slice(self, lo, hi):
        """Sub-stream of events [lo:hi) by index, geometry preserved."""
        return EventStream(
            self.sensor_width,
            self.sensor_height,
            self.xs[lo:hi],
            self.ys[lo:hi],
            self.ts[lo:hi],
            self.ps[lo:hi],
        )


@dataclass
class EventBatch:
    """Events of one half-open time window [window_start, window_end)."""

    window_start: int
    window_end: int
    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    ps: np.ndarray

    def __len__(self):
        return len(self.ts)

    @property
    def span_us(self):
        return self.window_end - self.window_start


def read_stream(source: bytes, format: str = "text") -> EventStream:
    """Parse a byte sequence into an EventStream.

    Rejects malformed records (with position), out-of-bounds coordinates
    and timestamp regressions.
    """
    if format == "text":
        return _read_text(source)
    if format == "binary":
        return _read_binary(source)
    raise ValueError(f"unknown stream format {format!r}")


def write_stream(stream: EventStream, format: str = "text") -> bytes:
    """Serialize a stream to its canonical byte form (re-parses equal)."""
    if format == "text":
        lines = [f"EVT {stream.sensor_width} {stream.sensor_height}\n"]
        lines.extend(
            f"{int(t)},{int(x)},{int(y)},{int(p)}\n"
            for x, y, t, p in zip(stream.xs, stream.ys, stream.ts, stream.ps)
        )
        return "".join(lines).encode("ascii")
    if format == "binary":
        parts = [
            _BINARY_MAGIC,
            struct.pack("<HH", stream.sensor_width, stream.sensor_height),
        ]
        parts.extend(
            _RECORD.pack(int(t), int(x), int(y), int(p))
            for x, y, t, p in zip(stream.xs, stream.ys, stream.ts, stream.ps)
        )
        return b"".join(parts)
    raise ValueError(f"unknown stream format {format!r}")


def _read_text(source: bytes) -> EventStream:
    try:
        text = source.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedRecord(f"stream is not ASCII: {exc}") from exc
    lines = text.split("\n")
    if not lines or not lines[0].startswith("EVT "):
        raise MalformedRecord("missing 'EVT width height' header", position="line 1")
    header = lines[0].split()
    if len(header) != 3:
        raise MalformedRecord("header must be 'EVT width height'", position="line 1")
    try:
        width, height = int(header[1]), int(header[2])
    except ValueError as exc:
        raise MalformedRecord(f"bad header dimensions: {exc}", position="line 1") from exc

    xs, ys, ts, ps = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "":
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise MalformedRecord("expected 'ts,x,y,p'", position=f"line {lineno}")
        try:
            t, x, y, p = (int(f) for f in fields)
        except ValueError:
            raise MalformedRecord("non-integer field", position=f"line {lineno}") from None
        if p not in (1, -1):
            raise MalformedRecord(f"polarity {p} not in {{1,-1}}", position=f"line {lineno}")
        if t < 0:
            raise MalformedRecord("negative timestamp", position=f"line {lineno}")
        if not (0 <= x < width and 0 <= y < height):
            raise CoordinateOutOfBounds(f"({x},{y}) outside {width}x{height} at line {lineno}")
        if ts and t < ts[-1]:
            raise NonMonotoneTimestamp(f"timestamp {t} < {ts[-1]} at line {lineno}")
        xs.append(x)
        ys.append(y)
        ts.append(t)
        ps.append(p)
    return EventStream(width, height, xs, ys, ts, ps)


def _read_binary(source: bytes) -> EventStream:
    if len(source) < 8 or source[:4] != _BINARY_MAGIC:
        raise MalformedRecord("missing EVT1 magic", position="offset 0")
    width, height = struct.unpack_from("<HH", source, 4)
    body = source[8:]
    if len(body) % _RECORD.size != 0:
        raise MalformedRecord(
            f"body length {len(body)} not a multiple of {_RECORD.size}",
            position=f"offset {len(source)}",
        )
    xs, ys, ts, ps = [], [], [], []
    for off in range(0, len(body), _RECORD.size):
        t, x, y, p = _RECORD.unpack_from(body, off)
        if p not in (1, -1):
            raise MalformedRecord(f"polarity {p} not in {{1,-1}}", position=f"offset {8 + off}")
        if not (0 <= x < width and 0 <= y < height):
            raise CoordinateOutOfBounds(f"({x},{y}) outside {width}x{height} at offset {8 + off}")
        if ts and t < ts[-1]:
            raise NonMonotoneTimestamp(f"timestamp {t} < {ts[-1]} at offset {8 + off}")
        xs.append(x)
        ys.append(y)
        ts.append(t)
        ps.append(p)
    return EventStream(width, height, xs, ys, ts, ps)


def window_events(stream: EventStream, window: int) -> list[EventBatch]:
    """Partition a stream into consecutive half-open windows.

    Windows are [first_ts + k*window, first_ts + (k+1)*window); empty
    windows between events are materialized so downstream consumers still
    see the elapsed (leak) time. An empty stream yields no batches.
    """
    if window <= 0:
        raise ZeroWindow(f"window must be positive, got {window}")
    if len(stream) == 0:
        return []
    first = int(stream.ts[0])
    rel = stream.ts.astype(np.int64) - first
    bins = rel // int(window)
    n_windows = int(bins[-1]) + 1
    batches = []
    bounds = np.searchsorted(bins, np.arange(n_windows + 1))
    for k in range(n_windows):
        lo, hi = bounds[k], bounds[k + 1]
        batches.append(
            EventBatch(
                window_start=first + k * int(window),
                window_end=first + (k + 1) * int(window),
                xs=stream.xs[lo:hi],
                ys=stream.ys[lo:hi],
                ts=stream.ts[lo:hi],
                ps=stream.ps[lo:hi],
            )
        )
    return batches

"""Event records, event-file I/O, and synthetic event generation.

The on-disk event format is plain UTF-8 text: line 1 holds
``"<width> <height>"``, every following non-empty line holds one record
``"<x> <y> <t> <p>"`` with integer fields separated by single spaces,
``p`` in ``{1, -1}``, LF line endings. Timestamps are microseconds and
must be non-decreasing within a stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Event",
    "EventStream",
    "FrameSequence",
    "EventFileError",
    "read_events",
    "parse_events",
    "render_events",
    "write_events",
    "generate_events",
    "synthetic_frames",
    "load_frames_dir",
    "SYNTHETIC_NAMES",
]


class EventFileError(ValueError):
    """Malformed event file. ``record`` is the offending 0-based record index
    (-1 for header problems)."""

    def __init__(self, message: str, record: int = -1):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class Event:
    """One brightness-change event: pixel (x, y), timestamp t in µs, polarity ±1."""

    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """An ordered event sequence bound to a sensor resolution.

    Events must be in-bounds and sorted by timestamp (ties allowed);
    `validate()` enforces both. Streams are treated as immutable after
    construction and are safe to share read-only.
    """

    width: int
    height: int
    events: list[Event] = field(default_factory=list)

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"invalid resolution {self.width}x{self.height}")
        last_t = None
        for i, e in enumerate(self.events):
            if not (0 <= e.x < self.width and 0 <= e.y < self.height):
                raise ValueError(f"event {i} out of bounds: ({e.x}, {e.y})")
            if e.p not in (-1, 1):
                raise ValueError(f"event {i} has invalid polarity {e.p}")
            if e.t < 0:
                raise ValueError(f"event {i} has negative timestamp {e.t}")
            if last_t is not None and e.t < last_t:
                raise ValueError(f"event {i} breaks timestamp order")
            last_t = e.t

    def __len__(self) -> int:
        return len(self.events)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width, self.height, self.events) == (other.width, other.height, other.events)


@dataclass
class FrameSequence:
    """Brightness frames (positive intensity) with strictly increasing µs timestamps."""

    frames: list[np.ndarray]
    timestamps: list[int]

    def validate(self) -> None:
        if len(self.frames) != len(self.timestamps):
            raise ValueError("frames/timestamps length mismatch")
        if not self.frames:
            raise ValueError("empty frame sequence")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.ndim != 2 or f.shape != shape:
                raise ValueError(f"frame {i} has shape {f.shape}, expected {shape}")
            if not np.all(f > 0):
                raise ValueError(f"frame {i} contains non-positive intensity")
        for i in range(1, len(self.timestamps)):
            if self.timestamps[i] <= self.timestamps[i - 1]:
                raise ValueError(f"timestamp {i} is not strictly increasing")

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]


def read_events(path: str | Path) -> EventStream:
    """Parse an event file, validating bounds, polarity, and timestamp order.

    Raises EventFileError naming the offending record index on the first
    malformed record.
    """
    return parse_events(Path(path).read_text(encoding="utf-8"))


def parse_events(text: str) -> EventStream:
    """Parse event-file text (see module docstring for the format)."""
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise EventFileError("missing header line")
    header = lines[0].split(" ")
    if len(header) != 2:
        raise EventFileError(f"malformed header {lines[0]!r}, expected '<width> <height>'")
    try:
        width, height = int(header[0]), int(header[1])
    except ValueError:
        raise EventFileError(f"non-integer header fields {lines[0]!r}") from None
    if width <= 0 or height <= 0:
        raise EventFileError(f"non-positive resolution {width}x{height}")

    events: list[Event] = []
    record = 0
    last_t: int | None = None
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 4:
            raise EventFileError(f"record {record}: expected 4 fields, got {len(parts)}", record)
        try:
            x, y, t, p = (int(v) for v in parts)
        except ValueError:
            raise EventFileError(f"record {record}: non-integer field in {line!r}", record) from None
        if not (0 <= x < width and 0 <= y < height):
            raise EventFileError(f"record {record}: pixel ({x}, {y}) out of bounds for {width}x{height}", record)
        if p not in (1, -1):
            raise EventFileError(f"record {record}: polarity {p} not in {{1, -1}}", record)
        if t < 0:
            raise EventFileError(f"record {record}: negative timestamp {t}", record)
        if last_t is not None and t < last_t:
            raise EventFileError(f"record {record}: timestamp {t} regresses below {last_t}", record)
        events.append(Event(x, y, t, p))
        last_t = t
        record += 1
    return EventStream(width, height, events)


def render_events(stream: EventStream) -> str:
    """Canonical text encoding of a stream; ``parse_events`` inverts it."""
    stream.validate()
    lines = [f"{stream.width} {stream.height}"]
    lines.extend(f"{e.x} {e.y} {e.t} {e.p}" for e in stream.events)
    return "\n".join(lines) + "\n"


def write_events(stream: EventStream, path: str | Path) -> None:
    """Write the canonical encoding; ``read_events`` inverts it byte-for-byte."""
    Path(path).write_text(render_events(stream), encoding="utf-8", newline="\n")


def generate_events(seq: FrameSequence, threshold_c: float) -> EventStream:
    """Synthesize events from brightness frames via the ideal sensor model.

    Each pixel keeps a reference log-brightness initialized from frame 0.
    For every later frame, while the log-brightness change since the
    reference reaches the contrast threshold, one event is emitted with the
    sign of the change and the reference advances by one threshold step.
    All events of a frame carry the frame timestamp; ties are ordered by
    (y, x, p) for determinism.
    """
    if threshold_c <= 0:
        raise ValueError(f"threshold must be positive, got {threshold_c}")
    seq.validate()
    if len(seq.frames) < 2:
        raise ValueError("need at least 2 frames to generate events")

    log_ref = np.log(seq.frames[0].astype(np.float64))
    height, width = log_ref.shape
    events: list[Event] = []
    for frame, ts in zip(seq.frames[1:], seq.timestamps[1:]):
        log_now = np.log(frame.astype(np.float64))
        ys, xs = np.nonzero(np.abs(log_now - log_ref) >= threshold_c)
        frame_events = []
        for y, x in zip(ys.tolist(), xs.tolist()):
            d = log_now[y, x] - log_ref[y, x]
            while abs(d) >= threshold_c:
                p = 1 if d > 0 else -1
                frame_events.append(Event(x, y, ts, p))
                log_ref[y, x] += p * threshold_c
                d = log_now[y, x] - log_ref[y, x]
        frame_events.sort(key=lambda e: (e.y, e.x, e.p))
        events.extend(frame_events)
    return EventStream(width, height, events)


def _ramp(width: int, height: int, steps: int, dt_us: int) -> FrameSequence:
    # Global exponential brightness ramp: every pixel crosses thresholds together.
    base = np.full((height, width), 100.0)
    frames = [base * math.exp(0.12 * i) for i in range(steps)]
    return FrameSequence(frames, [i * dt_us for i in range(steps)])


def _moving_edge(width: int, height: int, steps: int, dt_us: int) -> FrameSequence:
    # Vertical bright/dark edge sweeping left to right, one column per frame.
    frames = []
    for i in range(steps):
        f = np.full((height, width), 50.0)
        f[:, : (i % (width + 1))] = 400.0
        frames.append(f)
    return FrameSequence(frames, [i * dt_us for i in range(steps)])


def _moving_disk(width: int, height: int, steps: int, dt_us: int) -> FrameSequence:
    # A bright ring (contour) translating diagonally; events trace its outline.
    radius = max(3.0, min(width, height) / 6.0)
    yy, xx = np.mgrid[0:height, 0:width]
    frames = []
    for i in range(steps):
        cx = radius + 1 + (i * 0.7) % max(1.0, width - 2 * radius - 2)
        cy = radius + 1 + (i * 0.45) % max(1.0, height - 2 * radius - 2)
        dist = np.hypot(xx - cx, yy - cy)
        f = np.full((height, width), 60.0)
        f[np.abs(dist - radius) < 1.0] = 480.0
        frames.append(f)
    return FrameSequence(frames, [i * dt_us for i in range(steps)])


_SYNTHETIC = {
    "ramp": _ramp,
    "moving_edge": _moving_edge,
    "moving_disk": _moving_disk,
}

SYNTHETIC_NAMES = tuple(sorted(_SYNTHETIC))


def synthetic_frames(name: str, width: int = 64, height: int = 48, steps: int = 40, dt_us: int = 1000) -> FrameSequence:
    """Build one of the named synthetic brightness sequences."""
    try:
        maker = _SYNTHETIC[name]
    except KeyError:
        raise ValueError(f"unknown synthetic sequence {name!r}, choose from {SYNTHETIC_NAMES}") from None
    return maker(width, height, steps, dt_us)


def load_frames_dir(path: str | Path, dt_us: int = 1000) -> FrameSequence:
    """Load a frame sequence from a directory of ``.npy`` brightness arrays.

    Files are ordered lexicographically. Timestamps come from an optional
    ``timestamps.txt`` (one integer per line), else a uniform ``dt_us`` grid.
    """
    directory = Path(path)
    files = sorted(directory.glob("*.npy"))
    if not files:
        raise ValueError(f"no .npy frames found in {directory}")
    frames = [np.load(f) for f in files]
    ts_file = directory / "timestamps.txt"
    if ts_file.exists():
        timestamps = [int(line) for line in ts_file.read_text().split() if line.strip()]
        if len(timestamps) != len(frames):
            raise ValueError(f"{len(timestamps)} timestamps for {len(frames)} frames")
    else:
        timestamps = [i * dt_us for i in range(len(frames))]
    return FrameSequence(frames, timestamps)

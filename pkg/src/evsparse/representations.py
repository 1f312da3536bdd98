"""Sparse recursive event representations over a sliding window.

Two image-like embeddings are supported, both updatable in place by
per-event increments at single pixels:

* ``histogram``: 2 channels, per-pixel counts of positive / negative
  polarity events currently inside the window.
* ``queue``: 30 channels, the newest 15 (timestamp, polarity) entries per
  pixel, timestamps first then polarities. Timestamps are encoded relative
  to the pixel's own newest event and scaled by that pixel's time span to
  [0, 1] (span 0 encodes as 0), so an event never perturbs other pixels'
  channels. Unused slots stay 0; polarities are stored as ±1.

The defining coherence law: a sliding-window state's representation always
equals a batch rebuild from exactly the buffered events.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from evsparse.events import Event

__all__ = [
    "QUEUE_DEPTH",
    "Representation",
    "SlidingWindowState",
    "SparseUpdate",
    "build",
    "channels_for_kind",
    "read_snapshot",
    "write_snapshot",
]

Site = tuple[int, int]

QUEUE_DEPTH = 15

_KIND_CHANNELS = {"histogram": 2, "queue": 2 * QUEUE_DEPTH}

DEFAULT_WINDOW = 25_000


def channels_for_kind(kind: str) -> int:
    try:
        return _KIND_CHANNELS[kind]
    except KeyError:
        raise ValueError(f"unknown representation kind {kind!r}") from None


@dataclass
class Representation:
    """Dense (height, width, channels) value array for one representation kind."""

    width: int
    height: int
    channels: int
    values: np.ndarray
    kind: str

    def value_at(self, site: Site) -> np.ndarray:
        x, y = site
        return self.values[y, x]

    def active_mask(self) -> np.ndarray:
        """(height, width) bool mask of pixels with a nonzero feature vector."""
        return np.any(self.values != 0, axis=2)


@dataclass
class SparseUpdate:
    """Net per-site channel increments plus activity transitions for one push.

    ``old + increments == new`` holds elementwise at every listed site, and
    a site appears in ``newly_active`` / ``newly_inactive`` exactly when its
    feature vector crossed zero in that direction.
    """

    sites: list[tuple[Site, np.ndarray]] = field(default_factory=list)
    newly_active: list[Site] = field(default_factory=list)
    newly_inactive: list[Site] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not (self.sites or self.newly_active or self.newly_inactive)


def _encode_queue_pixel(entries: list[tuple[int, int]], out: np.ndarray) -> None:
    """Encode newest-first (t, p) entries into a 30-channel vector, in place."""
    out[:] = 0.0
    if not entries:
        return
    t_new = entries[0][0]
    span = float(t_new - entries[-1][0])
    for j, (t, p) in enumerate(entries):
        out[j] = (t_new - t) / span if span > 0.0 else 0.0
        out[QUEUE_DEPTH + j] = p


def _check_bounds(e: Event, width: int, height: int) -> None:
    if not (0 <= e.x < width and 0 <= e.y < height):
        raise ValueError(f"event at ({e.x}, {e.y}) out of bounds for {width}x{height}")
    if e.p not in (-1, 1):
        raise ValueError(f"invalid polarity {e.p}")


def build(kind: str, events: list[Event], width: int, height: int, dtype=np.float32) -> Representation:
    """Batch-build a representation from an ordered event list."""
    channels = channels_for_kind(kind)
    values = np.zeros((height, width, channels), dtype=dtype)
    if kind == "histogram":
        for e in events:
            _check_bounds(e, width, height)
            values[e.y, e.x, 0 if e.p > 0 else 1] += 1
    else:
        per_pixel: dict[Site, list[tuple[int, int]]] = {}
        for e in events:
            _check_bounds(e, width, height)
            per_pixel.setdefault((e.x, e.y), []).append((e.t, e.p))
        vec = np.zeros(channels, dtype=np.float64)
        for (x, y), entries in per_pixel.items():
            _encode_queue_pixel(entries[-QUEUE_DEPTH:][::-1], vec)
            values[y, x] = vec.astype(dtype)
    return Representation(width, height, channels, values, kind)


class SlidingWindowState:
    """Mutable window of the most recent ``window_size`` events plus its
    representation, kept coherent under per-event pushes and evictions.

    Single-owner: not safe for concurrent mutation.
    """

    def __init__(
        self,
        kind: str,
        width: int,
        height: int,
        window_size: int = DEFAULT_WINDOW,
        dtype=np.float32,
    ):
        if window_size <= 0:
            raise ValueError(f"window size must be positive, got {window_size}")
        self.kind = kind
        self.width = width
        self.height = height
        self.window_size = window_size
        self.dtype = dtype
        self.buffer: deque[Event] = deque()
        self._pixel_events: dict[Site, deque[Event]] = {}
        self.representation = build(kind, [], width, height, dtype)

    def _recompute_pixel(self, site: Site) -> None:
        x, y = site
        events = self._pixel_events.get(site)
        if self.kind == "queue":
            vec = np.zeros(2 * QUEUE_DEPTH, dtype=np.float64)
            if events:
                newest_first = [(e.t, e.p) for e in list(events)[-QUEUE_DEPTH:][::-1]]
                _encode_queue_pixel(newest_first, vec)
            self.representation.values[y, x] = vec.astype(self.dtype)
        else:
            pos = neg = 0
            if events:
                for e in events:
                    if e.p > 0:
                        pos += 1
                    else:
                        neg += 1
            self.representation.values[y, x, 0] = pos
            self.representation.values[y, x, 1] = neg

    def _apply(self, e: Event, old_values: dict[Site, np.ndarray]) -> None:
        """Insert one event (evicting as needed), recording pre-touch values."""
        _check_bounds(e, self.width, self.height)
        if self.buffer and e.t < self.buffer[-1].t:
            raise ValueError(f"timestamp regression: {e.t} after {self.buffer[-1].t}")

        site = (e.x, e.y)
        if site not in old_values:
            old_values[site] = self.representation.values[e.y, e.x].copy()
        self.buffer.append(e)
        self._pixel_events.setdefault(site, deque()).append(e)
        self._recompute_pixel(site)

        if len(self.buffer) > self.window_size:
            evicted = self.buffer.popleft()
            ev_site = (evicted.x, evicted.y)
            if ev_site not in old_values:
                old_values[ev_site] = self.representation.values[evicted.y, evicted.x].copy()
            pixel = self._pixel_events[ev_site]
            dropped = pixel.popleft()
            assert dropped is evicted, "window FIFO and per-pixel order diverged"
            if not pixel:
                del self._pixel_events[ev_site]
            self._recompute_pixel(ev_site)

    def _collect(self, old_values: dict[Site, np.ndarray]) -> SparseUpdate:
        update = SparseUpdate()
        for site in sorted(old_values, key=lambda s: (s[1], s[0])):
            old = old_values[site]
            new = self.representation.values[site[1], site[0]]
            was_active = bool(np.any(old != 0))
            is_active = bool(np.any(new != 0))
            delta = new - old
            if np.any(delta != 0):
                update.sites.append((site, delta.copy()))
            if is_active and not was_active:
                update.newly_active.append(site)
            elif was_active and not is_active:
                update.newly_inactive.append(site)
        return update

    def push_event(self, e: Event) -> SparseUpdate:
        """Append one event, evicting the oldest if the window overflows.

        Returns the exact set of sites/channels whose values changed.
        """
        old_values: dict[Site, np.ndarray] = {}
        self._apply(e, old_values)
        return self._collect(old_values)

    def push_batch(self, events: list[Event]) -> SparseUpdate:
        """Push events in order and return the coalesced net update.

        Per-site increments are summed; a site that both activated and
        deactivated within the batch resolves to its net status.
        """
        old_values: dict[Site, np.ndarray] = {}
        for e in events:
            self._apply(e, old_values)
        return self._collect(old_values)

    def prime(self, events: list[Event]) -> None:
        """Bulk-load an initial window (keeping the last ``window_size``
        events) without producing an update."""
        kept = list(events)[-self.window_size :]
        if self.buffer:
            raise ValueError("prime requires an empty window")
        self.buffer = deque(kept)
        self._pixel_events = {}
        for e in kept:
            _check_bounds(e, self.width, self.height)
            self._pixel_events.setdefault((e.x, e.y), deque()).append(e)
        self.representation = build(self.kind, kept, self.width, self.height, self.dtype)

    def __len__(self) -> int:
        return len(self.buffer)


def write_snapshot(values: np.ndarray | Representation, path: str | Path) -> None:
    """Dump values as three uint32 dims (height, width, channels) followed by
    little-endian float32 in (y, x, c) row-major order."""
    arr = values.values if isinstance(values, Representation) else values
    if arr.ndim != 3:
        raise ValueError(f"expected (height, width, channels) array, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<3I", h, w, c))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_snapshot(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ValueError("snapshot too short for header")
    h, w, c = struct.unpack("<3I", raw[:12])
    expected = 12 + 4 * h * w * c
    if len(raw) != expected:
        raise ValueError(f"snapshot payload is {len(raw) - 12} bytes, expected {expected - 12}")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(h, w, c).copy()

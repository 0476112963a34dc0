"""Colour event streams: window accumulation, Bayer mask, ray selection, codecs."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError

RGGB = ((0, 1), (1, 2))
EVT_MAGIC = b"EVT1"
EVT_HEADER = struct.Struct("<4sHHff")
EVT_RECORD = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
assert EVT_HEADER.size == 16 and EVT_RECORD.itemsize == 13


@dataclass(frozen=True)
class BayerMask:
    width: int
    height: int
    pattern: tuple = RGGB

    def channel(self, x, y):
        """Channel index seen by pixel (x, y); works elementwise on arrays."""
        p = np.asarray(self.pattern)
        return p[np.asarray(y) % 2, np.asarray(x) % 2]

    def channel_map(self) -> np.ndarray:
        ys, xs = np.mgrid[: self.height, : self.width]
        return self.channel(xs, ys)

    def expanded(self) -> np.ndarray:
        """The one-hot mask F with shape (height, width, 3)."""
        return np.eye(3)[self.channel_map()]


def bayer_channel(mask: BayerMask, x: int, y: int) -> int:
    if not (0 <= x < mask.width and 0 <= y < mask.height):
        raise DomainError(f"pixel ({x}, {y}) outside the mask")
    return int(mask.channel(x, y))


class EventStream:
    """Time-sorted events stored as parallel arrays.

    ``t`` float64 seconds, ``x``/``y`` uint16 pixels, ``p`` int8 polarity.
    """

    def __init__(self, t, x, y, p, width, height, threshold, duration, loop_closed=False,
                 validate=True):
        self.t = np.ascontiguousarray(t, dtype=np.float64)
        self.x = np.ascontiguousarray(x, dtype=np.uint16)
        self.y = np.ascontiguousarray(y, dtype=np.uint16)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        self.width = int(width)
        self.height = int(height)
        self.threshold = float(threshold)
        self.duration = float(duration)
        self.loop_closed = bool(loop_closed)
        for a in (self.t, self.x, self.y, self.p):
            a.setflags(write=False)
        if validate:
            self._validate()
        self._pix = None

    def _validate(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise DomainError("event arrays differ in length")
        if not self.threshold > 0:
            raise DomainError("threshold must be positive")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise DomainError("events must be sorted by time")
            if self.t[0] < 0 or self.t[-1] > self.duration:
                raise DomainError("event timestamps outside [0, duration]")
            if self.x.max() >= self.width or self.y.max() >= self.height:
                raise DomainError("event coordinates outside the sensor")
            if not np.all(np.abs(self.p) == 1):
                raise DomainError("polarity must be -1 or +1")

    def __len__(self):
        return len(self.t)

    @property
    def pixel_index(self) -> np.ndarray:
        if self._pix is None:
            self._pix = self.y.astype(np.int64) * self.width + self.x
        return self._pix

    def with_events(self, t, x, y, p) -> "EventStream":
        return EventStream(t, x, y, p, self.width, self.height, self.threshold, self.duration,
                           self.loop_closed)

    def equals(self, other: "EventStream") -> bool:
        return (self.width == other.width and self.height == other.height
                and self.threshold == other.threshold and self.duration == other.duration
                and all(np.array_equal(a, b) for a, b in
                        ((self.t, other.t), (self.x, other.x), (self.y, other.y), (self.p, other.p))))


@dataclass(frozen=True)
class AccumFrame:
    """Signed per-pixel polarity sums over the window (t0, t].

    ``counts`` holds the integer sums (height, width); ``values`` scales by the threshold.
    """

    counts: np.ndarray
    threshold: float
    window: tuple
    mask: BayerMask

    @property
    def values(self) -> np.ndarray:
        return self.counts * self.threshold

    @property
    def n_events_pixels(self) -> int:
        return int(np.count_nonzero(self.counts))


def _window_counts(stream: EventStream, t0: float, t: float) -> np.ndarray:
    lo = np.searchsorted(stream.t, t0, side="right")
    hi = np.searchsorted(stream.t, t, side="right")
    n = stream.width * stream.height
    if hi <= lo:
        return np.zeros(n, dtype=np.int64)
    return np.bincount(stream.pixel_index[lo:hi], weights=stream.p[lo:hi], minlength=n).astype(np.int64)


def accumulate(stream: EventStream, t0: float, t: float, mask: BayerMask | None = None) -> AccumFrame:
    """Sum polarities of events with t0 < tau <= t at every pixel.

    On loop-closed streams a negative ``t0`` wraps to the end of the stream.
    """
    if not t0 < t:
        raise DomainError(f"empty window ({t0}, {t}]")
    if t > stream.duration:
        raise DomainError("window ends after the stream")
    if t0 < 0:
        if not stream.loop_closed:
            raise DomainError("negative window start on a stream that is not a closed loop")
        if t0 < -stream.duration:
            raise DomainError("window longer than the stream")
        # [0, t] keeps events stamped exactly at 0, which lie inside the unwrapped window
        counts = _window_counts(stream, -np.inf, t) + _window_counts(stream, stream.duration + t0, stream.duration)
    else:
        counts = _window_counts(stream, t0, t)
    if mask is None:
        mask = BayerMask(stream.width, stream.height)
    return AccumFrame(counts.reshape(stream.height, stream.width), stream.threshold, (t0, t), mask)


@dataclass(frozen=True)
class WindowSampler:
    """Window ends at duration*i/n_windows, lengths drawn from U(0, l_max].

    ``fixed_length`` replaces the random length by a constant one.
    """

    n_windows: int = 1000
    l_max: float = 0.05
    duration: float = 1.0
    loop_closed: bool = False
    rng_seed: int = 0
    fixed_length: float | None = None

    def __post_init__(self):
        if self.n_windows < 1:
            raise DomainError("n_windows must be at least 1")
        if not (0 < self.l_max <= self.duration):
            raise DomainError("l_max must lie in (0, duration]")


def sample_window(ws: WindowSampler, i: int, epoch: int = 0) -> tuple[float, float]:
    if not 1 <= i <= ws.n_windows:
        raise DomainError(f"window index {i} outside 1..{ws.n_windows}")
    t = ws.duration * i / ws.n_windows
    if ws.fixed_length is not None:
        length = ws.fixed_length
    else:
        u = np.random.default_rng([ws.rng_seed, epoch, i]).random()
        length = ws.l_max * (1.0 - u)  # (0, l_max]
    t0 = t - length
    if t0 < 0 and not ws.loop_closed:
        t0 = 0.0
    return t0, t


def select_rays(frame: AccumFrame, beta: float, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """Positive pixels (non-zero sum) plus ceil(beta*N_e) event-free pixels.

    Both are returned as int arrays of shape (N, 2) holding (x, y).
    """
    if beta < 0:
        raise DomainError("beta must be non-negative")
    flat = frame.counts.ravel()
    w = frame.counts.shape[1]
    pos = np.flatnonzero(flat)
    if len(pos) == 0:
        empty = np.zeros((0, 2), dtype=np.int64)
        return empty, empty.copy()
    n_neg = math.ceil(beta * len(pos) - 1e-9)
    zeros = np.flatnonzero(flat == 0)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if n_neg >= len(zeros):
        neg = zeros
    else:
        neg = np.sort(rng.choice(zeros, size=n_neg, replace=False))
    to_xy = lambda idx: np.stack([idx % w, idx // w], axis=1)
    return to_xy(pos), to_xy(neg)


def inject_noise(stream: EventStream, rate: float | None = None, fraction: float | None = None,
                 rng_seed=0) -> EventStream:
    """Add uniformly random events, either ``rate`` per second or a ``fraction`` of the count."""
    if (rate is None) == (fraction is None):
        raise DomainError("give exactly one of rate or fraction")
    if (rate if rate is not None else fraction) < 0:
        raise DomainError("noise amount must be non-negative")
    n = round(rate * stream.duration) if rate is not None else round(fraction * len(stream))
    if n == 0:
        return stream
    rng = np.random.default_rng(rng_seed)
    t = np.concatenate([stream.t, rng.uniform(0.0, stream.duration, n)])
    x = np.concatenate([stream.x, rng.integers(0, stream.width, n).astype(np.uint16)])
    y = np.concatenate([stream.y, rng.integers(0, stream.height, n).astype(np.uint16)])
    p = np.concatenate([stream.p, rng.choice(np.array([-1, 1], dtype=np.int8), n)])
    order = np.argsort(t, kind="stable")
    return stream.with_events(t[order], x[order], y[order], p[order])


# -- codecs ----------------------------------------------------------------

def write_evt(path, stream: EventStream):
    """EVT1: 16-byte little-endian header then packed 13-byte records."""
    rec = np.empty(len(stream), dtype=EVT_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    with open(path, "wb") as f:
        f.write(EVT_HEADER.pack(EVT_MAGIC, stream.width, stream.height, stream.threshold, stream.duration))
        f.write(rec.tobytes())


def read_evt(path, loop_closed=False) -> EventStream:
    raw = Path(path).read_bytes()
    if len(raw) < EVT_HEADER.size:
        raise DomainError(f"{path}: truncated header")
    magic, w, h, delta, dur = EVT_HEADER.unpack_from(raw)
    if magic != EVT_MAGIC:
        raise DomainError(f"{path}: bad magic {magic!r}")
    body = raw[EVT_HEADER.size:]
    if len(body) % EVT_RECORD.itemsize:
        raise DomainError(f"{path}: truncated record")
    rec = np.frombuffer(body, dtype=EVT_RECORD)
    return EventStream(rec["t"], rec["x"], rec["y"], rec["p"], w, h, delta, dur, loop_closed)


def write_csv(path, stream: EventStream):
    with open(path, "w") as f:
        f.write("t,x,y,p\n")
        for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
            f.write(f"{t!r},{x},{y},{p}\n")


def read_csv(path, width, height, threshold, duration, loop_closed=False) -> EventStream:
    with open(path) as f:
        header = f.readline().strip()
        if header != "t,x,y,p":
            raise DomainError(f"{path}: expected header 't,x,y,p', got {header!r}")
        rows = [line.split(",") for line in f if line.strip()]
    t = np.array([float(r[0]) for r in rows], dtype=np.float64)
    x = np.array([int(r[1]) for r in rows], dtype=np.uint16)
    y = np.array([int(r[2]) for r in rows], dtype=np.uint16)
    p = np.array([int(r[3]) for r in rows], dtype=np.int8)
    return EventStream(t, x, y, p, width, height, threshold, duration, loop_closed)

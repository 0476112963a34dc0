"""Colour event simulation from a posed frame sequence by log-threshold crossing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .events import BayerMask, EventStream

# events whose level sits within this fraction of a threshold below the signal still fire
CROSSING_SLACK = 1e-9


@dataclass
class FrameSequence:
    frames: np.ndarray  # (N, H, W, 3) linear light
    timestamps: np.ndarray
    gamma: float = 2.2

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DomainError("frames must have shape (N, H, W, 3)")
        if len(self.frames) != len(self.timestamps):
            raise DomainError("one timestamp per frame")
        if np.any(np.diff(self.timestamps) <= 0):
            raise DomainError("timestamps must be strictly increasing")
        if not self.gamma > 0:
            raise DomainError("gamma must be positive")

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]


@dataclass
class SimulatorConfig:
    threshold: float = 0.1
    bayer: BayerMask | None = None
    floor: float = 1e-4
    loop_closed: bool = False

    def __post_init__(self):
        if not self.threshold > 0:
            raise DomainError("threshold must be positive")
        if not self.floor > 0:
            raise DomainError("floor must be positive")


def log_image(frame, g: float, floor: float = 1e-4) -> np.ndarray:
    if not g > 0:
        raise DomainError("gamma must be positive")
    return np.log(np.maximum(np.asarray(frame, dtype=np.float64), floor)) / g


def mosaic(frames: np.ndarray, bayer: BayerMask) -> np.ndarray:
    """Keep only each pixel's own colour channel: (..., H, W, 3) -> (..., H, W)."""
    ch = bayer.channel_map()
    return np.take_along_axis(frames, np.broadcast_to(ch[..., None], frames.shape[:-1] + (1,)), axis=-1)[..., 0]


def simulate(frames: FrameSequence, cfg: SimulatorConfig) -> EventStream:
    if len(frames.frames) < 2:
        raise DomainError("need at least two frames")
    h, w = frames.height, frames.width
    bayer = cfg.bayer or BayerMask(w, h)
    L = log_image(mosaic(frames.frames, bayer), frames.gamma, cfg.floor).reshape(len(frames.frames), -1)
    delta = cfg.threshold
    ts = frames.timestamps
    if ts[0] < 0:
        raise DomainError("timestamps must start at or after 0")

    ref = L[0].copy()
    out_t, out_pix, out_p = [], [], []
    for k in range(len(L) - 1):
        la, lb = L[k], L[k + 1]
        diff = lb - ref
        sign = np.where(diff >= 0, 1, -1)
        n = np.floor(np.abs(diff) / delta + CROSSING_SLACK).astype(np.int64)
        pix = np.flatnonzero(n)
        if len(pix) == 0:
            continue
        counts = n[pix]
        rep_pix = np.repeat(pix, counts)
        # j = 1..n within each pixel's run
        starts = np.cumsum(counts) - counts
        j = np.arange(len(rep_pix)) - np.repeat(starts, counts) + 1
        s = sign[rep_pix]
        level = ref[rep_pix] + s * j * delta
        span = lb[rep_pix] - la[rep_pix]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(span != 0, (level - la[rep_pix]) / span, 1.0)
        frac = np.clip(frac, 0.0, 1.0)
        out_t.append(ts[k] + frac * (ts[k + 1] - ts[k]))
        out_pix.append(rep_pix)
        out_p.append(s)
        ref[pix] += sign[pix] * counts * delta

    if out_t:
        t = np.concatenate(out_t)
        pix = np.concatenate(out_pix)
        p = np.concatenate(out_p).astype(np.int8)
    else:
        t, pix, p = np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int8)
    order = np.lexsort((p, pix, t))
    t, pix, p = t[order], pix[order], p[order]
    return EventStream(t, pix % w, pix // w, p, w, h, delta, ts[-1], cfg.loop_closed)


def sweep_threshold(frames: FrameSequence, deltas, cfg: SimulatorConfig | None = None):
    """Event count for each threshold, as a list of (threshold, count)."""
    cfg = cfg or SimulatorConfig()
    out = []
    for d in deltas:
        if not d > 0:
            raise DomainError("thresholds must be positive")
        stream = simulate(frames, SimulatorConfig(d, cfg.bayer, cfg.floor, cfg.loop_closed))
        out.append((float(d), len(stream)))
    return out

"""Dense voxel radiance field: raw density + raw RGB on grid vertices.

Values are trilinearly interpolated, then activated: softplus for density and
sigmoid for colour.  Density is forced to zero outside the grid box and outside
an optional vertical clipping cylinder.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError

RFG_MAGIC = b"RFG1"
# magic, nx, ny, nz, lo[3], hi[3], has_clip, r_max, z_min, z_max
RFG_HEADER = struct.Struct("<4s3I6dB3d")


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class CylinderClip:
    r_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not self.r_max > 0:
            raise DomainError("r_max must be positive")
        if not self.z_min < self.z_max:
            raise DomainError("z_min must be below z_max")

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return ((x[..., 0] ** 2 + x[..., 1] ** 2 <= self.r_max ** 2)
                & (x[..., 2] >= self.z_min) & (x[..., 2] <= self.z_max))

    def as_array(self) -> np.ndarray:
        return np.array([1.0, self.r_max ** 2, self.z_min, self.z_max])

    @property
    def bbox(self):
        return (np.array([-self.r_max, -self.r_max, self.z_min]),
                np.array([self.r_max, self.r_max, self.z_max]))


def default_clip() -> CylinderClip:
    """Turntable cylinder used for the real captures."""
    return CylinderClip(r_max=0.25, z_min=-0.35, z_max=0.15)


NO_CLIP = np.array([0.0, 0.0, 0.0, 0.0])


class RadianceGrid:
    """Vertex grid with parameters ``params[i, j, k] = (raw_density, raw_r, raw_g, raw_b)``.

    Vertex (0, 0, 0) sits at ``lo`` and vertex (nx-1, ny-1, nz-1) at ``hi``.
    """

    def __init__(self, resolution, lo, hi, params=None, clip: CylinderClip | None = None):
        self.resolution = tuple(int(n) for n in resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise DomainError("resolution must be at least 2 along every axis")
        self.lo = np.asarray(lo, dtype=np.float64).reshape(3).copy()
        self.hi = np.asarray(hi, dtype=np.float64).reshape(3).copy()
        if np.any(self.hi <= self.lo):
            raise DomainError("grid bounds are degenerate")
        shape = self.resolution + (4,)
        if params is None:
            params = np.zeros(shape)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != shape:
            raise DomainError(f"params shape {params.shape} != {shape}")
        self.params = params
        self.clip = clip

    @classmethod
    def create(cls, resolution=(128, 128, 128), lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5),
               clip=None, init_density=0.01):
        """Near-transparent mid-grey start."""
        grid = cls(resolution, lo, hi, clip=clip)
        grid.params[..., 0] = softplus_inv(init_density)
        return grid

    @property
    def raw_density(self) -> np.ndarray:
        return self.params[..., 0]

    @property
    def raw_rgb(self) -> np.ndarray:
        return self.params[..., 1:]

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.resolution) - 1)

    @property
    def clip_array(self) -> np.ndarray:
        return NO_CLIP if self.clip is None else self.clip.as_array()

    def copy(self) -> "RadianceGrid":
        return RadianceGrid(self.resolution, self.lo, self.hi, self.params.copy(), self.clip)

    def inside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        ok = np.all((x >= self.lo) & (x <= self.hi), axis=-1)
        if self.clip is not None:
            ok &= self.clip.contains(x)
        return ok

    def support_box(self):
        """Box outside which density is identically zero."""
        if self.clip is None:
            return self.lo, self.hi
        clo, chi = self.clip.bbox
        return np.maximum(self.lo, clo), np.minimum(self.hi, chi)


@dataclass
class FieldSample:
    sigma: float
    rgb: np.ndarray
    corners: np.ndarray | None = None  # (8, 3) vertex indices
    weights: np.ndarray | None = None  # (8,) trilinear weights
    dsigma_draw: float = 0.0  # d sigma / d interpolated raw density
    drgb_draw: np.ndarray | None = None  # d rgb / d interpolated raw rgb


def _stencil(grid: RadianceGrid, x):
    g = (np.asarray(x, dtype=np.float64) - grid.lo) / (grid.hi - grid.lo) * (np.array(grid.resolution) - 1)
    base = np.minimum(np.floor(g).astype(np.int64), np.array(grid.resolution) - 2)
    f = g - base
    offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    corners = base + offs
    w = np.prod(np.where(offs == 1, f, 1.0 - f), axis=1)
    return corners, w


def query(grid: RadianceGrid, x) -> FieldSample:
    x = np.asarray(x, dtype=np.float64)
    if not grid.inside(x):
        return FieldSample(0.0, np.full(3, 0.5))
    corners, w = _stencil(grid, x)
    raw = (w[:, None] * grid.params[corners[:, 0], corners[:, 1], corners[:, 2]]).sum(axis=0)
    sigma = float(softplus(raw[0]))
    rgb = sigmoid(raw[1:])
    return FieldSample(sigma, rgb, corners, w, float(sigmoid(raw[0])), rgb * (1.0 - rgb))


def accumulate_param_gradient(grid: RadianceGrid, x, dl_dsigma: float, dl_drgb, grad_buffer: np.ndarray):
    """Chain rule of ``query`` into ``grad_buffer`` (same shape as ``grid.params``)."""
    s = query(grid, x)
    if s.corners is None:
        return
    local = np.concatenate([[dl_dsigma * s.dsigma_draw], np.asarray(dl_drgb) * s.drgb_draw])
    if not np.any(local):
        return
    np.add.at(grad_buffer, (s.corners[:, 0], s.corners[:, 1], s.corners[:, 2]), s.weights[:, None] * local)


# -- RFG1 checkpoints ---------------------------------------------------------

def save_grid(path, grid: RadianceGrid):
    """Header (float64 geometry) followed by float32 raw density then raw RGB."""
    clip = grid.clip
    header = RFG_HEADER.pack(RFG_MAGIC, *grid.resolution, *grid.lo, *grid.hi,
                             clip is not None,
                             *(0.0, 0.0, 0.0) if clip is None else (clip.r_max, clip.z_min, clip.z_max))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(grid.raw_density, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(grid.raw_rgb, dtype="<f4").tobytes())


def load_grid(path) -> RadianceGrid:
    raw = Path(path).read_bytes()
    if len(raw) < RFG_HEADER.size or raw[:4] != RFG_MAGIC:
        raise DomainError(f"{path}: not an RFG1 checkpoint")
    fields = RFG_HEADER.unpack_from(raw)
    res = fields[1:4]
    lo, hi = fields[4:7], fields[7:10]
    clip = CylinderClip(*fields[11:14]) if fields[10] else None
    n = res[0] * res[1] * res[2]
    body = np.frombuffer(raw, dtype="<f4", offset=RFG_HEADER.size)
    if body.size != 4 * n:
        raise DomainError(f"{path}: parameter block has {body.size} values, expected {4 * n}")
    params = np.empty(tuple(res) + (4,))
    params[..., 0] = body[:n].reshape(res)
    params[..., 1:] = body[n:].reshape(tuple(res) + (3,))
    return RadianceGrid(res, lo, hi, params, clip)

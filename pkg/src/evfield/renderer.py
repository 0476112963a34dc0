"""Differentiable emission-absorption rendering of a RadianceGrid.

Per ray, with sample depths q_1 < ... < q_S and spacings kappa_i = q_{i+1} - q_i
(kappa_S = t_far - q_S):

    T_i = exp(-sum_{j<i} sigma_j kappa_j),   w_i = T_i (1 - exp(-sigma_i kappa_i))
    rgb = sum_i w_i c_i + T_{S+1} * background
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DomainError
from .field import RadianceGrid
from .geometry import CameraIntrinsics, Pose, Ray, pixel_rays, ray_aabb_interval, ray_sphere_interval

DEPTH_OPACITY_MIN = 0.5


@dataclass(frozen=True)
class SamplingConfig:
    n_samples: int = 64
    stratified: bool = True
    importance_resample: int | None = None

    def __post_init__(self):
        if self.n_samples < 2:
            raise DomainError("need at least two samples per ray")


@dataclass(frozen=True)
class Background:
    colour: tuple = (0.8, 0.8, 0.8)

    def __post_init__(self):
        c = tuple(float(v) for v in self.colour)
        if len(c) != 3 or min(c) <= 0 or max(c) > 1:
            raise DomainError("background components must lie in (0, 1]")
        object.__setattr__(self, "colour", c)

    @property
    def array(self):
        return np.array(self.colour)


@dataclass
class RenderBatch:
    """Forward state of a batch of R rays with S samples each."""

    origins: np.ndarray
    dirs: np.ndarray
    q: np.ndarray  # (R, S) sample depths
    t_far: np.ndarray
    background: np.ndarray
    rgb: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    sigma: np.ndarray
    colour: np.ndarray
    dsigma: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray  # (R, S+1)

    def __len__(self):
        return len(self.rgb)

    @property
    def kappa(self) -> np.ndarray:
        return np.concatenate([np.diff(self.q, axis=1), (self.t_far - self.q[:, -1])[:, None]], axis=1)


def ray_intervals(grid: RadianceGrid, origins, dirs):
    """Unit scene sphere intersected with the box where the grid can hold density."""
    t0, t1 = ray_sphere_interval(origins, dirs)
    lo, hi = grid.support_box()
    b0, b1 = ray_aabb_interval(origins, dirs, lo, hi)
    tn = np.maximum(t0, b0)
    tf = np.minimum(t1, b1)
    miss = ~(tf > tn)
    return np.where(miss, 0.0, tn), np.where(miss, 0.0, tf)


def sample_depths(t_near, t_far, n_samples, rng: np.random.Generator | None, u=None):
    """Stratified depths (one per equal bin); bin midpoints when ``rng`` is None.

    ``u`` (R, S) in [0, 1) fixes the in-bin offsets instead of drawing them.
    """
    t_near = np.asarray(t_near, dtype=np.float64)
    span = np.asarray(t_far, dtype=np.float64) - t_near
    if u is not None:
        u = np.asarray(u, dtype=np.float64)
    elif rng is None:
        u = np.full((len(t_near), n_samples), 0.5)
    else:
        u = rng.random((len(t_near), n_samples))
    frac = (np.arange(n_samples) + u) / n_samples
    return t_near[:, None] + frac * span[:, None]


def _importance_depths(batch: RenderBatch, t_near, n_extra, rng):
    """Inverse-CDF draws over the sample bins, weighted by w_i, merged with the originals."""
    edges = np.concatenate([batch.q, batch.t_far[:, None]], axis=1)
    pdf = batch.weights + 1e-5
    cdf = np.cumsum(pdf, axis=1)
    cdf = np.concatenate([np.zeros((len(cdf), 1)), cdf / cdf[:, -1:]], axis=1)
    u = rng.random((len(cdf), n_extra)) if rng is not None else np.broadcast_to(
        (np.arange(n_extra) + 0.5) / n_extra, (len(cdf), n_extra))
    out = np.empty((len(cdf), n_extra))
    for r in range(len(cdf)):
        idx = np.clip(np.searchsorted(cdf[r], u[r], side="right") - 1, 0, edges.shape[1] - 2)
        lo_c, hi_c = cdf[r, idx], cdf[r, idx + 1]
        frac = (u[r] - lo_c) / np.maximum(hi_c - lo_c, 1e-12)
        out[r] = edges[r, idx] + frac * (edges[r, idx + 1] - edges[r, idx])
    return np.sort(np.concatenate([batch.q, out], axis=1), axis=1)


def render_depths(grid: RadianceGrid, origins, dirs, q, t_far, background) -> RenderBatch:
    """Render rays at the given per-ray sample depths q (R, S)."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    t_far = np.ascontiguousarray(t_far, dtype=np.float64)
    bg = np.ascontiguousarray(background, dtype=np.float64)
    R, S = q.shape
    b = RenderBatch(origins, dirs, q, t_far, bg,
                    rgb=np.empty((R, 3)), depth=np.empty(R), opacity=np.empty(R),
                    sigma=np.empty((R, S)), colour=np.empty((R, S, 3)), dsigma=np.empty((R, S)),
                    weights=np.empty((R, S)), transmittance=np.empty((R, S + 1)))
    _kernels.render_forward(grid.params, grid.lo, grid.hi, grid.clip_array, origins, dirs, q, t_far, bg,
                            b.rgb, b.depth, b.opacity, b.sigma, b.colour, b.dsigma, b.weights,
                            b.transmittance)
    return b


def render_rays(grid: RadianceGrid, origins, dirs, t_near, t_far, cfg: SamplingConfig,
                bg: Background, rng: np.random.Generator | None = None, u=None) -> RenderBatch:
    """Batched render; rays with an empty interval come back as pure background.

    ``u`` optionally supplies the stratified in-bin offsets (see ``sample_depths``).
    """
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    if np.any(t_far < t_near):
        raise DomainError("t_far below t_near")
    if not cfg.stratified:
        u = None
    q = sample_depths(t_near, t_far, cfg.n_samples, rng if cfg.stratified else None, u)
    batch = render_depths(grid, origins, dirs, q, t_far, bg.array)
    if cfg.importance_resample:
        q = _importance_depths(batch, t_near, cfg.importance_resample, rng)
        batch = render_depths(grid, origins, dirs, q, t_far, bg.array)
    return batch


def render_rays_adjoint(batch: RenderBatch, dl_drgb, grid: RadianceGrid, grad_buffer: np.ndarray):
    """Reverse-mode pass: add d loss / d grid.params into ``grad_buffer``."""
    if grad_buffer.shape != grid.params.shape:
        raise DomainError("gradient buffer does not match the grid")
    g = np.ascontiguousarray(dl_drgb, dtype=np.float64).reshape(len(batch), 3)
    _kernels.render_adjoint(grid.params, grid.lo, grid.hi, grid.clip_array, batch.origins, batch.dirs,
                            batch.q, batch.t_far, batch.background, batch.sigma, batch.colour,
                            batch.dsigma, batch.weights, batch.transmittance, g, grad_buffer)


@dataclass
class RenderResult:
    """Single-ray view of a RenderBatch."""

    rgb: np.ndarray
    depth: float
    opacity: float
    q: np.ndarray
    kappa: np.ndarray
    transmittance: np.ndarray  # T_1..T_{S+1}
    weights: np.ndarray
    sigma: np.ndarray
    colour: np.ndarray
    batch: RenderBatch | None = None


def render_ray(grid: RadianceGrid, ray: Ray, cfg: SamplingConfig, bg: Background, rng_seed=None) -> RenderResult:
    rng = None if rng_seed is None else np.random.default_rng(rng_seed)
    if ray.empty:
        return RenderResult(bg.array.copy(), 0.0, 0.0, np.zeros(0), np.zeros(0), np.ones(1),
                            np.zeros(0), np.zeros(0), np.zeros((0, 3)))
    b = render_rays(grid, ray.origin[None], ray.direction[None], [ray.t_near], [ray.t_far], cfg, bg, rng)
    return RenderResult(b.rgb[0], float(b.depth[0]), float(b.opacity[0]), b.q[0], b.kappa[0],
                        b.transmittance[0], b.weights[0], b.sigma[0], b.colour[0], b)


def render_ray_adjoint(result: RenderResult, dl_drgb, grid: RadianceGrid, grad_buffer: np.ndarray):
    if result.batch is None:
        return
    render_rays_adjoint(result.batch, np.asarray(dl_drgb)[None], grid, grad_buffer)


def render_view(grid: RadianceGrid, cam: CameraIntrinsics, pose: Pose, cfg: SamplingConfig,
                bg: Background, rng_seed=None, chunk: int = 16384):
    """RGB (H, W, 3) and depth (H, W) at pixel centres; depth is 0 where opacity < 0.5."""
    ys, xs = np.mgrid[: cam.height, : cam.width]
    xs, ys = xs.ravel(), ys.ravel()
    o, d = pixel_rays(cam, pose, xs, ys)
    tn, tf = ray_intervals(grid, o, d)
    rng = None if rng_seed is None else np.random.default_rng(rng_seed)
    rgb = np.empty((len(xs), 3))
    depth = np.empty(len(xs))
    for s in range(0, len(xs), chunk):
        sl = slice(s, s + chunk)
        b = render_rays(grid, o[sl], d[sl], tn[sl], tf[sl], cfg, bg, rng)
        rgb[sl] = b.rgb
        depth[sl] = np.where(b.opacity >= DEPTH_OPACITY_MIN, b.depth, 0.0)
    return rgb.reshape(cam.height, cam.width, 3), depth.reshape(cam.height, cam.width)

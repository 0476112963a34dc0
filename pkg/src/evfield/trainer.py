"""Event-supervised optimisation of a RadianceGrid.

Each step draws one event window (t0, t], renders the selected pixels from the
poses at t0 and t with shared sub-pixel jitter and sample offsets, and regresses the difference of
log renders on the accumulated event frame, on each pixel's Bayer channel only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .errors import DomainError, NumericalAbort
from .events import BayerMask, EventStream, WindowSampler, accumulate, sample_window, select_rays
from .field import RadianceGrid
from .geometry import CameraIntrinsics, pixel_rays
from .renderer import Background, SamplingConfig, render_rays, render_rays_adjoint, ray_intervals
from .rng import substream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_windows: int = 1000
    l_max: float = 0.05
    beta: float = 0.1
    gamma: float = 2.2
    iterations: int = 30000
    learning_rate: float = 5e-3
    density_lr: float | None = None  # defaults to learning_rate
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 1.0  # lr multiplier reached at the last iteration (exponential)
    batch_rays: int = 4096  # cap on positive rays per window
    log_floor: float = 1e-4
    rng_seed: int = 0
    fixed_window: float | None = None  # constant window length instead of U(0, l_max]
    grayscale: bool = False  # supervise all three channels with the same value
    jitter: bool = True

    def __post_init__(self):
        for name in ("n_windows", "l_max", "gamma", "learning_rate", "adam_eps", "batch_rays",
                     "log_floor", "lr_decay"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.beta < 0 or self.iterations < 0:
            raise DomainError("beta and iterations must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise DomainError("Adam betas must lie in [0, 1)")
        if self.density_lr is not None and not self.density_lr > 0:
            raise DomainError("density_lr must be positive")

    def lr_at(self, iteration: int) -> float:
        if self.iterations <= 1 or self.lr_decay == 1.0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** (iteration / (self.iterations - 1))

    def lr_scale(self, n_channels: int) -> np.ndarray:
        scale = np.ones(n_channels)
        if self.density_lr is not None and n_channels == 4:
            scale[0] = self.density_lr / self.learning_rate
        return scale


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, cfg: TrainConfig,
              lr: float | None = None):
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DomainError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        bad = np.argwhere(~np.isfinite(grads))[0]
        raise NumericalAbort("non-finite gradient", index=tuple(int(b) for b in bad), step=state.step)
    state.step += 1
    lr = cfg.learning_rate if lr is None else lr
    bc1 = 1.0 - cfg.adam_beta1 ** state.step
    bc2 = 1.0 - cfg.adam_beta2 ** state.step
    scale = cfg.lr_scale(params.shape[-1] if params.ndim else 1)
    _kernels.adam_update(params, grads, state.m, state.v, lr, scale,
                         cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, bc1, bc2)


def log_render(rgb: np.ndarray, g: float, floor: float = 1e-4) -> np.ndarray:
    """Log intensity of rendered linear colour, ln(max(rgb, floor)) / g."""
    if not g > 0:
        raise DomainError("gamma must be positive")
    return np.log(np.maximum(rgb, floor)) / g


def wrap_time(t: float, duration: float) -> float:
    return t + duration if t < 0 else t


@dataclass
class WindowResult:
    loss: float
    n_positive: int
    n_negative: int
    residual: np.ndarray | None = None
    pixels: np.ndarray | None = None
    jitter: np.ndarray | None = None


def window_loss(grid: RadianceGrid, stream: EventStream, window, trajectory, cam: CameraIntrinsics,
                cfg: TrainConfig, bg: Background, sampling: SamplingConfig,
                grad_buffer: np.ndarray | None = None, rng: np.random.Generator | None = None,
                mask: BayerMask | None = None) -> WindowResult:
    """Mean squared log-difference residual of one window.

    Gradients are added into ``grad_buffer`` when given.  Returns a result with
    ``n_positive == 0`` (and zero loss) when the window holds no events.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    t0, t = window
    frame = accumulate(stream, t0, t, mask)
    pos, neg = select_rays(frame, cfg.beta, rng)
    if len(pos) == 0:
        return WindowResult(0.0, 0, 0)
    if len(pos) > cfg.batch_rays:
        pos = pos[np.sort(rng.choice(len(pos), cfg.batch_rays, replace=False))]
        n_neg = min(len(neg), math.ceil(cfg.beta * cfg.batch_rays - 1e-9))
        neg = neg[np.sort(rng.choice(len(neg), n_neg, replace=False))]
    pix = np.concatenate([pos, neg])
    n = len(pix)
    xs, ys = pix[:, 0], pix[:, 1]
    jitter = rng.random((n, 2)) if cfg.jitter else np.full((n, 2), 0.5)

    pose0 = trajectory.pose_at(wrap_time(t0, stream.duration))
    pose1 = trajectory.pose_at(t)
    # same sensor point seen from both poses
    o0, d0 = pixel_rays(cam, pose0, xs, ys, jitter)
    o1, d1 = pixel_rays(cam, pose1, xs, ys, jitter)
    o = np.concatenate([o1, o0])
    d = np.concatenate([d1, d0])
    tn, tf = ray_intervals(grid, o, d)
    # the pair also shares stratified offsets so a static pixel differences to exactly zero
    u = rng.random((n, sampling.n_samples))
    batch = render_rays(grid, o, d, tn, tf, sampling, bg, rng, np.concatenate([u, u]))
    rgb1, rgb0 = batch.rgb[:n], batch.rgb[n:]

    E = frame.values[ys, xs]
    if cfg.grayscale:
        sel = np.ones((n, 3), dtype=bool)
    else:
        bayer = mask or frame.mask
        sel = np.eye(3, dtype=bool)[bayer.channel(xs, ys)]
    L1 = log_render(rgb1, cfg.gamma, cfg.log_floor)
    L0 = log_render(rgb0, cfg.gamma, cfg.log_floor)
    resid = np.where(sel, L1 - L0 - E[:, None], 0.0)
    count = sel.sum()
    loss = float((resid ** 2).sum() / count)
    if not math.isfinite(loss):
        bad = int(np.argmax(~np.isfinite(resid).all(axis=1)))
        raise NumericalAbort("non-finite window loss", window=(t0, t), pixel=tuple(int(v) for v in pix[bad]))

    if grad_buffer is not None:
        g_res = 2.0 * resid / count
        dlog1 = np.where(rgb1 > cfg.log_floor, 1.0 / (cfg.gamma * np.maximum(rgb1, cfg.log_floor)), 0.0)
        dlog0 = np.where(rgb0 > cfg.log_floor, 1.0 / (cfg.gamma * np.maximum(rgb0, cfg.log_floor)), 0.0)
        dl_drgb = np.concatenate([g_res * dlog1, -g_res * dlog0])
        render_rays_adjoint(batch, dl_drgb, grid, grad_buffer)
    return WindowResult(loss, len(pos), len(neg), resid, pix, jitter)


@dataclass
class TrainResult:
    grid: RadianceGrid
    losses: list = field(default_factory=list)
    state: AdamState | None = None
    iterations_done: int = 0


def window_order(cfg: TrainConfig, epoch: int) -> np.ndarray:
    return substream(cfg.rng_seed, "windows", epoch).permutation(cfg.n_windows) + 1


def train(grid: RadianceGrid, stream: EventStream, trajectory, cam: CameraIntrinsics, cfg: TrainConfig,
          bg: Background, sampling: SamplingConfig | None = None, state: AdamState | None = None,
          start_iteration: int = 0, callback=None, mask: BayerMask | None = None) -> TrainResult:
    """Optimise ``grid`` in place, one window per step, until ``cfg.iterations`` steps in total.

    Resuming with the saved ``state`` and ``start_iteration`` reproduces the
    uninterrupted run: window order, ray draws and learning rate depend only on
    the absolute iteration.  ``callback(iteration, loss, grid)`` runs after every
    step; returning True stops early.
    """
    sampling = sampling or SamplingConfig()
    sampler = WindowSampler(cfg.n_windows, cfg.l_max, stream.duration, stream.loop_closed,
                            int(substream(cfg.rng_seed, "window-length").integers(2**62)),
                            cfg.fixed_window)
    state = state or AdamState.zeros_like(grid.params)
    grad = np.zeros_like(grid.params)
    losses = []
    it = start_iteration
    while it < cfg.iterations:
        epoch, slot = divmod(it, cfg.n_windows)
        i = int(window_order(cfg, epoch)[slot])
        window = sample_window(sampler, i, epoch)
        rng = substream(cfg.rng_seed, "rays", it)
        grad.fill(0.0)
        try:
            res = window_loss(grid, stream, window, trajectory, cam, cfg, bg, sampling, grad, rng, mask)
        except NumericalAbort as exc:
            exc.context.update(iteration=it, window_index=i)
            raise
        if res.n_positive:
            adam_step(grid.params, grad, state, cfg, cfg.lr_at(it))
        losses.append(res.loss)
        it += 1
        if callback is not None and callback(it, res.loss, grid):
            break
    return TrainResult(grid, losses, state, it)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)

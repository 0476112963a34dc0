"""Evaluation protocol: one log-space colour transform per sequence, then PSNR/SSIM."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DomainError

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-4
LUMA = np.array([0.2126, 0.7152, 0.0722])
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class ColourTransform:
    """f(I) = exp(a * log I + b), per channel."""

    a: np.ndarray
    b: np.ndarray
    degenerate: tuple = ()  # channels where the predictions had zero log-variance

    def apply(self, img):
        return np.exp(self.a * np.log(np.maximum(img, LOG_FLOOR)) + self.b)

    def to_text(self) -> str:
        return (f"a {' '.join(repr(float(v)) for v in self.a)}\n"
                f"b {' '.join(repr(float(v)) for v in self.b)}\n")


def fit_colour_transform(preds, gts) -> ColourTransform:
    """Per-channel least squares of log G on log I, pooled over all images."""
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    gts = [np.asarray(g, dtype=np.float64) for g in gts]
    if len(preds) != len(gts) or not preds:
        raise DomainError("need equal, non-zero numbers of predictions and ground truths")
    if any(p.shape != g.shape for p, g in zip(preds, gts)):
        raise DomainError("prediction and ground-truth shapes differ")
    x = np.concatenate([np.log(np.maximum(p, LOG_FLOOR)).reshape(-1, 3) for p in preds])
    y = np.concatenate([np.log(np.maximum(g, LOG_FLOOR)).reshape(-1, 3) for g in gts])
    mx, my = x.mean(axis=0), y.mean(axis=0)
    dx, dy = x - mx, y - my
    var = (dx * dx).sum(axis=0)
    cov = (dx * dy).sum(axis=0)
    a = np.zeros(3)
    degenerate = []
    spread = x.max(axis=0) - x.min(axis=0)  # var can round to a tiny positive on constants
    for c in range(3):
        if spread[c] > 0 and var[c] > 0:
            a[c] = cov[c] / var[c]
        else:
            degenerate.append(c)
    if degenerate:
        log.warning("zero-variance prediction channels %s; gain set to 0", degenerate)
    b = my - a * mx
    return ColourTransform(a, b, tuple(degenerate))


def psnr(pred, gt, max_value: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DomainError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = np.mean((np.clip(pred, 0, 1) - np.clip(gt, 0, 1)) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * math.log10(max_value ** 2 / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, win):
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    r = len(win) // 2
    return out[r: img.shape[0] - r, r: img.shape[1] - r]


def _ssim_plane(x, y, data_range=1.0):
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def ssim(pred, gt, per_channel: bool = False) -> float:
    """Single-scale SSIM (11x11 Gaussian, sigma 1.5) on the luminance of clipped images."""
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0, 1)
    gt = np.clip(np.asarray(gt, dtype=np.float64), 0, 1)
    if pred.shape != gt.shape:
        raise DomainError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.shape[0] < SSIM_WIN or pred.shape[1] < SSIM_WIN:
        raise DomainError("images must be at least 11x11 for SSIM")
    if pred.ndim == 2:
        return _ssim_plane(pred, gt)
    if per_channel:
        return float(np.mean([_ssim_plane(pred[..., c], gt[..., c]) for c in range(pred.shape[2])]))
    return _ssim_plane(pred @ LUMA, gt @ LUMA)


@dataclass
class EvalReport:
    psnr: list
    ssim: list
    transform: ColourTransform
    images: list = field(default_factory=list, repr=False)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["view", "psnr", "ssim"])
            for k, (p, s) in enumerate(zip(self.psnr, self.ssim)):
                w.writerow([k, repr(p), repr(s)])
            w.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim)])


def evaluate_images(preds, gts, per_channel_ssim: bool = False) -> EvalReport:
    tf = fit_colour_transform(preds, gts)
    out = [np.clip(tf.apply(p), 0.0, 1.0) for p in preds]
    return EvalReport([psnr(o, g) for o, g in zip(out, gts)],
                      [ssim(o, g, per_channel_ssim) for o, g in zip(out, gts)], tf, out)


def evaluate_sequence(grid, cam, poses, gt_images, g: float = 2.2, bg=None, sampling=None,
                      per_channel_ssim: bool = False) -> EvalReport:
    """Render every pose at pixel centres and score against ``gt_images``.

    ``g`` is accepted for symmetry with training; the fit happens in natural-log space.
    """
    from .renderer import Background, SamplingConfig, render_view

    if len(poses) != len(gt_images):
        raise DomainError("one ground-truth image per pose")
    bg = bg or Background()
    sampling = sampling or SamplingConfig()
    preds = [render_view(grid, cam, p, sampling, bg)[0] for p in poses]
    return evaluate_images(preds, gt_images, per_channel_ssim)

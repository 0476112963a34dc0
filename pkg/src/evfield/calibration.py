"""Turntable pose calibration.

Camera centres estimated around a rotating object lie on a circle.  Solve for a
residual pitch ``tilt_alpha`` shared by all views, together with the point
``center`` where the pitch-corrected optical axes meet and the distance
``radius`` from every camera to that point.  Minimised per view:

    miss(ray, center)^2 + (|p - center| - radius)^2 + ((p - center).n - radius*sin(altitude))^2

where n is the normal of the camera circle.  The last term fixes the height of
the meeting point along the rotation axis; without it any pitch can be
absorbed by sliding the meeting point along the axis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, NumericalAbort
from .geometry import CircleTrajectory, Pose, rot_x
from .trainer import AdamState, TrainConfig, adam_step

log = logging.getLogger(__name__)


@dataclass
class CalibObservation:
    poses: list
    altitude_angle: float = 0.0  # elevation of the cameras seen from the meeting point

    def __post_init__(self):
        if len(self.poses) < 3:
            raise DomainError("need at least three views")
        p = self.positions
        if np.linalg.matrix_rank(p[1:] - p[0], tol=1e-9 * max(1.0, np.abs(p).max())) < 2:
            raise DomainError("camera centres are collinear")

    @property
    def positions(self) -> np.ndarray:
        return np.array([q.translation for q in self.poses])

    @property
    def rotations(self) -> np.ndarray:
        return np.array([q.rotation for q in self.poses])


@dataclass
class CalibSolution:
    tilt_alpha: float
    center: np.ndarray
    radius: float
    residual: float = 0.0
    loss_history: list = field(default_factory=list, repr=False)
    lr_drops: list = field(default_factory=list, repr=False)

    def to_text(self) -> str:
        c = " ".join(repr(float(v)) for v in self.center)
        return (f"tilt_alpha_rad {self.tilt_alpha!r}\ntilt_alpha_deg {math.degrees(self.tilt_alpha)!r}\n"
                f"center {c}\nradius {self.radius!r}\nresidual {self.residual!r}\n")


def circle_normal(obs: CalibObservation) -> np.ndarray:
    p = obs.positions
    _, _, vt = np.linalg.svd(p - p.mean(axis=0))
    n = vt[2]
    up = -obs.rotations[:, :, 1].mean(axis=0)  # image y points down
    return n if n @ up >= 0 else -n


def initial_guess(obs: CalibObservation) -> CalibSolution:
    p = obs.positions
    n = circle_normal(obs)
    centroid = p.mean(axis=0)
    ring = np.linalg.norm(p - centroid, axis=1).mean()
    # the meeting point sits below the circle centre by ring*tan(altitude)
    center = centroid - n * ring * math.tan(obs.altitude_angle)
    radius = float(np.linalg.norm(p - center, axis=1).mean())
    return CalibSolution(0.0, center, radius)


def _principal_dirs(R, alpha):
    local = np.array([0.0, math.sin(alpha), math.cos(alpha)])  # rot_x(-alpha) @ e_z
    dlocal = np.array([0.0, math.cos(alpha), -math.sin(alpha)])
    return R @ local, R @ dlocal


def loss_and_grad(theta: np.ndarray, obs: CalibObservation, n: np.ndarray):
    """Mean per-view loss and its gradient wrt theta = (alpha, cx, cy, cz, radius)."""
    alpha, c, r = theta[0], theta[1:4], theta[4]
    p = obs.positions
    d, dd = _principal_dirs(obs.rotations, alpha)
    v = c - p
    proj = np.einsum("ij,ij->i", v, d)
    miss2 = np.einsum("ij,ij->i", v, v) - proj ** 2
    dist = np.linalg.norm(v, axis=1)
    e1 = dist - r
    s = math.sin(obs.altitude_angle)
    e2 = -(v @ n) - r * s
    m = len(p)
    loss = float((miss2 + e1 ** 2 + e2 ** 2).mean())
    g = np.zeros(5)
    g[0] = np.mean(-2 * proj * np.einsum("ij,ij->i", v, dd))
    g[1:4] = (2 * (v - proj[:, None] * d) + 2 * (e1 / dist)[:, None] * v - 2 * e2[:, None] * n).sum(axis=0) / m
    g[4] = np.mean(-2 * e1 - 2 * e2 * s)
    return loss, g, miss2


def calibrate(obs: CalibObservation, init: CalibSolution | None = None, iterations: int = 40000,
              lr: float = 1e-3, patience: int = 50, factor: float = 0.5, min_lr: float = 1e-13,
              rel_tol: float = 1e-4, tol: float = 1e-28) -> CalibSolution:
    """Adam with learning-rate reduction whenever the loss plateaus."""
    init = init or initial_guess(obs)
    n = circle_normal(obs)
    theta = np.concatenate([[init.tilt_alpha], init.center, [init.radius]]).astype(np.float64)
    cfg = TrainConfig(learning_rate=lr)
    state = AdamState.zeros_like(theta)
    best = math.inf
    best_theta = theta.copy()
    stall = 0
    first = None
    history, drops = [], []
    for it in range(iterations):
        loss, g, _ = loss_and_grad(theta, obs, n)
        if not math.isfinite(loss):
            raise NumericalAbort("calibration loss is not finite", iteration=it, theta=theta.tolist())
        if first is None:
            # Adam's first moves are ~lr in every coordinate even at the optimum
            first = max(loss, lr * lr * max(1.0, init.radius) ** 2)
        elif loss > 10 * first:
            raise NumericalAbort("calibration diverged", iteration=it, loss=loss, history=history[-20:])
        history.append(loss)
        if loss < best * (1 - rel_tol):
            best, best_theta, stall = loss, theta.copy(), 0
        else:
            stall += 1
            if loss < best:
                best, best_theta = loss, theta.copy()
        if stall >= patience:
            lr *= factor
            stall = 0
            drops.append(it)
            # restart from the best point with fresh moments
            theta = best_theta.copy()
            state = AdamState.zeros_like(theta)
            if lr < min_lr:
                break
            continue
        if loss <= tol:
            break
        adam_step(theta, g, state, cfg, lr)
    d, _ = _principal_dirs(obs.rotations, best_theta[0])
    v = best_theta[1:4] - obs.positions
    # explicit perpendicular component; |v|^2 - proj^2 cancels badly near zero
    perp = v - np.einsum("ij,ij->i", v, d)[:, None] * d
    rms = float(np.sqrt(np.einsum("ij,ij->i", perp, perp).mean()))
    return CalibSolution(float(best_theta[0]), best_theta[1:4].copy(), float(best_theta[4]),
                         rms, history, drops)


def principal_miss(poses, center) -> np.ndarray:
    """Distance from ``center`` to each camera's optical axis."""
    c = np.asarray(center)
    out = []
    for p in poses:
        v = c - p.translation
        d = p.rotation[:, 2]
        out.append(np.linalg.norm(v - (v @ d) * d))
    return np.array(out)


def apply_correction(traj: CircleTrajectory, sol: CalibSolution) -> CircleTrajectory:
    """Re-centre the trajectory and remove the fitted pitch from its cameras."""
    return replace(traj, center=tuple(float(v) for v in sol.center), radius=float(sol.radius),
                   tilt=traj.tilt - sol.tilt_alpha)


def corrected_poses(poses, alpha: float):
    return [Pose(p.rotation @ rot_x(-alpha), p.translation) for p in poses]

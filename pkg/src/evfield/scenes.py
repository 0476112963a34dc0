"""Analytic desk-scale scenes used as ground truth for end-to-end checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import CameraIntrinsics, CircleTrajectory, Pose, pixel_rays
from .simulator import FrameSequence


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple

    def intersect(self, o, d):
        oc = o - np.asarray(self.center)
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - c
        s = np.sqrt(np.maximum(disc, 0.0))
        t = np.where(-b - s > 0, -b - s, -b + s)
        hit = (disc > 0) & (t > 0)
        return np.where(hit, t, np.inf)

    def normal(self, x):
        n = x - np.asarray(self.center)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def extent(self) -> float:
        return float(np.linalg.norm(self.center) + self.radius)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    albedo: tuple

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (np.asarray(self.lo) - o) / d
            tb = (np.asarray(self.hi) - o) / d
        tmin = np.nanmax(np.minimum(ta, tb), axis=1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=1)
        t = np.where(tmin > 0, tmin, tmax)
        hit = (tmax >= tmin) & (t > 0)
        return np.where(hit, t, np.inf)

    def normal(self, x):
        c = (np.asarray(self.lo) + np.asarray(self.hi)) / 2
        h = (np.asarray(self.hi) - np.asarray(self.lo)) / 2
        u = (x - c) / h
        axis = np.argmax(np.abs(u), axis=-1)
        n = np.zeros_like(x)
        n[np.arange(len(x)), axis] = np.sign(u[np.arange(len(x)), axis])
        return n

    def extent(self) -> float:
        corners = np.array([[a, b, c] for a in (self.lo[0], self.hi[0])
                            for b in (self.lo[1], self.hi[1]) for c in (self.lo[2], self.hi[2])])
        return float(np.linalg.norm(corners, axis=1).max())


@dataclass(frozen=True)
class ProceduralScene:
    primitives: tuple
    background: tuple = (0.8, 0.8, 0.8)
    shading: str = "flat"  # or "lambert"
    light_dir: tuple = (0.3, -0.4, 0.87)
    ambient: float = 0.35

    def __post_init__(self):
        for p in self.primitives:
            if p.extent() > 1.0:
                raise DomainError("primitives must fit inside the unit sphere")
            if min(p.albedo) <= 0 or max(p.albedo) >= 1:
                raise DomainError("albedo components must lie in (0, 1)")
        if self.shading not in ("flat", "lambert"):
            raise DomainError(f"unknown shading {self.shading!r}")


def tricolour_sphere() -> ProceduralScene:
    """Red, green and blue spheres inside the default clipping cylinder."""
    return ProceduralScene((
        Sphere((0.10, 0.00, -0.12), 0.10, (0.75, 0.12, 0.10)),
        Sphere((-0.07, 0.09, -0.05), 0.09, (0.15, 0.60, 0.15)),
        Sphere((-0.06, -0.11, -0.22), 0.09, (0.12, 0.20, 0.70)),
    ))


def trace(scene: ProceduralScene, o, d):
    """Colour and hit depth per ray; misses return the background and depth 0."""
    best = np.full(len(o), np.inf)
    which = np.full(len(o), -1)
    for k, prim in enumerate(scene.primitives):
        t = prim.intersect(o, d)
        closer = t < best
        best[closer] = t[closer]
        which[closer] = k
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (len(o), 3)).copy()
    hit = which >= 0
    for k, prim in enumerate(scene.primitives):
        m = which == k
        if not m.any():
            continue
        col = np.asarray(prim.albedo, dtype=np.float64)
        if scene.shading == "lambert":
            x = o[m] + best[m, None] * d[m]
            light = np.asarray(scene.light_dir) / np.linalg.norm(scene.light_dir)
            lam = np.clip(prim.normal(x) @ light, 0.0, 1.0)
            rgb[m] = col * (scene.ambient + (1 - scene.ambient) * lam)[:, None]
        else:
            rgb[m] = col
    return rgb, np.where(hit, best, 0.0)


def render_ground_truth(scene: ProceduralScene, cam: CameraIntrinsics, pose: Pose, supersample: int = 1):
    """Exact ray-cast render: RGB (H, W, 3) and hit depth (H, W), 0 where nothing is hit.

    With ``supersample > 1`` colour is box-filtered over an s x s sub-pixel grid;
    depth always comes from the pixel centre.
    """
    ys, xs = np.mgrid[: cam.height, : cam.width]
    xs, ys = xs.ravel(), ys.ravel()
    o, d = pixel_rays(cam, pose, xs, ys)
    rgb, depth = trace(scene, o, d)
    if supersample > 1:
        acc = np.zeros_like(rgb)
        offs = (np.arange(supersample) + 0.5) / supersample
        for jy in offs:
            for jx in offs:
                o2, d2 = pixel_rays(cam, pose, xs, ys, (jx, jy))
                acc += trace(scene, o2, d2)[0]
        rgb = acc / supersample ** 2
    return rgb.reshape(cam.height, cam.width, 3), depth.reshape(cam.height, cam.width)


def is_closed_loop(traj: CircleTrajectory) -> bool:
    turns = traj.angular_velocity * traj.duration / (2 * math.pi)
    return abs(turns - round(turns)) < 1e-9 and round(turns) != 0


def make_dataset(scene: ProceduralScene, trajectory: CircleTrajectory, cam: CameraIntrinsics,
                 n_views: int, gamma: float = 2.2, supersample: int = 1) -> FrameSequence:
    """Views at t_start + k*duration/n_views for k = 0..n_views.

    The closing frame at t_end is included so the simulated stream spans the
    whole trajectory; on a closed loop it is a copy of the first frame.
    """
    if n_views < 2:
        raise DomainError("need at least two views")
    ts = trajectory.t_start + trajectory.duration * np.arange(n_views + 1) / n_views
    frames = [render_ground_truth(scene, cam, trajectory.pose_at(t), supersample)[0] for t in ts[:-1]]
    if is_closed_loop(trajectory):
        frames.append(frames[0].copy())
    else:
        frames.append(render_ground_truth(scene, cam, trajectory.pose_at(ts[-1]), supersample)[0])
    return FrameSequence(np.stack(frames), ts - trajectory.t_start, gamma)


@dataclass(frozen=True)
class ToySetup:
    scene: ProceduralScene
    cam: CameraIntrinsics
    trajectory: CircleTrajectory


def toy_setup(size: int = 96, radius: float = 4.0, altitude_deg: float = 30.0,
              view_width: float = 0.62) -> ToySetup:
    """Tricolour scene, a camera framing ``view_width`` scene units at the orbit centre."""
    f = size * radius / view_width
    cam = CameraIntrinsics(f, f, size / 2.0, size / 2.0, size, size)
    traj = CircleTrajectory(center=(0.0, 0.0, -0.1), radius=radius,
                            altitude_angle=math.radians(altitude_deg))
    return ToySetup(tricolour_sphere(), cam, traj)

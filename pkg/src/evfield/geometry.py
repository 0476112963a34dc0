"""Pinhole cameras, poses, per-pixel rays and circular camera trajectories.

Conventions: right-handed world with +z up; the camera looks along its own +z
axis with image x to the right and image y downward.  ``Pose.rotation`` maps
camera-frame vectors to the world frame and ``Pose.translation`` is the camera
centre in world units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise DomainError("sensor must be at least 1x1 pixels")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point must lie on the sensor")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x: float) -> "CameraIntrinsics":
        """Square-pixel camera with horizontal field of view ``fov_x`` (radians)."""
        f = 0.5 * width / math.tan(0.5 * fov_x)
        return cls(f, f, width / 2.0, height / 2.0, width, height)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() >= ORTHO_TOL or np.linalg.det(R) <= 0:
            raise DomainError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def position(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"], dtype=np.float64), np.array(d["translation"], dtype=np.float64))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise DomainError("ray direction must be unit length")
        if self.t_near < 0 or self.t_far < self.t_near:
            raise DomainError("ray interval must satisfy 0 <= t_near <= t_far")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)

    @property
    def empty(self) -> bool:
        return not self.t_far > self.t_near

    def at(self, q):
        return self.origin + np.multiply.outer(q, self.direction)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera rotation for a camera at ``position`` facing ``target``."""
    f = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    f /= np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise DomainError("viewing direction is parallel to the up vector")
    right /= n
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


@dataclass(frozen=True)
class CircleTrajectory:
    """Camera moving uniformly on a circle about the vertical axis through ``center``.

    ``altitude_angle`` is the elevation of the camera above the circle centre's
    horizontal plane.  ``tilt`` is a residual pitch of the camera about its own
    horizontal axis; with ``tilt == 0`` the optical axis passes through the centre.
    """

    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 4.0
    altitude_angle: float = math.radians(30.0)
    angular_velocity: float = 2 * math.pi
    t_start: float = 0.0
    t_end: float = 1.0
    phase: float = 0.0
    tilt: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("radius must be positive")
        if not self.t_start < self.t_end:
            raise DomainError("t_start must precede t_end")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def from_rpm(cls, rpm: float, revolutions: float = 1.0, **kw) -> "CircleTrajectory":
        omega = rpm * 2 * math.pi / 60.0
        return cls(angular_velocity=omega, t_start=0.0, t_end=revolutions * 60.0 / rpm, **kw)

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def angle(self, t: float) -> float:
        return self.phase + self.angular_velocity * (t - self.t_start)

    def pose_at(self, t: float) -> Pose:
        return pose_at_time(self, t)

    def to_dict(self):
        return {"center": list(self.center), "radius": self.radius,
                "altitude_angle": self.altitude_angle, "angular_velocity": self.angular_velocity,
                "t_start": self.t_start, "t_end": self.t_end, "phase": self.phase, "tilt": self.tilt}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if k == "center" else float(v)) for k, v in d.items()})


def pose_at_time(traj: CircleTrajectory, t: float) -> Pose:
    # tiny slack so t_end computed as duration*i/n never trips the check
    slack = 1e-12 * max(1.0, abs(traj.t_end))
    if not (traj.t_start - slack <= t <= traj.t_end + slack):
        raise DomainError(f"t={t} outside trajectory [{traj.t_start}, {traj.t_end}]")
    theta = traj.angle(t)
    phi = traj.altitude_angle
    c = np.asarray(traj.center)
    offset = traj.radius * np.array([math.cos(phi) * math.cos(theta),
                                     math.cos(phi) * math.sin(theta),
                                     math.sin(phi)])
    pos = c + offset
    R = look_at(pos, c)
    if traj.tilt:
        R = R @ rot_x(traj.tilt)
    return Pose(R, pos)


@dataclass(frozen=True)
class PoseTable:
    """Explicit per-timestamp poses; ``pose_at`` returns the nearest entry."""

    timestamps: np.ndarray
    poses: tuple = field(default_factory=tuple)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if len(ts) != len(self.poses) or len(ts) == 0:
            raise DomainError("need one pose per timestamp")
        if np.any(np.diff(ts) < 0):
            raise DomainError("timestamps must be sorted")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))

    def pose_at(self, t: float) -> Pose:
        i = int(np.searchsorted(self.timestamps, t))
        if i == len(self.timestamps):
            i -= 1
        elif i > 0 and t - self.timestamps[i - 1] <= self.timestamps[i] - t:
            i -= 1
        return self.poses[i]


def perturb_pose(pose: Pose, angle: float, rng: np.random.Generator) -> Pose:
    """Rotate the camera by ``angle`` radians about a uniformly random axis."""
    axis = rng.normal(size=3)
    return Pose(axis_angle(axis, angle) @ pose.rotation, pose.translation)


def _check_jitter(dx, dy):
    if not (0 <= dx < 1 and 0 <= dy < 1):
        raise DomainError("jitter components must lie in [0, 1)")


def camera_directions(cam: CameraIntrinsics, xs, ys, jitter) -> np.ndarray:
    """Unnormalised camera-frame directions through sensor points (x+dx, y+dy)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    jitter = np.broadcast_to(np.asarray(jitter, dtype=np.float64), xs.shape + (2,))
    u = xs + jitter[..., 0]
    v = ys + jitter[..., 1]
    return np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)


def pixel_rays(cam: CameraIntrinsics, pose: Pose, xs, ys, jitter=(0.5, 0.5)):
    """Vectorised ray generation; returns (origins, unit directions), shape (N, 3)."""
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    if xs.size and (xs.min() < 0 or ys.min() < 0 or xs.max() >= cam.width or ys.max() >= cam.height):
        raise DomainError("pixel outside the sensor")
    d = camera_directions(cam, xs, ys, jitter) @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return o, d


def ray_sphere_interval(origins, dirs, center=(0.0, 0.0, 0.0), radius=1.0):
    """Entry/exit depths against a sphere (unit-length dirs); misses give (0, 0)."""
    oc = np.asarray(origins, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    b = np.einsum("...i,...i->...", oc, dirs)
    c = np.einsum("...i,...i->...", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc > 0
    s = np.sqrt(np.where(hit, disc, 0.0))
    t0 = np.maximum(-b - s, 0.0)
    t1 = -b + s
    hit &= t1 > t0
    return np.where(hit, t0, 0.0), np.where(hit, t1, 0.0)


def ray_aabb_interval(origins, dirs, lo, hi):
    """Slab test against an axis-aligned box; misses give (0, 0)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (np.asarray(lo) - o) * inv
        tb = (np.asarray(hi) - o) * inv
    tmin = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
    tmax = np.where(np.isnan(ta), np.inf, np.maximum(ta, tb))
    t0 = np.maximum(tmin.max(axis=-1), 0.0)
    t1 = tmax.min(axis=-1)
    hit = t1 > t0
    return np.where(hit, t0, 0.0), np.where(hit, t1, 0.0)


def pixel_ray(cam: CameraIntrinsics, pose: Pose, x: int, y: int, jitter=(0.5, 0.5)) -> Ray:
    if not (0 <= x < cam.width and 0 <= y < cam.height):
        raise DomainError(f"pixel ({x}, {y}) outside {cam.width}x{cam.height} sensor")
    _check_jitter(*jitter)
    o, d = pixel_rays(cam, pose, np.array([x]), np.array([y]), np.asarray(jitter)[None])
    tn, tf = ray_sphere_interval(o, d)
    return Ray(o[0], d[0], float(tn[0]), float(tf[0]))


# -- pose manifest ---------------------------------------------------------

def write_pose_manifest(path, cam: CameraIntrinsics, poses=None, timestamps=None,
                        trajectory: CircleTrajectory | None = None):
    doc = {"intrinsics": cam.to_dict()}
    if trajectory is not None:
        doc["trajectory"] = trajectory.to_dict()
    if poses is not None:
        ts = [None] * len(poses) if timestamps is None else [float(t) for t in timestamps]
        doc["poses"] = [dict(p.to_dict(), t=t) for p, t in zip(poses, ts)]
    Path(path).write_text(json.dumps(doc, indent=1))


def read_pose_manifest(path):
    """Returns ``(intrinsics, source)``; source is a CircleTrajectory or a PoseTable."""
    doc = json.loads(Path(path).read_text())
    unknown = set(doc) - {"intrinsics", "trajectory", "poses"}
    if unknown:
        raise DomainError(f"unknown manifest keys: {sorted(unknown)}")
    cam = CameraIntrinsics.from_dict(doc["intrinsics"])
    if "poses" in doc:
        entries = doc["poses"]
        ts = [e.get("t") for e in entries]
        if any(t is None for t in ts):
            ts = list(range(len(entries)))
        return cam, PoseTable(np.array(ts, dtype=np.float64), tuple(Pose.from_dict(e) for e in entries))
    if "trajectory" in doc:
        return cam, CircleTrajectory.from_dict(doc["trajectory"])
    raise DomainError("manifest needs either 'poses' or 'trajectory'")

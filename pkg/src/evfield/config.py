"""Run configuration: one JSON document covering every stage of the pipeline.

Sections map onto the module config dataclasses and are validated by them on
load.  Unknown keys anywhere are rejected so typos never pass silently.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DomainError
from .events import RGGB, BayerMask
from .field import CylinderClip, RadianceGrid
from .geometry import CameraIntrinsics, CircleTrajectory
from .renderer import Background, SamplingConfig
from .simulator import SimulatorConfig
from .trainer import TrainConfig


@dataclass
class CameraSection:
    width: int = 96
    height: int = 96
    fx: float = 96 * 4.0 / 0.62
    fy: float = 96 * 4.0 / 0.62
    cx: float | None = None  # defaults to the image centre
    cy: float | None = None

    def build(self) -> CameraIntrinsics:
        cx = self.width / 2.0 if self.cx is None else self.cx
        cy = self.height / 2.0 if self.cy is None else self.cy
        return CameraIntrinsics(self.fx, self.fy, cx, cy, self.width, self.height)


@dataclass
class TrajectorySection:
    center: tuple = (0.0, 0.0, -0.1)
    radius: float = 4.0
    altitude_deg: float = 30.0
    revolutions: float = 1.0
    duration: float = 1.0
    tilt_deg: float = 0.0

    def build(self) -> CircleTrajectory:
        if not self.duration > 0:
            raise DomainError("trajectory duration must be positive")
        return CircleTrajectory(center=tuple(self.center), radius=self.radius,
                                altitude_angle=math.radians(self.altitude_deg),
                                angular_velocity=2 * math.pi * self.revolutions / self.duration,
                                t_start=0.0, t_end=self.duration, tilt=math.radians(self.tilt_deg))


@dataclass
class SceneSection:
    name: str = "tricolour-sphere"
    n_views: int = 300
    supersample: int = 4  # anti-aliased frames; point-sampled edges disagree with jittered training rays
    gamma: float = 2.2


@dataclass
class SimulatorSection:
    threshold: float = 0.1
    bayer: bool = True
    floor: float = 1e-4
    noise_fraction: float = 0.0
    sweep: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.4])

    def build(self, width: int, height: int, loop_closed: bool) -> SimulatorConfig:
        if self.noise_fraction < 0:
            raise DomainError("noise_fraction must be non-negative")
        mask = BayerMask(width, height, RGGB) if self.bayer else None
        return SimulatorConfig(self.threshold, mask, self.floor, loop_closed)


@dataclass
class GridSection:
    resolution: int = 64
    lo: tuple = (-0.25, -0.25, -0.35)
    hi: tuple = (0.25, 0.25, 0.15)
    clip: bool = True
    r_max: float = 0.25
    z_min: float = -0.35
    z_max: float = 0.15
    init_density: float = 0.01

    def build(self) -> RadianceGrid:
        clip = CylinderClip(self.r_max, self.z_min, self.z_max) if self.clip else None
        return RadianceGrid.create((self.resolution,) * 3, tuple(self.lo), tuple(self.hi), clip,
                                   self.init_density)


@dataclass
class SamplingSection:
    n_samples: int = 48
    stratified: bool = True
    importance_resample: int | None = None

    def build(self) -> SamplingConfig:
        return SamplingConfig(self.n_samples, self.stratified, self.importance_resample)


@dataclass
class EvalSection:
    n_views: int = 8
    n_samples: int = 128
    per_channel_ssim: bool = False


@dataclass
class PathsSection:
    frames: str = "frames"
    events: str = "events.evt"
    manifest: str = "poses.json"
    run_dir: str = "run"
    gt_dir: str = "gt"
    out_dir: str = "out"


# Optimiser settings for 64^3 grids.  Window-loss gradients are ~1e-8 per parameter,
# so eps sits above them: barely observed voxels then move in proportion to their
# gradient instead of taking full lr-sized steps.
RUN_TRAIN_DEFAULTS = dict(learning_rate=0.05, density_lr=0.3, adam_eps=1e-6, lr_decay=0.1)

SECTIONS = {
    "camera": CameraSection,
    "trajectory": TrajectorySection,
    "scene": SceneSection,
    "simulator": SimulatorSection,
    "grid": GridSection,
    "train": TrainConfig,
    "sampling": SamplingSection,
    "eval": EvalSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    background: tuple = (0.8, 0.8, 0.8)
    camera: CameraSection = field(default_factory=CameraSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    scene: SceneSection = field(default_factory=SceneSection)
    simulator: SimulatorSection = field(default_factory=SimulatorSection)
    grid: GridSection = field(default_factory=GridSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**RUN_TRAIN_DEFAULTS))
    sampling: SamplingSection = field(default_factory=SamplingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "RunConfig":
        """Build every module object once so their invariants are checked now."""
        cam = self.camera.build()
        self.trajectory.build()
        self.simulator.build(cam.width, cam.height, True)
        g = self.grid
        if g.resolution < 2:
            raise DomainError("grid resolution must be at least 2")
        if len(g.lo) != 3 or len(g.hi) != 3 or not all(a < b for a, b in zip(g.lo, g.hi)):
            raise DomainError("grid lo must be below hi on every axis")
        if g.clip:
            CylinderClip(g.r_max, g.z_min, g.z_max)
        self.sampling.build()
        Background(tuple(self.background))
        if self.scene.n_views < 2 or self.eval.n_views < 1:
            raise DomainError("need at least two scene views and one eval view")
        return self

    @property
    def bg(self) -> Background:
        return Background(tuple(self.background))

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        del doc["train"]["rng_seed"]  # always the root seed
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _section(cls, doc, name, hidden=(), defaults=None):
    if not isinstance(doc, dict):
        raise DomainError(f"section {name!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(hidden)
    unknown = set(doc) - names
    if unknown:
        raise DomainError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kw = {k: (tuple(v) if isinstance(v, list) and k in ("center", "lo", "hi") else v) for k, v in doc.items()}
    try:
        return cls(**{**(defaults or {}), **kw})
    except TypeError as exc:
        raise DomainError(f"bad section {name!r}: {exc}") from None


def from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - set(SECTIONS) - {"seed", "background"}
    if unknown:
        raise DomainError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {}
    for name, cls in SECTIONS.items():
        if name == "train" and name in doc:
            kw[name] = _section(cls, doc[name], name, ("rng_seed",), RUN_TRAIN_DEFAULTS)
        elif name in doc:
            kw[name] = _section(cls, doc[name], name)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise DomainError("seed must be a non-negative integer")
    cfg = RunConfig(seed=seed, background=tuple(doc.get("background", (0.8,) * 3)), **kw)
    cfg.train = dataclasses.replace(cfg.train, rng_seed=seed)
    return cfg.validate()


def load(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config {p} not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DomainError(f"{p}: invalid JSON ({exc})") from None
    return from_dict(doc)


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    doc = cfg.to_dict()
    for pair in pairs or ():
        if "=" not in pair:
            raise DomainError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise DomainError(f"unknown config section {part!r}")
            node = node[part]
        if parts[-1] not in node:
            raise DomainError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(doc)

"""Portable float map (PFM) and 8-bit LDR image files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DomainError


def write_pfm(path, img: np.ndarray):
    """Write a (H, W) or (H, W, 3) float image, little-endian float32, top row first."""
    img = np.asarray(img)
    if img.ndim == 2:
        kind = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        kind = b"PF"
    else:
        raise DomainError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        # PFM rows run bottom to top
        f.write(np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise DomainError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise DomainError(f"{path}: truncated pixel data")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def to_ldr(img: np.ndarray, gamma: float = 2.2) -> np.ndarray:
    """Linear light in [0, 1] to 8-bit after the 1/gamma display curve."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) ** (1.0 / gamma)
    return np.round(v * 255.0).astype(np.uint8)


def from_ldr(img: np.ndarray, gamma: float = 2.2) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) / 255.0) ** gamma


def write_png(path, img: np.ndarray, gamma: float | None = 2.2):
    """``img`` is linear light unless gamma is None, in which case it is written as is."""
    arr = img if gamma is None else to_ldr(img, gamma)
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


# -- frame directories (simulator input) --------------------------------------

def write_frame_dir(directory, frames, timestamps, gamma=2.2):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for k, frame in enumerate(frames):
        name = f"{k:05d}.pfm"
        write_pfm(d / name, frame)
        names.append(name)
    manifest = {"frames": names, "timestamps": [float(t) for t in timestamps], "gamma": gamma,
                "encoding": "linear"}
    (d / "timestamps.json").write_text(json.dumps(manifest, indent=1))


def read_frame_dir(directory):
    """Returns (frames float64 (N, H, W, 3), timestamps, gamma).

    8-bit PNG frames are decoded through the gamma curve when the manifest says
    ``"encoding": "srgb"``.
    """
    d = Path(directory)
    mpath = d / "timestamps.json"
    if not mpath.exists():
        raise FileNotFoundError(f"missing timestamp manifest {mpath}")
    manifest = json.loads(mpath.read_text())
    gamma = float(manifest.get("gamma", 2.2))
    srgb = manifest.get("encoding", "linear") == "srgb"
    frames = []
    for name in manifest["frames"]:
        p = d / name
        if p.suffix.lower() == ".pfm":
            img = read_pfm(p).astype(np.float64)
        else:
            img = read_png(p)
            img = from_ldr(img, gamma) if srgb else img / 255.0
        frames.append(img)
    return np.stack(frames), np.asarray(manifest["timestamps"], dtype=np.float64), gamma

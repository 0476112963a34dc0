"""Command-line entry point: ``evfield <command> [options]``.

Exit codes: 0 success, 2 input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import config as runconfig
from .calibration import CalibObservation, apply_correction, calibrate, corrected_poses
from .errors import DomainError, NumericalAbort
from .events import RGGB, BayerMask, accumulate, inject_noise, read_evt, write_evt
from .field import load_grid, save_grid
from .geometry import CircleTrajectory, read_pose_manifest, write_pose_manifest
from .imageio import read_frame_dir, write_frame_dir, write_pfm, write_png
from .metrics import evaluate_sequence
from .renderer import SamplingConfig, render_view
from .rng import subseed
from .scenes import is_closed_loop, make_dataset, render_ground_truth, tricolour_sphere
from .simulator import FrameSequence, simulate
from .trainer import AdamState, train

log = logging.getLogger("evfield")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

SCENES = {"tricolour-sphere": tricolour_sphere}

CHECKPOINT = "checkpoint.rfg"
STATE = "state.npz"


def _scene(cfg):
    if cfg.scene.name not in SCENES:
        raise DomainError(f"unknown scene {cfg.scene.name!r}; known: {sorted(SCENES)}")
    return SCENES[cfg.scene.name]()


def eval_times(cfg) -> np.ndarray:
    """Held-out times halfway between consecutive training frames."""
    dur = cfg.trajectory.duration
    n = cfg.eval.n_views
    k = np.floor((np.arange(n) + 0.5) / n * cfg.scene.n_views)
    return (k + 0.5) * dur / cfg.scene.n_views


# -- commands ---------------------------------------------------------------

def cmd_dataset(cfg, args):
    """Render training frames, held-out ground truth and the pose manifest."""
    scene = _scene(cfg)
    cam = cfg.camera.build()
    traj = cfg.trajectory.build()
    seq = make_dataset(scene, traj, cam, cfg.scene.n_views, cfg.scene.gamma, cfg.scene.supersample)
    write_frame_dir(cfg.paths.frames, seq.frames, seq.timestamps, seq.gamma)
    write_pose_manifest(cfg.paths.manifest, cam, trajectory=traj)
    ts = eval_times(cfg)
    gts = [render_ground_truth(scene, cam, traj.pose_at(t), cfg.scene.supersample)[0] for t in ts]
    write_frame_dir(cfg.paths.gt_dir, gts, ts, cfg.scene.gamma)
    print(f"wrote {len(seq.frames)} frames to {cfg.paths.frames}, {len(gts)} eval views to {cfg.paths.gt_dir}")


def _load_frames(cfg):
    frames, ts, gamma = read_frame_dir(cfg.paths.frames)
    return FrameSequence(frames, ts, gamma)


def _loop_closed(cfg):
    path = Path(cfg.paths.manifest)
    if not path.exists():
        return False
    _, src = read_pose_manifest(path)
    return isinstance(src, CircleTrajectory) and is_closed_loop(src)


def _simulate_one(cfg, seq, threshold, loop_closed):
    sim = dataclasses.replace(cfg.simulator, threshold=threshold).build(seq.width, seq.height, loop_closed)
    stream = simulate(seq, sim)
    if cfg.simulator.noise_fraction > 0:
        stream = inject_noise(stream, fraction=cfg.simulator.noise_fraction,
                              rng_seed=subseed(cfg.seed, "noise"))
    return stream


def _sweep_events_path(cfg, d) -> Path:
    out = Path(cfg.paths.events)
    return out.with_name(f"{out.stem}_d{d:g}{out.suffix}")


def _sweep_configs(cfg):
    """One config per swept threshold, reading its own events and owning its own run dir."""
    for d in cfg.simulator.sweep:
        paths = dataclasses.replace(cfg.paths, events=str(_sweep_events_path(cfg, d)),
                                    run_dir=str(Path(cfg.paths.run_dir) / f"d{d:g}"))
        yield float(d), dataclasses.replace(cfg, paths=paths)


def cmd_simulate(cfg, args):
    seq = _load_frames(cfg)
    loop = _loop_closed(cfg)
    if args.sweep:
        out = Path(cfg.paths.events)
        rows = []
        for d in cfg.simulator.sweep:
            stream = _simulate_one(cfg, seq, float(d), loop)
            path = _sweep_events_path(cfg, d)
            write_evt(path, stream)
            rows.append((d, len(stream), str(path)))
            print(f"threshold {d:g}: {len(stream)} events -> {path}")
        with open(out.with_name(f"{out.stem}_sweep.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "events", "file"])
            w.writerows(rows)
        return
    stream = _simulate_one(cfg, seq, cfg.simulator.threshold, loop)
    write_evt(cfg.paths.events, stream)
    rate = len(stream) / stream.duration if stream.duration > 0 else 0.0
    print(f"{len(stream)} events over {stream.duration:g} s ({rate:.1f} ev/s) -> {cfg.paths.events}")


def _trajectory(cfg):
    path = Path(cfg.paths.manifest)
    if not path.exists():
        raise FileNotFoundError(f"pose manifest {path} not found")
    return read_pose_manifest(path)


def cmd_train(cfg, args):
    if args.sweep:
        for d, sub in _sweep_configs(cfg):
            print(f"threshold {d:g}:")
            _train_one(sub, args)
        return
    _train_one(cfg, args)


def _train_one(cfg, args):
    cam, traj = _trajectory(cfg)
    stream = read_evt(cfg.paths.events, loop_closed=isinstance(traj, CircleTrajectory) and is_closed_loop(traj))
    if (stream.width, stream.height) != (cam.width, cam.height):
        raise DomainError("event stream and camera resolutions differ")
    run = Path(cfg.paths.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    grid = cfg.grid.build()
    state, start = None, 0
    if args.resume:
        saved = np.load(run / STATE)
        grid.params[...] = saved["params"]
        state = AdamState(saved["m"].copy(), saved["v"].copy(), int(saved["step"]))
        start = int(saved["iteration"])
    else:
        with open(run / "loss.csv", "w", newline="") as f:
            csv.writer(f).writerow(["iteration", "loss"])
    (run / "config.json").write_text(cfg.dumps())
    mask = BayerMask(cam.width, cam.height, RGGB)
    rows = []
    t0 = time.perf_counter()

    def progress(it, loss, grid_now):
        rows.append((it, loss))
        if it % max(1, args.log_every) == 0:
            print(f"iter {it} loss {loss:.6g} ({time.perf_counter() - t0:.1f} s)", flush=True)
        if args.checkpoint_every and it % args.checkpoint_every == 0:
            save_grid(run / f"checkpoint_{it:07d}.rfg", grid_now)

    try:
        res = train(grid, stream, traj, cam, cfg.train, cfg.bg, cfg.sampling.build(), state, start,
                    progress, mask)
    finally:
        with open(run / "loss.csv", "a", newline="") as f:
            csv.writer(f).writerows((i, repr(v)) for i, v in rows)
    save_grid(run / CHECKPOINT, res.grid)
    st = res.state or AdamState.zeros_like(grid.params)
    np.savez(run / STATE, params=res.grid.params, m=st.m, v=st.v, step=st.step,
             iteration=res.iterations_done)
    print(f"trained to iteration {res.iterations_done}; checkpoint {run / CHECKPOINT}")


def _checkpoint(cfg, explicit=None):
    path = Path(explicit or Path(cfg.paths.run_dir) / CHECKPOINT)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_grid(path)


def _render_one(grid, cam, pose, sampling, cfg, stem):
    rgb, depth = render_view(grid, cam, pose, sampling, cfg.bg)
    write_pfm(f"{stem}.pfm", rgb)
    write_png(f"{stem}.png", rgb, cfg.scene.gamma)
    write_pfm(f"{stem}_depth.pfm", depth)


def cmd_render(cfg, args):
    grid = _checkpoint(cfg, args.checkpoint)
    cam, traj = _trajectory(cfg)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sampling = SamplingConfig(cfg.eval.n_samples, stratified=False)
    if args.orbit:
        if not isinstance(traj, CircleTrajectory):
            raise DomainError("orbit mode needs a trajectory manifest")
        orbit = dataclasses.replace(traj, angular_velocity=2 * math.pi / traj.duration)
        for k in range(args.orbit):
            t = orbit.t_start + orbit.duration * k / args.orbit
            _render_one(grid, cam, orbit.pose_at(t), sampling, cfg, out / f"orbit_{k:04d}")
        print(f"wrote {args.orbit} orbit frames to {out}")
        return
    t = float(args.time)
    _render_one(grid, cam, traj.pose_at(t), sampling, cfg, out / f"view_{t:.6f}")
    print(f"wrote {out / f'view_{t:.6f}'}.pfm/.png/_depth.pfm")


def _evaluate(cfg, grid):
    cam, traj = _trajectory(cfg)
    gts, ts, _ = read_frame_dir(cfg.paths.gt_dir)
    poses = [traj.pose_at(t) for t in ts]
    return evaluate_sequence(grid, cam, poses, list(gts), cfg.scene.gamma, cfg.bg,
                             SamplingConfig(cfg.eval.n_samples, stratified=False), cfg.eval.per_channel_ssim)


def cmd_eval(cfg, args):
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        rows = []
        for d, sub in _sweep_configs(cfg):
            rep = _evaluate(sub, _checkpoint(sub))
            n = len(read_evt(sub.paths.events))
            rows.append((d, n, rep.mean_psnr, rep.mean_ssim))
            print(f"threshold {d:g}: {n} events, PSNR {rep.mean_psnr:.3f} dB, SSIM {rep.mean_ssim:.4f}")
        with open(out / "sweep_eval.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "events", "psnr", "ssim"])
            w.writerows(rows)
        return
    rep = _evaluate(cfg, _checkpoint(cfg, args.checkpoint))
    rep.write_csv(out / "eval.csv")
    (out / "transform.txt").write_text(rep.transform.to_text())
    print(f"mean PSNR {rep.mean_psnr:.3f} dB, mean SSIM {rep.mean_ssim:.4f} over {len(rep.psnr)} views")


def cmd_calibrate(cfg, args):
    cam, src = _trajectory(cfg)
    if isinstance(src, CircleTrajectory):
        n = args.views
        ts = src.t_start + src.duration * np.arange(n) / n
        poses, altitude = [src.pose_at(t) for t in ts], src.altitude_angle
    else:
        poses, ts = list(src.poses), src.timestamps
        altitude = math.radians(args.altitude_deg)
    sol = calibrate(CalibObservation(poses, altitude))
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "calibration.txt").write_text(sol.to_text())
    if isinstance(src, CircleTrajectory):
        write_pose_manifest(out / "poses_corrected.json", cam, trajectory=apply_correction(src, sol))
    else:
        write_pose_manifest(out / "poses_corrected.json", cam, corrected_poses(poses, sol.tilt_alpha), ts)
    print(f"tilt {math.degrees(sol.tilt_alpha):.6f} deg, radius {sol.radius:.6g}, residual {sol.residual:.3g}")


def polarity_image(values: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Signed accumulation as RGB in [0, 1]: gray at zero, red positive, blue negative."""
    scale = scale or max(float(np.abs(values).max()), 1e-12)
    a = np.clip(values / scale, -1.0, 1.0)
    pos, neg = np.maximum(a, 0.0), np.maximum(-a, 0.0)
    img = np.empty(values.shape + (3,))
    img[..., 0] = 0.5 + 0.5 * pos - 0.5 * neg
    img[..., 1] = 0.5 - 0.5 * pos - 0.5 * neg
    img[..., 2] = 0.5 - 0.5 * pos + 0.5 * neg
    return img


def cmd_accumview(cfg, args):
    loop = _loop_closed(cfg)
    stream = read_evt(cfg.paths.events, loop_closed=loop)
    frame = accumulate(stream, args.t0, args.t1)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"accum_{args.t0:.6f}_{args.t1:.6f}"
    write_png(f"{stem}.png", polarity_image(frame.values, args.scale), gamma=1.0)
    write_pfm(f"{stem}.pfm", frame.values)
    print(f"{int(np.abs(frame.counts).sum())} net polarity over {frame.n_events_pixels} pixels -> {stem}.png")


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evfield", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.iterations=100")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads; 1 makes runs reproducible")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("dataset", help="render a procedural scene into frames + ground truth")
    s = sub.add_parser("simulate", help="frames -> EVT1 event stream")
    s.add_argument("--sweep", action="store_true", help="one stream per simulator.sweep threshold")
    s = sub.add_parser("train", help="fit a radiance grid to an event stream")
    s.add_argument("--sweep", action="store_true", help="one run per simulate --sweep stream, in run_dir/d<threshold>")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--log-every", type=int, default=1000)
    s.add_argument("--checkpoint-every", type=int, default=0,
                   help="also write checkpoint_<iteration>.rfg every N iterations (0 disables)")
    s = sub.add_parser("render", help="render RGB and depth from a checkpoint")
    s.add_argument("--checkpoint")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--time", type=float, help="trajectory time of the view")
    g.add_argument("--orbit", type=int, help="number of evenly spaced orbit frames")
    s = sub.add_parser("eval", help="score renders against a ground-truth frame directory")
    s.add_argument("--checkpoint")
    s.add_argument("--sweep", action="store_true", help="score every sweep run into sweep_eval.csv")
    s = sub.add_parser("calibrate", help="fit tilt, centre and radius to a pose manifest")
    s.add_argument("--views", type=int, default=36, help="samples drawn from a trajectory manifest")
    s.add_argument("--altitude-deg", type=float, default=0.0, help="elevation for explicit pose lists")
    s = sub.add_parser("accumview", help="visualise the accumulated events of (t0, t1]")
    s.add_argument("t0", type=float)
    s.add_argument("t1", type=float)
    s.add_argument("--scale", type=float, help="value mapped to full saturation")
    return p


COMMANDS = {"dataset": cmd_dataset, "simulate": cmd_simulate, "train": cmd_train, "render": cmd_render,
            "eval": cmd_eval, "calibrate": cmd_calibrate, "accumview": cmd_accumview}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = runconfig.load(args.config) if args.config else runconfig.from_dict({})
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = runconfig.apply_overrides(cfg, overrides)
        if args.threads:
            import numba
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        COMMANDS[args.command](cfg, args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc} {json.dumps(exc.context, default=str)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DomainError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria (4 to 7) share cached training runs on the toy scene and
take roughly an hour on one core; select them with ``-m slow`` or skip them with
``-m "not slow"``.
"""

import dataclasses
import functools
import math
import time

import numpy as np
import pytest

from evfield import config as runconfig
from evfield.calibration import CalibObservation, calibrate
from evfield.cli import eval_times
from evfield.events import RGGB, BayerMask, EventStream, inject_noise, read_evt, write_evt
from evfield.field import CylinderClip, RadianceGrid, load_grid, save_grid
from evfield.geometry import CameraIntrinsics, CircleTrajectory, Pose, PoseTable, axis_angle
from evfield.geometry import read_pose_manifest, write_pose_manifest
from evfield.imageio import read_pfm, write_pfm
from evfield.metrics import evaluate_images, evaluate_sequence, fit_colour_transform
from evfield.renderer import Background, SamplingConfig, render_depths, render_rays, render_rays_adjoint, \
    render_view, sample_depths
from evfield.rng import subseed
from evfield.scenes import make_dataset, render_ground_truth, toy_setup
from evfield.simulator import SimulatorConfig, log_image, mosaic, simulate
from evfield.trainer import TrainConfig, train, window_loss

RESULTS = {}


def report(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# -- 1 ---------------------------------------------------------------------

def test_criterion_01_simulator_inversion():
    setup = toy_setup(64)
    seq = make_dataset(setup.scene, setup.trajectory, setup.cam, 199)
    assert len(seq.frames) == 200
    delta = 0.1
    mask = BayerMask(64, 64, RGGB)
    start = time.perf_counter()
    stream = simulate(seq, SimulatorConfig(delta, mask))
    elapsed = time.perf_counter() - start
    L = log_image(mosaic(seq.frames, mask), seq.gamma)
    # the orbit is closed so the first and last frames coincide; check every frame boundary instead
    frame_of = np.searchsorted(seq.timestamps, stream.t, side="left")
    pix = stream.y.astype(np.int64) * 64 + stream.x
    net = np.zeros((len(seq.frames), 64 * 64))
    np.add.at(net, (frame_of, pix), stream.p.astype(np.float64))
    net = np.cumsum(net, axis=0).reshape(-1, 64, 64)
    err = np.abs(delta * net - (L - L[0])).max()
    ok = err <= delta and elapsed < 10 and len(stream) > 0
    report(1, ok, f"max |D*sum p - dL| over all 200 frames = {err:.4f} <= {delta}, {len(stream)} events, {elapsed:.2f} s")


# -- 2 ---------------------------------------------------------------------

def test_criterion_02_renderer_conservation():
    rng = np.random.default_rng(2)
    n = 10_000
    start = time.perf_counter()
    worst, monotone = 0.0, True
    for k in range(4):
        res = int(rng.integers(2, 17))
        grid = RadianceGrid((res,) * 3, (-1,) * 3, (1,) * 3, rng.normal(0, 3, (res, res, res, 4)))
        m = n // 4
        o = rng.uniform(-1.5, 1.5, (m, 3))
        d = rng.normal(size=(m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        b = render_rays(grid, o, d, np.zeros(m), rng.uniform(0.1, 3, m), SamplingConfig(64), Background(), rng)
        worst = max(worst, np.abs(b.weights.sum(axis=1) + b.transmittance[:, -1] - 1).max())
        T = b.transmittance
        monotone &= bool(np.all(np.diff(T, axis=1) <= 0) and np.all(T >= 0) and np.all(T <= 1))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and monotone and elapsed < 5
    report(2, ok, f"max |sum w + T - 1| = {worst:.2e}, monotone T = {monotone}, {elapsed:.2f} s")


# -- 3 ---------------------------------------------------------------------

def test_criterion_03_gradients():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    cam = CameraIntrinsics(10.0, 10.0, 4.0, 4.0, 8, 8)
    traj = CircleTrajectory(radius=2.5)
    grid = RadianceGrid((4, 4, 4), (-0.5,) * 3, (0.5,) * 3, rng.normal(0, 1.0, (4, 4, 4, 4)))
    n = 80
    stream = EventStream(np.sort(rng.uniform(0, 1, n)), rng.integers(0, 8, n), rng.integers(0, 8, n),
                         rng.choice([-1, 1], n), 8, 8, 0.15, 1.0)
    cfg, samp, window = TrainConfig(beta=0.5), SamplingConfig(24), (0.25, 0.45)

    def loss():
        return window_loss(grid, stream, window, traj, cam, cfg, Background(), samp,
                           rng=np.random.default_rng(7)).loss

    g = np.zeros_like(grid.params)
    window_loss(grid, stream, window, traj, cam, cfg, Background(), samp, g, np.random.default_rng(7))
    cand = np.argwhere(np.abs(g) > 1e-3 * np.abs(g).max())
    picks = cand[rng.choice(len(cand), 20, replace=False)]
    worst_loss = 0.0
    step = 1e-5
    for idx in map(tuple, picks):
        old = grid.params[idx]
        grid.params[idx] = old + step
        up = loss()
        grid.params[idx] = old - step
        dn = loss()
        grid.params[idx] = old
        fd = (up - dn) / (2 * step)
        worst_loss = max(worst_loss, abs(fd - g[idx]) / abs(fd))

    # renderer adjoint against finite differences on every parameter
    o = np.array([[0.1, -0.2, -1.5], [-1.5, 0.3, 0.1], [0.2, 1.5, -0.3]])
    d = np.array([[0.05, 0.1, 1.0], [1.0, -0.1, 0.05], [-0.1, -1.0, 0.2]])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tf = np.full(3, 2.8)
    q = sample_depths(np.full(3, 0.3), tf, 24, rng)
    w = rng.normal(size=(3, 3))
    bg = Background().array
    g2 = np.zeros_like(grid.params)
    render_rays_adjoint(render_depths(grid, o, d, q, tf, bg), w, grid, g2)
    fd2 = np.zeros_like(g2)
    for idx in np.ndindex(grid.params.shape):
        old = grid.params[idx]
        grid.params[idx] = old + 1e-3
        up = (render_depths(grid, o, d, q, tf, bg).rgb * w).sum()
        grid.params[idx] = old - 1e-3
        dn = (render_depths(grid, o, d, q, tf, bg).rgb * w).sum()
        grid.params[idx] = old
        fd2[idx] = (up - dn) / 2e-3
    worst_adj = np.abs(g2 - fd2).max() / np.abs(fd2).max()
    elapsed = time.perf_counter() - start
    ok = worst_loss < 1e-3 and worst_adj < 1e-4 and elapsed < 30
    report(3, ok, f"window loss rel err {worst_loss:.2e} < 1e-3, adjoint err {worst_adj:.2e} < 1e-4, "
                  f"{elapsed:.1f} s")


# -- 4 to 7: shared end-to-end runs -----------------------------------------

@dataclasses.dataclass
class ToyRun:
    psnr: float
    ssim: float
    background_mse: float
    n_events: int
    depth_within_2_voxels: float
    train_seconds: float
    total_seconds: float


@functools.lru_cache(maxsize=None)
def toy_data():
    cfg = runconfig.from_dict({})
    setup = toy_setup(cfg.camera.width)
    seq = make_dataset(setup.scene, setup.trajectory, setup.cam, cfg.scene.n_views, cfg.scene.gamma,
                       cfg.scene.supersample)
    poses = [setup.trajectory.pose_at(t) for t in eval_times(cfg)]
    gts = [render_ground_truth(setup.scene, setup.cam, p, cfg.scene.supersample) for p in poses]
    return cfg, setup, seq, poses, gts


@functools.lru_cache(maxsize=None)
def toy_run(threshold=0.1, beta=0.1, fixed_window=None, noise=0.0) -> ToyRun:
    """The toy-scene pipeline at the default run configuration, with one knob changed."""
    start = time.perf_counter()
    cfg, setup, seq, poses, gts = toy_data()
    mask = BayerMask(seq.width, seq.height, RGGB)
    stream = simulate(seq, SimulatorConfig(threshold, mask, cfg.simulator.floor, True))
    if noise:
        stream = inject_noise(stream, fraction=noise, rng_seed=subseed(cfg.seed, "noise"))
    train_cfg = dataclasses.replace(cfg.train, beta=beta, fixed_window=fixed_window)
    grid = cfg.grid.build()
    t0 = time.perf_counter()
    train(grid, stream, setup.trajectory, setup.cam, train_cfg, cfg.bg, cfg.sampling.build())
    train_seconds = time.perf_counter() - t0
    rep = evaluate_sequence(grid, setup.cam, poses, [g for g, _ in gts], bg=cfg.bg,
                            sampling=SamplingConfig(cfg.eval.n_samples, stratified=False))
    # background region: pixels with no primitive anywhere in their footprint; supersampled
    # silhouette pixels have depth 0 at the centre but blend sphere colour
    bg_colour = np.asarray(cfg.background)
    bg_err = [((img - g) ** 2)[(depth == 0) & np.all(np.abs(g - bg_colour) < 1e-9, axis=-1)].mean()
              for img, (g, depth) in zip(rep.images, gts)]
    # depth agreement on pixels where both the model (opacity >= 0.5) and the scene are solid
    h = float(grid.voxel_size.max())
    close = []
    for p, (_, gt_depth) in zip(poses, gts):
        depth = render_view(grid, setup.cam, p, SamplingConfig(cfg.eval.n_samples, stratified=False), cfg.bg)[1]
        both = (depth > 0) & (gt_depth > 0)
        close.append(np.abs(depth - gt_depth)[both] <= 2 * h)
    run = ToyRun(rep.mean_psnr, rep.mean_ssim, float(np.mean(bg_err)), len(stream),
                 float(np.concatenate(close).mean()), train_seconds, time.perf_counter() - start)
    print(f"toy run threshold={threshold} beta={beta} fixed_window={fixed_window} noise={noise}: {run}")
    return run


@pytest.mark.slow
def test_criterion_04_end_to_end():
    run = toy_run()
    ok = run.psnr >= 25 and run.ssim >= 0.85 and run.total_seconds < 15 * 60
    report(4, ok, f"PSNR {run.psnr:.2f} dB >= 25, SSIM {run.ssim:.3f} >= 0.85, "
                  f"{run.total_seconds / 60:.1f} min < 15 ({run.n_events} events)")


@pytest.mark.slow
def test_trained_depth_matches_scene():
    # silhouette pixels of a 64^3 trilinear field legitimately miss by more, hence the 95% bar
    run = toy_run()
    print(f"depth within 2 voxel widths on {run.depth_within_2_voxels:.1%} of solid pixels")
    assert run.depth_within_2_voxels >= 0.95


@pytest.mark.slow
def test_criterion_05_ablations():
    base, no_neg, fixed = toy_run(), toy_run(beta=0.0), toy_run(fixed_window=0.05)
    ratio = no_neg.background_mse / base.background_mse
    ok = ratio >= 1.2 and no_neg.psnr < base.psnr and fixed.psnr <= base.psnr
    report(5, ok, f"beta=0 background MSE x{ratio:.2f} >= 1.2, PSNR {no_neg.psnr:.2f} < {base.psnr:.2f}; "
                  f"fixed 50 ms window PSNR {fixed.psnr:.2f} <= {base.psnr:.2f}")


@pytest.mark.slow
def test_criterion_06_threshold_sweep():
    cfg, _, seq, _, _ = toy_data()
    mask = BayerMask(seq.width, seq.height, RGGB)
    deltas = (0.05, 0.1, 0.2, 0.4)
    counts = [len(simulate(seq, SimulatorConfig(d, mask, cfg.simulator.floor, True))) for d in deltas]
    monotone = all(a >= b for a, b in zip(counts, counts[1:]))
    fine, coarse = toy_run(threshold=0.05), toy_run(threshold=0.4)
    ok = monotone and coarse.psnr <= fine.psnr - 1
    report(6, ok, f"counts {counts} non-increasing = {monotone}; "
                  f"PSNR(0.4) {coarse.psnr:.2f} <= PSNR(0.05) {fine.psnr:.2f} - 1")


@pytest.mark.slow
def test_criterion_07_noise_robustness():
    clean, noisy = toy_run(), toy_run(noise=0.15)
    drop = clean.psnr - noisy.psnr
    report(7, drop <= 1.0, f"15% noise PSNR {noisy.psnr:.2f} vs clean {clean.psnr:.2f}: drop {drop:.2f} dB <= 1")


# -- 8 ---------------------------------------------------------------------

def test_criterion_08_calibration():
    lines, ok = [], True
    for tilt in (0.0, 0.2388, 2.85):
        tr = CircleTrajectory(center=(0.1, -0.2, 0.05), radius=0.6, altitude_angle=math.radians(25.0),
                              tilt=math.radians(tilt))
        obs = CalibObservation([tr.pose_at(t) for t in np.arange(36) / 36], math.radians(25.0))
        start = time.perf_counter()
        sol = calibrate(obs)
        elapsed = time.perf_counter() - start
        err = abs(math.degrees(sol.tilt_alpha) - tilt)
        ok &= err < 0.05 and sol.residual < 1e-6 * tr.radius and elapsed < 30
        lines.append(f"{tilt}deg: err {err:.1e}deg res {sol.residual:.1e} {elapsed:.1f}s")
    report(8, ok, "; ".join(lines))


# -- 9 ---------------------------------------------------------------------

def test_criterion_09_metrics_invariance():
    rng = np.random.default_rng(9)
    grid = RadianceGrid((6, 6, 6), (-0.5,) * 3, (0.5,) * 3, rng.normal(0, 2, (6, 6, 6, 4)))
    cam = CameraIntrinsics(20.0, 20.0, 8.0, 8.0, 16, 16)
    poses = [CircleTrajectory(radius=2.0).pose_at(t) for t in (0.1, 0.4, 0.8)]
    gts = [rng.uniform(0.05, 0.95, (16, 16, 3)) for _ in poses]
    rep = evaluate_sequence(grid, cam, poses, gts)
    preds = [render_view(grid, cam, p, SamplingConfig(), Background())[0] for p in poses]
    worst = 0.0
    for _ in range(5):
        a, b = rng.uniform(0.3, 3, 3), rng.uniform(-1, 1, 3)
        other = evaluate_images([np.exp(a * np.log(p) + b) for p in preds], gts)
        worst = max(worst, np.abs(np.subtract(rep.psnr, other.psnr)).max(),
                    np.abs(np.subtract(rep.ssim, other.ssim)).max())
    ident = fit_colour_transform(gts, gts)
    exact_identity = np.allclose(ident.a, 1, atol=1e-12) and np.allclose(ident.b, 0, atol=1e-12)
    k = 0.3
    rec = fit_colour_transform([np.exp(2 * np.log(g) + k) for g in gts], gts)
    exact_recovery = np.allclose(rec.a, 0.5, atol=1e-12) and np.allclose(rec.b, -k / 2, atol=1e-12)
    ok = worst < 1e-9 and exact_identity and exact_recovery
    report(9, ok, f"max metric change {worst:.1e} < 1e-9, identity fit {exact_identity}, "
                  f"analytic recovery {exact_recovery}")


# -- 10 --------------------------------------------------------------------

def test_criterion_10_round_trips(tmp_path):
    rng = np.random.default_rng(10)
    checks = {}
    ok_evt = True
    for k in range(5):
        n = int(rng.integers(0, 2000))
        w, h = int(rng.integers(1, 400)), int(rng.integers(1, 400))
        dur = float(np.float32(rng.uniform(0.5, 5)))
        s = EventStream(np.sort(rng.uniform(0, dur, n)), rng.integers(0, w, n), rng.integers(0, h, n),
                        rng.choice([-1, 1], n), w, h, float(np.float32(rng.uniform(0.01, 1))), dur)
        write_evt(tmp_path / f"{k}.evt", s)
        back = read_evt(tmp_path / f"{k}.evt")
        ok_evt &= back.equals(s) and (tmp_path / f"{k}.evt").read_bytes() == _rewrite(back, tmp_path / "x.evt")
    checks["EVT1"] = ok_evt

    ok_rfg = True
    for k, clip in enumerate([None, CylinderClip(0.25, -0.35, 0.15)]):
        res = tuple(int(v) for v in rng.integers(2, 9, 3))
        params = rng.normal(size=res + (4,)).astype(np.float32).astype(np.float64)
        grid = RadianceGrid(res, rng.uniform(-1, -0.1, 3).astype(np.float32), rng.uniform(0.1, 1, 3).astype(np.float32),
                            params, clip)
        save_grid(tmp_path / f"{k}.rfg", grid)
        back = load_grid(tmp_path / f"{k}.rfg")
        ok_rfg &= (np.array_equal(back.params, grid.params) and back.clip == grid.clip
                   and np.array_equal(back.lo, grid.lo) and np.array_equal(back.hi, grid.hi))
    checks["RFG1"] = ok_rfg

    cam = CameraIntrinsics(*rng.uniform(10, 100, 2), *rng.uniform(0, 48, 2), 64, 48)
    poses = tuple(Pose(axis_angle(rng.normal(size=3), rng.uniform(0, 3)), rng.normal(size=3)) for _ in range(7))
    ts = np.sort(rng.uniform(0, 1, 7))
    write_pose_manifest(tmp_path / "p.json", cam, poses, ts)
    cam2, table = read_pose_manifest(tmp_path / "p.json")
    traj = CircleTrajectory(center=tuple(rng.normal(size=3)), radius=float(rng.uniform(1, 5)),
                            altitude_angle=0.3, tilt=0.01)
    write_pose_manifest(tmp_path / "t.json", cam, trajectory=traj)
    _, traj2 = read_pose_manifest(tmp_path / "t.json")
    checks["manifest"] = (cam2 == cam and isinstance(table, PoseTable) and np.array_equal(table.timestamps, ts)
                          and all(np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)
                                  for a, b in zip(table.poses, poses))
                          and traj2 == traj)

    ok_img = True
    for shape in [(5, 7), (9, 4, 3), (1, 1, 3)]:
        img = rng.normal(size=shape).astype(np.float32)
        write_pfm(tmp_path / "i.pfm", img)
        ok_img &= np.array_equal(read_pfm(tmp_path / "i.pfm"), img)
    checks["PFM"] = ok_img
    report(10, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'MISMATCH'}" for k, v in checks.items()))


def _rewrite(stream, path):
    write_evt(path, stream)
    return path.read_bytes()

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evfield.errors import DomainError
from evfield.events import (RGGB, AccumFrame, BayerMask, EventStream, WindowSampler, accumulate,
                            bayer_channel, inject_noise, read_csv, read_evt, sample_window, select_rays,
                            write_csv, write_evt)


def random_stream(rng, n=500, w=16, h=12, duration=1.0, loop=False, threshold=0.25):
    t = np.sort(rng.uniform(0, duration, n))
    return EventStream(t, rng.integers(0, w, n), rng.integers(0, h, n), rng.choice([-1, 1], n),
                       w, h, threshold, duration, loop)


def brute_counts(stream, t0, t):
    out = np.zeros((stream.height, stream.width), dtype=np.int64)
    for tau, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
        if t0 < tau <= t:
            out[y, x] += p
    return out


def test_three_events_one_pixel():
    s = EventStream([0.1, 0.2, 0.3], [1, 1, 1], [0, 0, 0], [1, 1, -1], 4, 4, 0.25, 1.0)
    f = accumulate(s, 0.0, 0.5)
    assert f.values[0, 1] == 0.25
    assert np.count_nonzero(f.values) == 1


def test_empty_window_is_zero():
    s = EventStream([0.1, 0.9], [0, 1], [0, 0], [1, 1], 4, 4, 0.1, 1.0)
    assert not accumulate(s, 0.2, 0.8).counts.any()


def test_window_bounds_are_half_open():
    s = EventStream([0.5], [0], [0], [1], 2, 2, 0.1, 1.0)
    assert accumulate(s, 0.4, 0.5).counts[0, 0] == 1
    assert accumulate(s, 0.5, 0.6).counts[0, 0] == 0


def test_accumulate_matches_brute_force(rng):
    s = random_stream(rng)
    for _ in range(10):
        t0, t = np.sort(rng.uniform(0, 1, 2))
        assert np.array_equal(accumulate(s, t0, t).counts, brute_counts(s, t0, t))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 0.99), st.floats(0, 1), st.floats(0, 1))
def test_additivity(seed, a, b, c):
    s = random_stream(np.random.default_rng(seed), n=200)
    t0, t1, t2 = sorted([a, a + (1 - a) * b * c, a + (1 - a) * b])
    if not (t0 < t1 < t2):
        return
    whole = accumulate(s, t0, t2).counts
    parts = accumulate(s, t0, t1).counts + accumulate(s, t1, t2).counts
    assert np.array_equal(whole, parts)
    v = accumulate(s, t0, t2).values / s.threshold
    assert np.abs(v - np.round(v)).max() < 1e-9


def test_wrap_matches_concatenated_stream(rng):
    s = random_stream(rng, loop=True)
    # brute force: shift the stream one period back and concatenate
    t0, t = -0.07, 0.05
    tt = np.concatenate([s.t - s.duration, s.t])
    xx = np.concatenate([s.x, s.x])
    yy = np.concatenate([s.y, s.y])
    pp = np.concatenate([s.p, s.p])
    want = np.zeros((s.height, s.width), dtype=np.int64)
    sel = (tt > t0) & (tt <= t)
    np.add.at(want, (yy[sel], xx[sel]), pp[sel])
    assert np.array_equal(accumulate(s, t0, t).counts, want)


def test_wrap_requires_loop(rng):
    s = random_stream(rng)
    with pytest.raises(DomainError):
        accumulate(s, -0.01, 0.02)
    with pytest.raises(DomainError):
        accumulate(s, 0.3, 0.3)
    with pytest.raises(DomainError):
        accumulate(s, 0.3, 1.5)


def test_stream_validation():
    with pytest.raises(DomainError):
        EventStream([0.2, 0.1], [0, 0], [0, 0], [1, 1], 2, 2, 0.1, 1.0)
    with pytest.raises(DomainError):
        EventStream([0.1], [2], [0], [1], 2, 2, 0.1, 1.0)
    with pytest.raises(DomainError):
        EventStream([0.1], [0], [0], [0], 2, 2, 0.1, 1.0)
    with pytest.raises(DomainError):
        EventStream([1.5], [0], [0], [1], 2, 2, 0.1, 1.0)


def test_sample_window_examples():
    ws = WindowSampler(1000, 0.1, 1.0, rng_seed=3)
    assert sample_window(ws, 1000)[1] == 1.0
    for i in range(1, 1001):
        t0, t = sample_window(ws, i)
        assert t == i / 1000
        assert 0 < t - t0 <= 0.1 or (t0 == 0.0 and t <= 0.1)
    assert sample_window(ws, 17) == sample_window(ws, 17)
    with pytest.raises(DomainError):
        sample_window(ws, 0)


def test_sample_window_loop_and_fixed():
    loop = WindowSampler(1000, 0.05, 1.0, loop_closed=True, rng_seed=1)
    lengths = [t - t0 for t0, t in (sample_window(loop, i) for i in range(1, 51))]
    assert all(0 < x <= 0.05 for x in lengths)
    assert any(sample_window(loop, i)[0] < 0 for i in range(1, 51))
    fixed = WindowSampler(100, 0.05, 1.0, loop_closed=True, fixed_length=0.05)
    assert all(abs(t - t0 - 0.05) < 1e-15 for t0, t in (sample_window(fixed, i) for i in range(1, 101)))


def frame_from_counts(counts, threshold=0.1):
    counts = np.asarray(counts)
    return AccumFrame(counts, threshold, (0.0, 1.0), BayerMask(counts.shape[1], counts.shape[0]))


def test_select_rays_counts():
    counts = np.zeros((50, 40), dtype=np.int64)
    counts.ravel()[:1000] = 1
    pos, neg = select_rays(frame_from_counts(counts), 0.1, 0)
    assert len(pos) == 1000 and len(neg) == 100
    pos, neg = select_rays(frame_from_counts(counts), 0.0, 0)
    assert len(neg) == 0


def test_select_rays_single_pixel():
    counts = np.zeros((4, 4), dtype=np.int64)
    counts[2, 3] = -2
    pos, neg = select_rays(frame_from_counts(counts), 1.0, 5)
    assert pos.tolist() == [[3, 2]]
    assert len(neg) == 1 and neg.tolist() != pos.tolist()
    assert counts[neg[0, 1], neg[0, 0]] == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 3), st.floats(0.01, 0.99))
def test_select_rays_properties(seed, beta, density):
    rng = np.random.default_rng(seed)
    counts = np.where(rng.random((10, 12)) < density, rng.integers(-3, 4, (10, 12)), 0)
    pos, neg = select_rays(frame_from_counts(counts), beta, seed)
    ne = np.count_nonzero(counts)
    zeros = counts.size - ne
    if ne == 0:
        assert len(pos) == 0 and len(neg) == 0
        return
    assert len(pos) == ne
    assert len(neg) == min(math.ceil(beta * ne - 1e-9), zeros)
    both = np.concatenate([pos, neg])
    assert len(np.unique(both, axis=0)) == len(both)
    assert np.all(counts[neg[:, 1], neg[:, 0]] == 0)
    assert len(both) <= (1 + beta) * ne + 1


def test_bayer_rggb():
    m = BayerMask(4, 4, RGGB)
    assert [bayer_channel(m, *xy) for xy in [(0, 0), (1, 0), (0, 1), (1, 1)]] == [0, 1, 1, 2]
    assert bayer_channel(m, 2, 1) == bayer_channel(m, 0, 1)
    assert np.bincount(m.channel_map().ravel()).tolist() == [4, 8, 4]
    assert m.expanded().sum(axis=2).min() == 1
    with pytest.raises(DomainError):
        bayer_channel(m, 4, 0)


def test_noise_fraction_and_rate(rng):
    s = random_stream(rng, n=2000)
    assert inject_noise(s, fraction=0.0) is s
    noisy = inject_noise(s, fraction=0.15, rng_seed=1)
    assert len(noisy) == 2300
    assert np.all(np.diff(noisy.t) >= 0)
    # originals survive as a subsequence
    key = lambda st_: set(zip(st_.t.tolist(), st_.x.tolist(), st_.y.tolist(), st_.p.tolist()))
    assert key(s) <= key(noisy)
    big = EventStream([], [], [], [], 8, 8, 0.1, 1.0)
    assert len(inject_noise(big, rate=1.1e5, rng_seed=2)) == 110000
    with pytest.raises(DomainError):
        inject_noise(s, rate=1.0, fraction=0.1)


def test_noise_million_events():
    rng = np.random.default_rng(9)
    n = 10**6
    s = EventStream(np.sort(rng.uniform(0, 1, n)), rng.integers(0, 64, n), rng.integers(0, 64, n),
                    np.ones(n), 64, 64, 0.1, 1.0, validate=False)
    assert len(inject_noise(s, fraction=0.15, rng_seed=0)) == 1_150_000


def test_evt_round_trip(tmp_path, rng):
    for k in range(5):
        s = random_stream(rng, n=int(rng.integers(0, 400)), w=int(rng.integers(1, 300)),
                          h=int(rng.integers(1, 300)), threshold=float(np.float32(rng.uniform(0.01, 1))))
        write_evt(tmp_path / f"{k}.evt", s)
        back = read_evt(tmp_path / f"{k}.evt")
        assert back.equals(s)
        assert (tmp_path / f"{k}.evt").stat().st_size == 16 + 13 * len(s)


def test_evt_rejects_corruption(tmp_path, rng):
    s = random_stream(rng, n=10)
    write_evt(tmp_path / "a.evt", s)
    raw = (tmp_path / "a.evt").read_bytes()
    (tmp_path / "b.evt").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "c.evt").write_bytes(raw[:-3])
    for name in ("b.evt", "c.evt"):
        with pytest.raises(DomainError):
            read_evt(tmp_path / name)


def test_csv_round_trip(tmp_path, rng):
    s = random_stream(rng, n=100)
    write_csv(tmp_path / "e.csv", s)
    back = read_csv(tmp_path / "e.csv", s.width, s.height, s.threshold, s.duration)
    assert back.equals(s)

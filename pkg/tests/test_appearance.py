import itertools
import logging
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamloc.appearance import AppearanceModel, FrameSample, fit, foreground_score, update
from streamloc.superpixels import Superpixel


def _sample(color, flow=None, fg=None):
    color = np.asarray(color, float)
    n = len(color)
    flow = np.zeros((n, 2)) if flow is None else np.asarray(flow, float)
    fg = np.zeros(n, bool) if fg is None else np.asarray(fg, bool)
    return FrameSample(color, flow, fg)


def _blobs(rng, n_per=20, d=6, centers=((0.0,) * 6, (5.0,) * 6), fg_first=True):
    pts, fg = [], []
    for k, c in enumerate(centers):
        pts.append(np.asarray(c) + 0.05 * rng.normal(size=(n_per, d)))
        fg.append(np.full(n_per, (k == 0) == fg_first))
    return _sample(np.vstack(pts), rng.normal(size=(len(centers) * n_per, 2)), np.concatenate(fg))


def _model(center, radius, flow_mean, flow_var, zeta):
    return AppearanceModel(np.atleast_2d(center).astype(float), np.atleast_1d(radius).astype(float),
                           np.atleast_2d(flow_mean).astype(float), np.atleast_1d(flow_var).astype(float),
                           np.atleast_1d(zeta).astype(float))


def test_zeta_three_fg_one_bg():
    m = fit(_sample(np.eye(4), fg=[1, 1, 1, 0]), K=1)
    assert m.zeta[0] == pytest.approx(2.0)


def test_zeta_four_fg_no_bg():
    m = fit(_sample(np.eye(4), fg=[1, 1, 1, 1]), K=1)
    assert m.zeta[0] == pytest.approx(5.0)


def _exhaustive_two_means(x):
    n = len(x)
    best, best_c = np.inf, None
    for bits in itertools.product((0, 1), repeat=n - 1):
        lab = np.r_[0, bits]
        if lab.all() or not lab.any():
            continue
        cs = [x[lab == j].mean(0) for j in (0, 1)]
        sse = sum(((x[lab == j] - cs[j]) ** 2).sum() for j in (0, 1))
        if sse < best:
            best, best_c = sse, cs
    return np.array(best_c)


def test_two_blobs_centres_match_exhaustive_two_means(rng):
    x = np.vstack([rng.normal(0, 0.1, size=(6, 3)), rng.normal(3, 0.1, size=(5, 3))])
    m = fit(_sample(x), K=2)
    ref = _exhaustive_two_means(x)
    got = m.centers[np.argsort(m.centers[:, 0])]
    ref = ref[np.argsort(ref[:, 0])]
    assert np.allclose(got, ref, atol=1e-9)


def test_score_at_centre_is_two():
    m = _model([0.2, 0.8], 0.3, [1.0, -1.0], 0.5, 1.0)
    assert m.scores(np.array([[0.2, 0.8]]), np.array([[1.0, -1.0]]))[0] == pytest.approx(2.0)


def test_score_at_unit_distances():
    m = _model([0.0, 0.0], 0.3, [0.0, 0.0], 0.5, 1.0)
    s = m.scores(np.array([[0.3, 0.0]]), np.array([[0.0, 0.5]]))[0]
    assert s == pytest.approx(2 * math.exp(-1), abs=1e-12)
    assert s == pytest.approx(0.7358, abs=1e-4)


def _score_oracle(model, c, f):
    best = min(range(model.K), key=lambda k: sum((c[i] - model.centers[k][i]) ** 2 for i in range(len(c))))
    dc = math.sqrt(sum((c[i] - model.centers[best][i]) ** 2 for i in range(len(c))))
    df = math.hypot(f[0] - model.flow_means[best][0], f[1] - model.flow_means[best][1])
    return math.exp(-dc / model.radii[best]) * model.zeta[best] + math.exp(-df / model.flow_vars[best])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_score_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    K, d = int(rng.integers(1, 6)), int(rng.integers(2, 8))
    m = _model(rng.uniform(size=(K, d)), rng.uniform(0.05, 2, K), rng.normal(size=(K, 2)),
               rng.uniform(0.25, 3, K), rng.uniform(0.1, 5, K))
    c, f = rng.uniform(size=d), rng.normal(size=2)
    sp = Superpixel(0, 0, (0, 0), np.array([0]), c, np.zeros(8), 0.0, tuple(f), {})
    ref = _score_oracle(m, c, f)
    assert foreground_score(m, sp) == pytest.approx(ref, rel=1e-12)
    assert 0 < ref <= m.zeta[m.assign(c)[0]] + 1


@settings(max_examples=50, deadline=None)
@given(r1=st.floats(0, 1), r2=st.floats(0, 1), seed=st.integers(0, 1000))
def test_score_decreases_with_colour_distance(r1, r2, seed):
    rng = np.random.default_rng(seed)
    m = _model([[0.0, 0.0], [10.0, 10.0]], [0.4, 0.4], [[0, 0], [0, 0]], [1.0, 1.0], [2.0, 2.0])
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)
    f = np.zeros((1, 2))
    s1 = m.scores(r1 * direction[None], f)[0]
    s2 = m.scores(r2 * direction[None], f)[0]
    if r2 - r1 > 1e-9:
        assert s1 > s2
    elif r1 - r2 > 1e-9:
        assert s1 < s2


def test_fewer_points_than_k_reduces_k(caplog):
    with caplog.at_level(logging.WARNING):
        m = fit(_sample(np.eye(3)), K=20)
    assert m.K == 3
    assert "reducing K" in caplog.text


def test_floors_respected():
    m = fit(_sample(np.ones((4, 3)), np.zeros((4, 2))), K=1, rho_floor=0.25)
    assert m.radii[0] >= 1e-6 and m.flow_vars[0] == 0.25
    assert np.all(m.zeta > 0)


def test_default_k_is_twenty(rng):
    assert fit(_sample(rng.uniform(size=(60, 4)))).K == 20


def test_window_of_one_depends_on_newest_only(rng):
    new = _blobs(rng)
    q = rng.normal(2.5, 2, size=(10, 6)), rng.normal(size=(10, 2))
    a = update(fit(_blobs(rng, centers=((1.0,) * 6, (-4.0,) * 6)), K=2, delta=1), new, K=2)
    b = update(fit(_blobs(rng, centers=((9.0,) * 6, (2.0,) * 6)), K=2, delta=1), new, K=2)
    assert np.allclose(a.scores(*q), b.scores(*q), atol=1e-12)
    assert len(a.window) == 1


def test_identical_frames_are_a_fixed_point(rng):
    frame = _blobs(rng)
    m = fit(frame, K=2, delta=3)
    for _ in range(3):
        prev = m.centers.copy()
        m = update(m, frame)
        assert np.allclose(m.centers, prev, atol=1e-9)


def _stats(m):
    order = np.lexsort(m.centers.T[::-1])
    return [m.centers[order], m.radii[order], m.flow_means[order], m.flow_vars[order], m.zeta[order]]


def test_window_refit_equals_fresh_fit(rng):
    frames = [_blobs(rng) for _ in range(4)]
    m = fit(frames[0], K=2, delta=3)
    for f in frames[1:]:
        m = update(m, f)
    fresh = fit(FrameSample(np.vstack([f.color for f in frames[1:]]), np.vstack([f.flow for f in frames[1:]]),
                            np.concatenate([f.is_fg for f in frames[1:]])), K=2, delta=3)
    for x, y in zip(_stats(m), _stats(fresh)):
        assert np.allclose(x, y, atol=1e-9)


def test_evicted_frames_have_no_influence(rng):
    keep = [_blobs(rng) for _ in range(3)]
    q = rng.normal(2.5, 2, size=(10, 6)), rng.normal(size=(10, 2))
    out = []
    for old_centre in (0.5, -2.0):
        old = _blobs(rng, centers=((old_centre,) * 6, (6.0,) * 6), fg_first=False)
        m = fit(old, K=2, delta=3)
        for f in keep:
            m = update(m, f)
        assert len(m.window) == 3
        out.append(m.scores(*q))
    assert np.allclose(out[0], out[1], atol=1e-12)


def test_window_never_exceeds_delta(rng):
    m = fit(_blobs(rng), K=2, delta=2)
    for _ in range(5):
        m = update(m, _blobs(rng))
        assert len(m.window) <= 2


def test_dump_is_plain_data(rng):
    d = fit(_blobs(rng), K=2).dump()
    assert d["K"] == 2 and len(d["zeta"]) == 2 and d["window_frames"] == 1

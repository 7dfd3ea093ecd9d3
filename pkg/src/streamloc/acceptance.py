"""Property and oracle checks of the whole system, one function per criterion.

Each check builds its own inputs from a seed, runs the implementation and
an independent route to the same quantity, and returns a ``Criterion``
with the measured values.  ``run_all`` is shared by the test suite and the
``demo-accept`` command.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
from cvxopt import matrix, solvers
from scipy.stats import spearmanr
from sklearn.metrics import auc as sk_auc

from .config import PipelineConfig
from .crf import SPATIAL, TEMPORAL, CrfGraph, energy, infer_labels
from .evaluation import (OBSERVATION_POINTS, Detection, accuracy_vs_observation, auc, evaluate,
                         full_video_accuracy, precision_recall, roc_at_overlap, tube_iou)
from .media import GroundTruth, Track, TrackRecord
from .pipeline import run_online, run_train
from .pose import Pose, exhaustive_refine, refine_poses, window_objective
from .predictor import NEG, augment, dp_confidence, label_set, loss_delta, psi, train_ssvm
from .synthetic import AccumulatingStreams, SceneSpec, synthesize_scene, true_joints


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    detail: str
    values: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number}. {self.name}: {self.detail} ({self.seconds:.1f} s)"


# -- 1. CRF exactness -----------------------------------------------------------

def random_crf(rng, n_max: int = 15) -> CrfGraph:
    """Random window graph: 1-3 frames, spatial edges inside a frame and
    temporal edges between consecutive frames, nonnegative weights."""
    n_frames = int(rng.integers(1, 4))
    sizes = rng.multinomial(int(rng.integers(n_frames, n_max + 1)) - n_frames, np.ones(n_frames) / n_frames) + 1
    node_frame = np.repeat(np.arange(n_frames), sizes)
    node_sp = np.concatenate([np.arange(s) for s in sizes])
    offs = np.r_[0, np.cumsum(sizes)]
    edges, kinds = [], []
    for k in range(n_frames):
        ids = range(offs[k], offs[k + 1])
        for a, b in itertools.combinations(ids, 2):
            if rng.random() < 0.4:
                edges.append((a, b))
                kinds.append(SPATIAL)
        if k + 1 < n_frames:
            for a in ids:
                for b in range(offs[k + 1], offs[k + 2]):
                    if rng.random() < 0.3:
                        edges.append((a, b))
                        kinds.append(TEMPORAL)
    unary = rng.uniform(0, 3, size=(len(node_frame), 2))
    weights = rng.uniform(0, 2, size=len(edges))
    return CrfGraph(unary, np.array(edges, dtype=np.int64).reshape(-1, 2), weights,
                    np.array(kinds, dtype=np.int64), node_frame, node_sp)


def brute_force_min_energy(g: CrfGraph) -> float:
    """Minimum energy over all 2^n labellings, evaluated in one batch."""
    n = g.n
    L = ((np.arange(2 ** n)[:, None] >> np.arange(n)[None]) & 1).astype(np.int64)
    e = g.unary[np.arange(n)[None], L].sum(axis=1)
    if len(g.edges):
        dis = L[:, g.edges[:, 0]] != L[:, g.edges[:, 1]]
        e = e + (dis * g.weights[None]).sum(axis=1)
    return float(e.min())


def criterion_crf(seed: int = 0, n_graphs: int = 200) -> Criterion:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst, mismatches = 0.0, 0
    for _ in range(n_graphs):
        g = random_crf(rng)
        e_cut = energy(g, infer_labels(g))
        e_all = brute_force_min_energy(g)
        worst = max(worst, abs(e_cut - e_all))
        mismatches += e_cut != e_all
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 10.0
    return Criterion(1, "CRF exactness", ok,
                     f"{mismatches}/{n_graphs} graphs differ from enumeration (max |dE| {worst:.3g}), "
                     f"{dt:.2f} s total (limit 10 s)", {"mismatches": mismatches, "seconds": dt})


# -- 2. DP recursion --------------------------------------------------------------

def brute_force_dp(S) -> np.ndarray:
    """Best product of scores over monotone alignments that start in segment
    1 and advance by at most one segment per interval, after each prefix."""
    S = np.asarray(S, float)
    T, M = S.shape
    out = []
    for t in range(1, T + 1):
        best = 0.0
        for steps in itertools.product((0, 1), repeat=t - 1):
            z = np.cumsum((0,) + steps)  # 0-based segment index per interval
            if z[-1] >= M:
                continue
            best = max(best, float(np.prod(S[np.arange(t), z])))
        out.append(best)
    return np.array(out)


def criterion_dp(seed: int = 0, n_cases: int = 100) -> Criterion:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        S = rng.uniform(0, 1, size=(int(rng.integers(1, 7)), int(rng.integers(1, 5))))
        worst = max(worst, float(np.abs(dp_confidence(S) - brute_force_dp(S)).max()))
    return Criterion(2, "DP recursion correctness", worst <= 1e-12,
                     f"max deviation from alignment enumeration {worst:.3g} over {n_cases} cases (limit 1e-12)",
                     {"max_error": worst})


# -- 3. S-SVM cutting plane ------------------------------------------------------------

def full_constraint_qp(X, Y, M, C, eps, variant="sign"):
    """Primal QP over (w, xi) with every margin constraint listed up front."""
    Xa = augment(X)
    n, d = Xa.shape
    G, h = [], []
    for i, (x, yi) in enumerate(zip(Xa, Y)):
        for y in label_set(M):
            if y == yi:
                continue
            row = np.zeros(d + n)
            row[:d] = -(psi(x, yi, M, variant) - psi(x, y, M, variant))
            row[d + i] = -1.0
            G.append(row)
            h.append(-loss_delta(yi, y, M, eps))
    for i in range(n):
        row = np.zeros(d + n)
        row[d + i] = -1.0
        G.append(row)
        h.append(0.0)
    P = np.zeros((d + n, d + n))
    P[:d, :d] = np.eye(d)
    P[d:, d:] = 1e-12 * np.eye(n)
    q = np.r_[np.zeros(d), np.full(n, float(C))]
    opts = solvers.options.copy()
    solvers.options.update({"show_progress": False, "abstol": 1e-12, "reltol": 1e-12, "feastol": 1e-12})
    try:
        sol = solvers.qp(matrix(P), matrix(q), matrix(np.array(G)), matrix(np.array(h)))
    finally:
        solvers.options.clear()
        solvers.options.update(opts)
    z = np.array(sol["x"]).ravel()
    w, xi = z[:d], np.maximum(z[d:], 0.0)
    return 0.5 * float(w @ w) + C * float(xi.sum()), w


def random_ssvm_instance(rng):
    n = int(rng.integers(2, 7))
    M = int(rng.integers(1, 4))
    d = int(rng.integers(2, 5))
    X = rng.normal(size=(n, d))
    Y = [int(rng.integers(1, M + 1)) for _ in range(n)]
    Y[0] = NEG
    Y[1] = int(rng.integers(1, M + 1))
    for i in range(2, n):
        if rng.random() < 0.3:
            Y[i] = NEG
    return X, Y, M


def criterion_ssvm(seed: int = 0, n_cases: int = 50) -> Criterion:
    """Objective gap to the full QP, plus the round-by-round bounds: the
    restricted optimum (lower bound) can only grow as constraints are
    added, and the objective of the returned iterate (best upper bound) can
    only fall."""
    rng = np.random.default_rng(seed)
    worst_gap, bad_best, bad_lower = 0.0, 0, 0
    for _ in range(n_cases):
        X, Y, M = random_ssvm_instance(rng)
        C, eps = float(rng.choice([0.1, 1.0, 10.0])), 0.5
        res = train_ssvm(X, Y, M, C, eps, tol=1e-8, max_rounds=200)
        ref, _ = full_constraint_qp(X, Y, M, C, eps)
        worst_gap = max(worst_gap, abs(res.objective - ref))
        b = np.array(res.best_upper)
        lo = np.array(res.lower_bounds)
        bad_best += bool(np.any(np.diff(b) > 1e-12))
        bad_lower += bool(np.any(np.diff(lo) < -1e-7))
    ok = worst_gap <= 1e-4 and bad_best == 0
    return Criterion(3, "S-SVM cutting plane", ok,
                     f"max |objective - full QP| {worst_gap:.2e} (limit 1e-4); tracked objective rose in "
                     f"{bad_best}/{n_cases} runs; restricted optimum fell in {bad_lower}/{n_cases} runs",
                     {"max_gap": worst_gap, "best_upper_violations": bad_best, "lower_violations": bad_lower})


# -- 4. Monotone confidence ---------------------------------------------------------

def criterion_monotone(seed: int = 0, n_streams: int = 20, M: int = 5) -> Criterion:
    gen = AccumulatingStreams(seed=seed)
    X, Y = gen.training_set(30, M)
    res = train_ssvm(X, Y, M, C=1.0, eps=0.5)
    fr, streams = gen.test_streams(n_streams, steps=10)
    scores = np.array([[float(res.w @ augment(x)[0]) for x in s] for s in streams])
    mean = scores.mean(axis=0)
    rho = float(spearmanr(fr, mean).statistic)
    return Criterion(4, "Monotone confidence", rho > 0.9,
                     f"Spearman(mean <w,x(t)>, t) = {rho:.4f} over {n_streams} streams (needs > 0.9)",
                     {"spearman": rho, "mean_scores": mean.tolist()})


# -- 5. Pose refinement -----------------------------------------------------------------

def _joint_error(p, gt_joints) -> float:
    return float(np.linalg.norm(p.joints - gt_joints, axis=1).mean())


def random_pose_instance(rng, n_frames, n_cands, J=4):
    out = []
    for t in range(1, n_frames + 1):
        out.append([Pose(rng.uniform(0, 50, size=(J, 2)), rng.random(J) < 0.2, float(rng.normal()), t)
                    for _ in range(n_cands)])
    for c in out:  # keep at least one joint visible
        for p in c:
            if p.occluded.all():
                p.occluded[0] = False
    return out


def criterion_pose(seed: int = 0, n_scenes: int = 10, delta: int = 5, Q: int = 3) -> Criterion:
    raw_err, ref_err = [], []
    for s in range(n_scenes):
        seq = synthesize_scene(SceneSpec(pose_noise=4.0, distractors=2), seed=seed + s)
        n = len(seq.stream)
        for end in range(delta + 1, n + 1, delta + 1):
            frames = list(range(end - delta, end + 1))
            cands = [seq.poses.candidates(t) for t in frames]
            r = refine_poses(cands, frames, Q=Q)
            for k, t in enumerate(frames):
                gt = true_joints(seq.groundtruth.box(t))
                raw_err.append(_joint_error(min(cands[k], key=lambda p: p.raw_cost), gt))
                ref_err.append(_joint_error(r.poses[k], gt))
    raw, ref = float(np.mean(raw_err)), float(np.mean(ref_err))
    gain = 1.0 - ref / raw
    rng = np.random.default_rng(seed)
    mism = 0
    n_small = 100
    for _ in range(n_small):
        nf, nc = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        cands = random_pose_instance(rng, nf, nc)
        frames = list(range(1, nf + 1))
        r = refine_poses(cands, frames, Q=3)
        best, _ = exhaustive_refine(cands, frames)
        mism += abs(window_objective(cands, frames, r.selection) - best) > 1e-12
    ok = gain >= 0.2 and mism == 0
    return Criterion(5, "Pose refinement", ok,
                     f"mean joint error {raw:.2f} px raw -> {ref:.2f} px refined ({100 * gain:.1f}% lower, "
                     f"needs >= 20%); greedy != exhaustive on {mism}/{n_small} small instances",
                     {"raw_error": raw, "refined_error": ref, "reduction": gain, "greedy_mismatches": mism})


# -- 6. End-to-end localization ---------------------------------------------------------

def scene_batch(n: int, base_seed: int, pose_noise: float = 2.0, prefix: str = "scene"):
    classes = ("rightward", "leftward")
    return [synthesize_scene(SceneSpec.for_class(classes[i % 2], pose_noise=pose_noise,
                                                 video_id=f"{prefix}{i:03d}"), seed=base_seed + i)
            for i in range(n)]


def track_of(seq, records, classes) -> Track:
    return Track({"classes": list(classes), "video_id": seq.stream.id}, list(records))


def criterion_end_to_end(seed: int = 100, n_scenes: int = 10, n_train: int = 6) -> Criterion:
    t0 = time.perf_counter()
    config = PipelineConfig()
    train = scene_batch(n_train, 10 * seed + 7, prefix="train")
    bank = run_train(train, None, config)
    test = scene_batch(n_scenes, seed, prefix="test")
    tracks, gts = {}, {}
    for seq in test:
        recs = run_online(seq, config, bank)
        tracks[seq.stream.id] = track_of(seq, recs, bank.classes)
        gts[seq.stream.id] = seq.groundtruth
    summary = evaluate(tracks, gts, theta=0.2)
    dt = time.perf_counter() - t0
    ious = np.array(list(summary["tube_iou"].values()))
    ok = bool(np.all(ious >= 0.5)) and summary["auc"] >= 0.9 and dt < 300.0
    return Criterion(6, "End-to-end synthetic localization", ok,
                     f"tube IoU min {ious.min():.3f} / mean {ious.mean():.3f} (each needs >= 0.5), "
                     f"ROC@0.2 AUC {summary['auc']:.3f} (needs >= 0.9), batch incl. training {dt:.0f} s (limit 300 s)",
                     {"tube_iou": summary["tube_iou"], "auc": summary["auc"], "seconds": dt})


# -- 7. Metric oracles ------------------------------------------------------------------

def raster(box, shape=(64, 64)) -> np.ndarray:
    m = np.zeros(shape, bool)
    if box is not None:
        x, y, w, h = (int(v) for v in box)
        m[y:y + h, x:x + w] = True
    return m


def pixel_tube_iou(det: dict, gt: dict) -> float:
    frames = set(t for t, b in det.items() if b is not None) | set(gt)
    vals = []
    for t in frames:
        a, b = raster(det.get(t)), raster(gt.get(t))
        u = (a | b).sum()
        vals.append((a & b).sum() / u if u else 0.0)
    return float(np.mean(vals)) if vals else 0.0


def _random_box(rng):
    x, y = rng.integers(0, 40, size=2)
    w, h = rng.integers(4, 24, size=2)
    return (float(x), float(y), float(w), float(h))


def random_metric_case(rng):
    """Ground-truth tubes over a few videos and detections that jitter,
    mislabel or miss them; confidences drawn from a small set so ties
    occur."""
    gts, dets = [], []
    classes = ("a", "b")
    for v in range(int(rng.integers(1, 5))):
        vid = f"v{v}"
        for _ in range(int(rng.integers(1, 3))):
            t0 = int(rng.integers(1, 4))
            t1 = t0 + int(rng.integers(1, 6))
            gb = {t: _random_box(rng) for t in range(t0, t1 + 1)}
            gts.append(GroundTruth(vid, str(rng.choice(classes)), t0, t1, {t: [b] for t, b in gb.items()}))
            for _ in range(int(rng.integers(0, 3))):
                boxes = {}
                for t in range(t0 + int(rng.integers(-1, 2)), t1 + int(rng.integers(-1, 2)) + 1):
                    if t in gb and rng.random() < 0.8:
                        x, y, w, h = gb[t]
                        dx, dy = rng.integers(-3, 4, size=2)
                        boxes[t] = (max(0.0, x + dx), max(0.0, y + dy), w, h)
                    else:
                        boxes[t] = _random_box(rng)
                label = gts[-1].class_label if rng.random() < 0.8 else str(rng.choice(classes))
                dets.append(Detection(vid, boxes, label, float(rng.integers(0, 6)) / 5))
        for _ in range(int(rng.integers(0, 2))):
            dets.append(Detection(vid, {1: _random_box(rng)}, str(rng.choice(classes)), float(rng.integers(0, 6)) / 5))
    return dets, gts


def oracle_match(dets, gts, theta):
    """Per-detection TP flag from the ranked greedy assignment, with the
    overlap matrix computed on pixel rasters."""
    iou = np.array([[pixel_tube_iou(d.boxes, {t: b[0] for t, b in g.boxes.items()})
                     if d.video_id == g.video_id and d.label == g.class_label else -1.0
                     for g in gts] for d in dets]) if dets and gts else np.zeros((len(dets), len(gts)))
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    free = set(range(len(gts)))
    tp = {}
    for i in order:
        cand = [j for j in free if iou[i, j] >= theta]
        if cand:
            j = max(cand, key=lambda j: (iou[i, j], -j))
            free.discard(j)
        tp[i] = bool(cand)
    return order, tp


def oracle_roc(dets, gts, theta):
    order, tp = oracle_match(dets, gts, theta)
    conf = np.array([dets[i].confidence for i in order])
    flags = np.array([tp[i] for i in order], bool)
    n_neg = int((~flags).sum())
    pts = [(0.0, 0.0)]
    for thr in sorted(set(conf.tolist()), reverse=True):
        sel = conf >= thr
        TP, FP = int((sel & flags).sum()), int((sel & ~flags).sum())
        pts.append((FP / n_neg if n_neg else 0.0, TP / len(gts) if gts else 0.0))
    if pts[-1][0] < 1.0:
        pts.append((1.0, pts[-1][1]))
    return np.array(pts)


def oracle_ap(dets, gts, theta):
    order, tp = oracle_match(dets, gts, theta)
    flags = [tp[i] for i in order]
    if not gts or not any(flags):
        return 0.0
    prec, rec = [], []
    for k in range(1, len(flags) + 1):
        hits = sum(flags[:k])
        prec.append(hits / k)
        rec.append(hits / len(gts))
    interp = [max(prec[k:]) for k in range(len(prec))]
    first = flags.index(True)
    xs = [0.0] + [rec[k] for k in range(len(flags)) if flags[k]]
    ys = [interp[first]] + [interp[k] for k in range(len(flags)) if flags[k]]
    return float(sk_auc(xs, ys))


def criterion_metrics(seed: int = 0, n_cases: int = 100) -> Criterion:
    rng = np.random.default_rng(seed)
    worst = {"tube_iou": 0.0, "roc": 0.0, "auc": 0.0, "ap": 0.0}
    for _ in range(n_cases):
        dets, gts = random_metric_case(rng)
        for d in dets:
            for g in gts:
                gb = {t: b[0] for t, b in g.boxes.items()}
                worst["tube_iou"] = max(worst["tube_iou"], abs(tube_iou(d.boxes, g) - pixel_tube_iou(d.boxes, gb)))
        theta = float(rng.choice([0.1, 0.2, 0.5]))
        roc = roc_at_overlap(dets, gts, theta)
        ref = oracle_roc(dets, gts, theta)
        if roc.points.shape != ref.shape:
            worst["roc"] = np.inf
        else:
            worst["roc"] = max(worst["roc"], float(np.abs(roc.points - ref).max()))
        worst["auc"] = max(worst["auc"], abs(auc(roc) - float(sk_auc(ref[:, 0], ref[:, 1]))))
        _, ap = precision_recall(dets, gts, theta)
        worst["ap"] = max(worst["ap"], abs(ap - oracle_ap(dets, gts, theta)))
    ok = all(v <= 1e-9 for v in worst.values())
    return Criterion(7, "Metric oracles", ok,
                     ", ".join(f"{k} {v:.2g}" for k, v in worst.items()) + f" max deviation over {n_cases} cases (limit 1e-9)",
                     worst)


# -- 8. Determinism and causality ------------------------------------------------------

def _same(a: list, b: list) -> bool:
    return [r.to_json() for r in a] == [r.to_json() for r in b]


def criterion_determinism(seed: int = 7, frames: int = 14, cuts=(3, 7, 11)) -> Criterion:
    seq = synthesize_scene(SceneSpec(frames=frames, video_id="det"), seed=seed)
    config = PipelineConfig(seed=seed)
    a = run_online(seq, config)
    b = run_online(synthesize_scene(SceneSpec(frames=frames, video_id="det"), seed=seed), config)
    same = _same(a, b)
    bad = [t for t in cuts if not _same(run_online(seq.truncated(t), config), a[:t])]
    ok = same and not bad
    return Criterion(8, "Determinism and causality", ok,
                     f"repeat run identical: {same}; truncated runs differing from the full prefix at t in {bad or 'none'}",
                     {"identical": same, "causality_failures": bad})


# -- 9. Observation protocol ---------------------------------------------------------------

def criterion_observation(seed: int = 0, n_videos: int = 30) -> Criterion:
    rng = np.random.default_rng(seed)
    classes = ["a", "b", "c"]
    tracks, gts = {}, {}
    for v in range(n_videos):
        vid = f"v{v}"
        t0 = int(rng.integers(1, 10))
        t1 = t0 + int(rng.integers(0, 30))
        gts[vid] = GroundTruth(vid, str(rng.choice(classes)), t0, t1, {t: [(0, 0, 4, 4)] for t in range(t0, t1 + 1)})
        recs = []
        for t in range(1, t1 + 5):
            flags = ["confidence_pending"] if t < int(rng.integers(1, 8)) else []
            recs.append(TrackRecord(t, (0, 0, 4, 4), [], rng.normal(size=3).tolist(), flags))
        tracks[vid] = Track({"classes": classes, "video_id": vid}, recs)
    curve = accuracy_vs_observation(tracks, gts)
    full = full_video_accuracy(tracks, gts)
    at1 = float(curve.points[-1, 1])
    points_ok = np.array_equal(curve.points[:, 0], np.array(OBSERVATION_POINTS))
    expected = np.round(np.arange(11) / 10, 10)
    ok = at1 == full and points_ok and np.array_equal(np.array(OBSERVATION_POINTS), expected)
    return Criterion(9, "Observation-percentage protocol", ok,
                     f"accuracy at f=1 {at1:.6f} vs full-video {full:.6f}; sample points "
                     f"{'0, 0.1, ..., 1' if points_ok else curve.points[:, 0].tolist()}",
                     {"at_1": at1, "full": full})


CRITERIA = {
    1: criterion_crf, 2: criterion_dp, 3: criterion_ssvm, 4: criterion_monotone, 5: criterion_pose,
    6: criterion_end_to_end, 7: criterion_metrics, 8: criterion_determinism, 9: criterion_observation,
}


def run_criterion(number: int) -> Criterion:
    t0 = time.perf_counter()
    res = CRITERIA[number]()
    res.seconds = time.perf_counter() - t0
    return res


def run_all(numbers=None, echo=None) -> list:
    out = []
    for k in numbers or sorted(CRITERIA):
        res = run_criterion(k)
        if echo is not None:
            echo(res.line())
        out.append(res)
    return out


def format_table(results) -> str:
    lines = [r.line() for r in results]
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} criteria passed")
    return "\n".join(lines)

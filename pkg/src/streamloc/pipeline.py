"""Per-frame online loop and model training.

Frame t is processed using only frames 1..t, pose hypotheses up to t and
flows 1..t-1 (flow t-1 links frames t-1 and t).  The record for frame t
is written before frame t+1 is read and never revised.
"""
from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import appearance as app
from .config import PipelineConfig
from .crf import (adaptive_center, build_graph, infer_labels, map_update, propagate_box, segment_to_box, soft_box_overlap,
                  unary_costs)
from .geometry import box_iou, centroid_inside
from .media import Sequence, TrackRecord, TrackWriter, load_sequence
from .pose import minmax, refine_poses
from .evaluation import PENDING
from .predictor import (ClassifierBank, OnlinePredictor, build_codebook, l1, superpixel_descriptors,
                        train_dp_svm, train_ssvm, tube_descriptors)
from .superpixels import extract_features, forward_splat, slic_segment

log = logging.getLogger(__name__)

SEGMENT_FLOOR = 0.01  # foreground weight of superpixels outside the segment when scoring boxes


@dataclass
class _Entry:
    t: int
    smap: object
    candidates: list
    flow_out: object = None  # flow t -> t+1, attached once frame t+1 arrives


def frame_features(frame, flow_prev, t, config: PipelineConfig):
    """Superpixels of frame t with features from the flow arriving at t.

    ``flow_prev`` maps frame t-1 to t; it is pushed onto frame t's grid so
    nothing later than t is needed.
    """
    smap = slic_segment(frame, config.target_count, config.compactness, frame_index=t)
    flow = None if flow_prev is None else forward_splat(flow_prev.u, flow_prev.v)
    return extract_features(smap, frame, flow=flow, bins=config.flow_bins)


class OnlineLocalizer:
    """Streaming localizer for a single actor."""

    def __init__(self, config: PipelineConfig, bank: ClassifierBank | None = None, shape=None):
        self.config = config
        self.bank = bank
        self.shape = shape
        self.window = deque(maxlen=config.delta + 1)
        self.model = None
        self.state = None
        self.temporal_cache = {}
        self.omega = (config.omega or (bank.omega if bank else 0)) or 1
        self.predictor = OnlinePredictor(bank, config.mode, config.dp_reset_floor,
                                         config.dp_reset_patience) if bank else None
        self.interval = []  # (descriptors, centroids, box) of frames since the last confidence
        self.confidences = [0.0] * (len(bank.classes) if bank else 0)
        self.ready = False
        self.max_history = 0
        self.timings = []

    @property
    def classes(self):
        return list(self.bank.classes) if self.bank else []

    def _bootstrap(self, smap, candidates):
        fg = np.zeros(smap.n, bool)
        if candidates:
            best = min(candidates, key=lambda p: p.raw_cost)
            fg = centroid_inside(smap.centroids, best.bbox(self.config.pose_margin, smap.shape))
        c = self.config
        sample = app.sample_from_map(smap, fg)
        self.model = app.fit(sample, K=c.K, delta=max(1, c.delta), seed=c.seed, rho_floor=c.rho_floor)

    def _rebootstrap(self, entries, poses):
        """Refit the model from the refined poses of the first full window,
        replacing the single-pose bootstrap."""
        c = self.config
        samples = []
        for e, p in zip(entries, poses):
            box = p.bbox(c.pose_margin, e.smap.shape) if p is not None else None
            samples.append(app.sample_from_map(e.smap, centroid_inside(e.smap.centroids, box)))
        self.model = app.fit(app.concat_samples(samples), K=c.K, delta=max(1, c.delta), seed=c.seed,
                             rho_floor=c.rho_floor)
        self.model.window = deque(samples, maxlen=max(1, c.delta))

    def _fg_probability(self, entries):
        """Per-frame foreground probability of every superpixel: the
        appearance score normalized over the window and squashed as in the
        CRF unary (pose evidence left out, the centre split on the raw-best
        poses).  Bounded, so the appearance smoothness of poses compares
        like with like across frames."""
        c = self.config
        maps = [e.smap for e in entries]
        h = [self.model.scores(m.color_hist, m.mean_flow) for m in maps]
        hb = minmax(np.concatenate(h))
        center = c.unary_center
        if center is None:
            inside = []
            for e in entries:
                best = min(e.candidates, key=lambda p: p.raw_cost) if e.candidates else None
                box = best.bbox(c.pose_margin, e.smap.shape) if best is not None else None
                inside.append(centroid_inside(e.smap.centroids, box))
            center = adaptive_center(hb, np.concatenate(inside))
        _, prob = unary_costs(hb, np.zeros_like(hb), abs(c.alpha_fg), 0.0, c.unary_gain, center)
        return np.split(prob, np.cumsum([len(x) for x in h])[:-1])

    def step(self, t: int, frame, candidates, flow_prev) -> TrackRecord:
        t0 = time.perf_counter()
        try:
            rec = self._step(t, frame, candidates, flow_prev)
        except Exception as exc:  # keep the stream alive
            log.error("frame %d failed: %s", t, exc)
            box = self.state.box if self.state is not None else None
            seg = self.state.segment if self.state is not None else []
            flags = ["frame_error"] + ([] if self.ready or not self.bank else [PENDING])
            rec = TrackRecord(t, box, list(seg), list(self.confidences), flags)
        self.timings.append(time.perf_counter() - t0)
        log.info("frame %d processed in %.3f s", t, self.timings[-1])
        return rec

    def _step(self, t, frame, candidates, flow_prev) -> TrackRecord:
        c = self.config
        flags = []
        seen = [p for p in candidates if p.visible.any()]
        if len(seen) < len(candidates):
            log.info("frame %d: dropped %d pose hypotheses with no visible joint", t, len(candidates) - len(seen))
        candidates = seen
        smap = frame_features(frame, flow_prev, t, c)
        if self.model is None:
            self._bootstrap(smap, candidates)
        if self.window:
            self.window[-1].flow_out = flow_prev
        self.window.append(_Entry(t, smap, list(candidates)))
        self.max_history = max(self.max_history, len(self.window))
        live = {e.t for e in self.window}
        self.temporal_cache = {k: v for k, v in self.temporal_cache.items() if k[0] in live and k[1] in live}

        entries = list(self.window)
        maps = [e.smap for e in entries]
        poses, h_pose = [None] * len(entries), [0.0] * len(entries)
        if any(e.candidates for e in entries):
            ref = refine_poses([e.candidates for e in entries], [e.t for e in entries], c.Q,
                               maps, self._fg_probability(entries), c.spline_lambda)
            poses, h_pose = ref.poses, ref.h_pose
            if t == c.delta + 1:
                self._rebootstrap(entries, poses)
        else:
            flags.append("no_pose")
        graph = build_graph(maps, [e.flow_out for e in entries[:-1]], self.model, poses, h_pose,
                            c.beta, c.alpha_fg, c.alpha_pose, c.unary_gain, c.unary_center,
                            c.temporal_overlap, c.pose_margin, self.temporal_cache)
        labels = infer_labels(graph)
        fg_now = labels[graph.frame_nodes(len(entries) - 1)].astype(bool)
        crf_box, segment = segment_to_box(fg_now, smap)
        if crf_box is None:
            flags.append("empty_segment")
        elif crf_box[2] * crf_box[3] > c.max_segment_fraction * smap.shape[0] * smap.shape[1]:
            log.info("frame %d: segment box covers most of the frame, ignored", t)
            flags.append("degenerate_segment")
            crf_box, segment = None, []

        pose_now = poses[-1]
        pose_box = pose_now.bbox(c.pose_margin, smap.shape) if pose_now is not None else None
        cands = []
        if crf_box is not None:
            cands.append(crf_box)
        if pose_box is not None:
            cands.append(pose_box)
        if self.state is not None and self.state.box is not None:
            prev = self.state.box
            cands.append(propagate_box(prev, forward_splat(flow_prev.u, flow_prev.v), smap.shape)
                         if flow_prev is not None else prev)
        if not cands:
            raise RuntimeError("no localization candidate")
        seg_prob = np.where(np.isin(np.arange(smap.n), segment), 1.0 - SEGMENT_FLOOR, SEGMENT_FLOOR)
        p_s = [soft_box_overlap(b, smap, seg_prob) for b in cands]
        if pose_box is not None:
            p_p = [float(np.exp(-(h_pose[-1] + 1.0 - box_iou(b, pose_box)))) for b in cands]
        else:
            p_p = [1.0] * len(cands)
        cov = tuple(s * s for s in c.transition_sigma)
        # while the first window fills the previous boxes are provisional
        self.state = map_update(self.state, cands, p_s, p_p, t, c.delta, cov, segment, flags,
                                use_prior=t > c.delta + 1)
        box = self.state.box

        # without a usable segment the labels would come from the box alone;
        # the model is kept as is rather than taught a possibly wrong region
        if segment:
            fg = centroid_inside(smap.centroids, box) & np.isin(np.arange(smap.n), segment)
            if fg.any():
                self.model = app.update(self.model, app.sample_from_map(smap, fg))

        if self.bank is not None:
            self.interval.append((superpixel_descriptors(smap), smap.centroids, box))
            if t % self.omega == 0:
                desc = tube_descriptors([(d, ctr) for d, ctr, _ in self.interval],
                                        [b for _, _, b in self.interval])
                counts = self.bank.codebook.histogram(desc) if len(desc) else np.zeros(self.bank.codebook.V)
                if counts.sum() == 0:
                    flags.append("empty_interval")
                self.confidences = self.predictor.push(counts)
                self.ready = True
                self.interval = []
            if not self.ready:
                flags.append(PENDING)
        self.state.flags = list(flags)
        return TrackRecord(t, box, [int(s) for s in segment], list(self.confidences), list(flags))


def iterate_online(seq: Sequence, config: PipelineConfig, bank: ClassifierBank | None = None):
    """Yield one record per frame, strictly in order."""
    loc = OnlineLocalizer(config, bank, seq.stream.shape)
    for t in range(1, len(seq.stream) + 1):
        yield loc.step(t, seq.stream.frame(t), seq.poses.candidates(t), seq.flow(t - 1))


def run_online(data, config: PipelineConfig, bank: ClassifierBank | None = None, out=None,
               max_frames: int | None = None) -> list:
    """Localize a sequence (directory, manifest or ``Sequence``).

    With ``out`` set, records are appended to the track file as they are
    produced, so an interrupted run leaves a valid prefix.
    """
    seq = data if isinstance(data, Sequence) else load_sequence(data, max_frames)
    classes = list(bank.classes) if bank else []
    header = {"config": config.to_dict(), "version": __version__,
              "omega": (config.omega or (bank.omega if bank else 0)) or 1}
    records = []
    writer = TrackWriter(out, classes, seq.stream.id, header) if out is not None else None
    try:
        for rec in iterate_online(seq, config, bank):
            if max_frames is not None and rec.frame > max_frames:
                break
            if writer is not None:
                writer.write(rec)
            records.append(rec)
    finally:
        if writer is not None:
            writer.close()
    return records


# -- training -----------------------------------------------------------------

def interval_bounds(n: int, M: int) -> list:
    """End frame (1-based, inclusive) of each of M near-equal intervals."""
    return [int(round(n * m / M)) for m in range(1, M + 1)]


def sequence_descriptors(seq: Sequence, config: PipelineConfig):
    """Per frame (descriptors, centroids) with the same causal features as
    the online loop."""
    out = []
    for t in range(1, len(seq.stream) + 1):
        smap = frame_features(seq.stream.frame(t), seq.flow(t - 1), t, config)
        out.append((superpixel_descriptors(smap), smap.centroids))
    return out


@dataclass
class TrainingVideo:
    video_id: str
    label: str
    frames: list  # (descriptors, centroids) per frame
    boxes: list  # ground-truth box per frame (None where absent)


def prepare_training(seqs, labels: dict | None, config: PipelineConfig) -> list:
    vids = []
    for seq in seqs:
        gt = seq.groundtruth
        if gt is None:
            raise ValueError(f"{seq.stream.id}: training needs ground-truth boxes")
        label = (labels or {}).get(seq.stream.id, gt.class_label)
        lo, hi = max(1, gt.t_start), min(len(seq.stream), gt.t_end)
        feats = sequence_descriptors(seq, config)[lo - 1:hi]
        vids.append(TrainingVideo(seq.stream.id, label, feats, [gt.box(t) for t in range(lo, hi + 1)]))
    return vids


def run_train(seqs, labels: dict | None, config: PipelineConfig) -> ClassifierBank:
    """Codebook, interval length and both classifier families."""
    vids = prepare_training(seqs, labels, config)
    classes = sorted({v.label for v in vids})
    for c in classes:
        if sum(v.label == c for v in vids) < 2:
            raise ValueError(f"class {c!r} has fewer than 2 training videos")
    if len(classes) < 2:
        raise ValueError("training needs at least 2 classes")
    M = config.M
    all_desc = np.vstack([tube_descriptors(v.frames, v.boxes) for v in vids])
    codebook = build_codebook(all_desc, config.V, config.seed)

    lengths, seg_x, seg_m, seg_y, cum = [], [], [], [], []
    for v in vids:
        n = len(v.frames)
        if n < M:
            raise ValueError(f"{v.video_id}: {n} frames cannot be split into {M} intervals")
        ends = interval_bounds(n, M)
        starts = [0] + ends[:-1]
        lengths.extend(e - s for s, e in zip(starts, ends))
        acc = np.zeros(codebook.V)
        for m, (s, e) in enumerate(zip(starts, ends), start=1):
            d = tube_descriptors(v.frames[s:e], v.boxes[s:e])
            counts = codebook.histogram(d) if len(d) else np.zeros(codebook.V)
            acc = acc + counts
            seg_x.append(l1(counts))
            seg_m.append(m)
            seg_y.append(v.label)
            cum.append((v.label, m, l1(acc)))
    omega = max(1, int(round(float(np.mean(lengths)))))

    dp = train_dp_svm(np.array(seg_x), np.array(seg_m), np.array(seg_y), classes, M, config.C,
                      config.dp_kernel, config.svm_tol)
    ssvm = {}
    for c in classes:
        X = np.array([x for _, _, x in cum])
        Y = [m if lab == c else -1 for lab, m, _ in cum]
        res = train_ssvm(X, Y, M, config.C, config.epsilon, config.ssvm_tol, config.ssvm_max_rounds,
                         config.psi_variant)
        ssvm[c] = res.w
    return ClassifierBank(config.mode, classes, M, omega, config.C, config.epsilon, codebook,
                          config.dp_kernel, config.psi_variant, dp, ssvm)


def load_labels(path) -> dict:
    d = yaml.safe_load(Path(path).read_text()) or {}
    return {str(k): str(v) for k, v in d.items()}

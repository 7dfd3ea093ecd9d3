"""Localization and prediction metrics: tube IoU, ROC at an overlap
threshold, AUC, precision/recall and accuracy against observed fraction."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import box_iou

OBSERVATION_POINTS = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))
AUC_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
PENDING = "confidence_pending"


@dataclass
class Detection:
    video_id: str
    boxes: dict  # frame -> (x, y, w, h)
    label: str
    confidence: float


@dataclass
class EvalCurve:
    points: np.ndarray  # (n, 2)
    kind: str
    overlap_threshold: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def x(self):
        return self.points[:, 0]

    @property
    def y(self):
        return self.points[:, 1]

    def to_csv(self, path) -> None:
        head = f"# kind={self.kind}"
        if self.overlap_threshold is not None:
            head += f" theta={self.overlap_threshold:g}"
        for k, v in self.info.items():
            head += f" {k}={v}"
        lines = [head, "x,y"] + [f"{x:.12g},{y:.12g}" for x, y in self.points]
        Path(path).write_text("\n".join(lines) + "\n")


def _gt_boxes(gt) -> dict:
    if isinstance(gt, dict):
        return gt
    return {t: bl[0] for t, bl in gt.boxes.items() if bl}


def tube_iou(det_boxes, gt) -> float:
    """Mean per-frame IoU over the union of both temporal extents; a frame
    where either tube is absent scores 0."""
    det_boxes = det_boxes.boxes if isinstance(det_boxes, Detection) else det_boxes
    det = {t: b for t, b in det_boxes.items() if b is not None}
    g = _gt_boxes(gt)
    frames = set(det) | set(g)
    if not frames:
        return 0.0
    return float(sum(box_iou(det.get(t), g.get(t)) for t in frames) / len(frames))


def match_detections(dets, gts, theta: float):
    """Greedy one-to-one matching in descending confidence.

    Returns the detections in ranked order and a parallel list of booleans
    (True for a true positive).  A detection may claim an unmatched ground
    truth of the same video and class with tube IoU >= theta; the best
    overlapping one is taken.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    taken = set()
    ranked, tp = [], []
    for i in order:
        d = dets[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if j in taken or g.video_id != d.video_id or g.class_label != d.label:
                continue
            iou = tube_iou(d.boxes, g)
            if iou >= theta and iou > best_iou:
                best, best_iou = j, iou
        if best is not None:
            taken.add(best)
        ranked.append(d)
        tp.append(best is not None)
    return ranked, tp


def _cut_indices(conf):
    """Positions after which the confidence threshold can be placed."""
    return [k for k in range(len(conf)) if k == len(conf) - 1 or conf[k + 1] != conf[k]]


def roc_at_overlap(dets, gts, theta: float = 0.2) -> EvalCurve:
    """(FPR, TPR) over descending confidence thresholds.

    TPR divides by the number of ground truths; FPR by the number of
    detections left unmatched (false positives plus true negatives), 0
    when there are none.  The curve runs from (0, 0) and is closed at
    FPR 1.
    """
    ranked, tp = match_detections(dets, gts, theta)
    n_pos = len(gts)
    n_neg = len(tp) - sum(tp)
    conf = [d.confidence for d in ranked]
    ctp = np.cumsum(tp) if tp else np.zeros(0)
    cfp = np.cumsum(np.logical_not(tp)) if tp else np.zeros(0)
    pts = [(0.0, 0.0)]
    for k in _cut_indices(conf):
        pts.append((cfp[k] / n_neg if n_neg else 0.0, ctp[k] / n_pos if n_pos else 0.0))
    if pts[-1][0] < 1.0:
        pts.append((1.0, pts[-1][1]))
    return EvalCurve(np.array(pts, dtype=np.float64), "roc", theta, {"fpr_denominator": "unmatched_detections"})


def auc(curve) -> float:
    p = curve.points if isinstance(curve, EvalCurve) else np.asarray(curve, dtype=np.float64)
    if len(p) < 2:
        return 0.0
    dx = np.diff(p[:, 0])
    return float(np.sum(dx * (p[1:, 1] + p[:-1, 1]) / 2.0))


def auc_vs_threshold(dets, gts, thetas=AUC_THRESHOLDS) -> EvalCurve:
    pts = [(t, auc(roc_at_overlap(dets, gts, t))) for t in thetas]
    return EvalCurve(np.array(pts, dtype=np.float64), "auc_vs_threshold")


def precision_recall(dets, gts, theta: float = 0.2) -> tuple[EvalCurve, float]:
    """Ranked precision/recall with interpolated precision.

    Points sit at each recall level reached; precision at recall r is the
    best precision at any recall >= r.  AP integrates these points by the
    trapezoid rule starting from recall 0.
    """
    ranked, tp = match_detections(dets, gts, theta)
    n_pos = len(gts)
    if not tp or n_pos == 0 or not any(tp):
        return EvalCurve(np.array([[0.0, 0.0]]), "precision_recall", theta, {"ap": 0.0}), 0.0
    tp = np.array(tp)
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, len(tp) + 1)
    rec = ctp / n_pos
    interp = np.maximum.accumulate(prec[::-1])[::-1]
    idx = np.flatnonzero(tp)
    pts = [(0.0, interp[idx[0]])] + [(rec[k], interp[k]) for k in idx]
    curve = np.array(pts, dtype=np.float64)
    ap = auc(curve)
    return EvalCurve(curve, "precision_recall", theta, {"ap": round(ap, 12)}), ap


def _valid(records):
    return [r for r in records if PENDING not in r.flags and len(r.confidences)]


def classify_at(records, t_limit: float):
    """Class index from the latest valid confidences at or before
    ``t_limit``, falling back to the first valid record."""
    valid = _valid(records)
    if not valid:
        return None
    upto = [r for r in valid if r.frame <= t_limit]
    rec = upto[-1] if upto else valid[0]
    return int(np.argmax(rec.confidences))


def accuracy_vs_observation(tracks, gts, fractions=OBSERVATION_POINTS) -> EvalCurve:
    """Accuracy of argmax-confidence classification after observing each
    fraction f of the annotated action, i.e. frames up to
    t_start + f * (t_end - t_start).

    ``tracks`` maps video id to a track (header classes + records);
    ``gts`` maps video id to its ground truth.
    """
    pts = []
    for f in fractions:
        correct = 0
        for vid, gt in gts.items():
            tr = tracks.get(vid)
            if tr is None:
                continue
            k = classify_at(tr.records, gt.t_start + f * (gt.t_end - gt.t_start))
            correct += k is not None and tr.classes[k] == gt.class_label
        pts.append((float(f), correct / len(gts) if gts else 0.0))
    return EvalCurve(np.array(pts, dtype=np.float64), "acc_vs_observation")


def full_video_accuracy(tracks, gts) -> float:
    correct = 0
    for vid, gt in gts.items():
        tr = tracks.get(vid)
        k = classify_at(tr.records, gt.t_end) if tr is not None else None
        correct += k is not None and tr.classes[k] == gt.class_label
    return correct / len(gts) if gts else 0.0


def detection_from_track(track) -> Detection:
    """One detection per track: its emitted tube, labelled with the class of
    the highest final confidence."""
    boxes = {r.frame: r.box for r in track.records if r.box is not None}
    valid = _valid(track.records)
    if valid:
        conf = valid[-1].confidences
        k = int(np.argmax(conf))
        return Detection(track.video_id, boxes, track.classes[k], float(conf[k]))
    return Detection(track.video_id, boxes, track.classes[0] if track.classes else "", float("-inf"))


def evaluate(tracks, gts, theta: float = 0.2, out_dir=None) -> dict:
    """All curves plus a scalar summary; written to ``out_dir`` if given."""
    dets = [detection_from_track(t) for t in tracks.values()]
    gl = list(gts.values())
    roc = roc_at_overlap(dets, gl, theta)
    avt = auc_vs_threshold(dets, gl)
    pr, ap = precision_recall(dets, gl, theta)
    acc = accuracy_vs_observation(tracks, gts)
    ious = {d.video_id: tube_iou(d.boxes, gts[d.video_id]) for d in dets if d.video_id in gts}
    summary = {"theta": theta, "auc": auc(roc), "ap": ap, "videos": len(gts),
               "mean_tube_iou": float(np.mean(list(ious.values()))) if ious else 0.0,
               "auc_vs_threshold": {f"{t:g}": float(a) for t, a in avt.points},
               "accuracy_vs_observation": {f"{f:g}": float(a) for f, a in acc.points},
               "tube_iou": ious}
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        roc.to_csv(d / "roc.csv")
        avt.to_csv(d / "auc_vs_threshold.csv")
        pr.to_csv(d / "precision_recall.csv")
        acc.to_csv(d / "accuracy_vs_observation.csv")
        (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary

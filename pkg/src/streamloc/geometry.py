"""Axis-aligned box helpers.  Boxes are (x, y, w, h) covering [x, x+w) x [y, y+h)."""
from __future__ import annotations

import numpy as np


def box_iou(a, b) -> float:
    if a is None or b is None:
        return 0.0
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    iw = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    ih = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return float(inter / union) if union > 0 else 0.0


def box_center(b) -> np.ndarray:
    return np.array([b[0] + b[2] / 2.0, b[1] + b[3] / 2.0])


def box_state(b) -> np.ndarray:
    """(cx, cy, w, h) parameterization used by the transition model."""
    return np.array([b[0] + b[2] / 2.0, b[1] + b[3] / 2.0, b[2], b[3]], dtype=np.float64)


def clip_box(b, shape):
    h, w = shape
    x0 = min(max(0.0, b[0]), w - 1.0)
    y0 = min(max(0.0, b[1]), h - 1.0)
    x1 = min(float(w), max(x0 + 1.0, b[0] + b[2]))
    y1 = min(float(h), max(y0 + 1.0, b[1] + b[3]))
    return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def mask_box(mask):
    """Tight box of a boolean pixel mask, or None if empty."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return (float(xs.min()), float(ys.min()),
            float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


def centroid_inside(centroids, box) -> np.ndarray:
    if box is None:
        return np.zeros(len(centroids), bool)
    x, y, w, h = box
    c = np.asarray(centroids)
    return (c[:, 0] >= x) & (c[:, 0] < x + w) & (c[:, 1] >= y) & (c[:, 1] < y + h)

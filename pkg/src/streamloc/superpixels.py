"""SLIC over-segmentation, per-superpixel descriptors and pairwise distances."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from skimage.color import rgb2lab
from skimage.measure import label as connected_components

N_COLOR_BINS = 8  # per HSI channel -> 8*8*8 = 512
COLOR_DIM = N_COLOR_BINS ** 3
CHI2_EPS = 1e-10
SLIC_ITERATIONS = 10

DISTANCE_KINDS = ("col", "hof", "mu", "mb", "edge")


@dataclass(frozen=True)
class Superpixel:
    id: int
    frame_index: int
    centroid: tuple
    pixel_set: np.ndarray  # flat pixel indices
    color_hist: np.ndarray
    flow_hist: np.ndarray
    mean_flow_mag: float
    mean_flow: tuple
    boundary_strength: dict  # neighbor id -> (motion boundary, intensity edge)


@dataclass
class SuperpixelMap:
    """Labels of one frame plus array-backed per-superpixel features.

    Features are stored column-wise (one row per superpixel id) so the CRF
    and appearance model can work vectorized; ``superpixel(i)`` gives the
    record view of a single region.
    """

    frame_index: int
    labels: np.ndarray
    adjacency: frozenset
    sizes: np.ndarray
    centroids: np.ndarray  # (n, 2) as (x, y)
    color_hist: np.ndarray | None = None
    flow_hist: np.ndarray | None = None
    mean_flow_mag: np.ndarray | None = None
    mean_flow: np.ndarray | None = None
    boundary: dict = field(default_factory=dict)  # (a, b), a < b -> (mb, edge)

    @property
    def n(self) -> int:
        return len(self.sizes)

    @property
    def shape(self):
        return self.labels.shape

    def pixels(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.labels.ravel() == i)

    def neighbors(self, i: int) -> list:
        out = [b for a, b in self.adjacency if a == i]
        out += [a for a, b in self.adjacency if b == i]
        return sorted(out)

    def superpixel(self, i: int) -> Superpixel:
        if self.color_hist is None:
            raise ValueError("features not extracted")
        bs = {}
        for j in self.neighbors(i):
            key = (min(i, j), max(i, j))
            bs[j] = self.boundary.get(key, (0.0, 0.0))
        return Superpixel(
            id=i, frame_index=self.frame_index,
            centroid=(float(self.centroids[i, 0]), float(self.centroids[i, 1])),
            pixel_set=self.pixels(i),
            color_hist=self.color_hist[i], flow_hist=self.flow_hist[i],
            mean_flow_mag=float(self.mean_flow_mag[i]),
            mean_flow=(float(self.mean_flow[i, 0]), float(self.mean_flow[i, 1])),
            boundary_strength=bs)

    @property
    def superpixels(self) -> list:
        return [self.superpixel(i) for i in range(self.n)]

    def label_at(self, x: float, y: float) -> int:
        h, w = self.labels.shape
        r = int(np.clip(round(y), 0, h - 1))
        c = int(np.clip(round(x), 0, w - 1))
        return int(self.labels[r, c])


def _as_float_rgb(frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = np.repeat(frame[..., None], 3, axis=2)
    if frame.dtype == np.uint8:
        return frame.astype(np.float64) / 255.0
    return frame.astype(np.float64)


def rgb_to_hsi(rgb: np.ndarray) -> np.ndarray:
    """Convert float RGB in [0, 1] to HSI with H in [0, 2*pi), S, I in [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    i = (r + g + b) / 3.0
    mn = np.minimum(np.minimum(r, g), b)
    s = np.where(i > 0, 1.0 - mn / np.maximum(i, 1e-12), 0.0)
    num = 0.5 * ((r - g) + (r - b))
    den = np.sqrt((r - g) ** 2 + (r - b) * (g - b))
    theta = np.arccos(np.clip(num / np.maximum(den, 1e-12), -1.0, 1.0))
    h = np.where(b <= g, theta, 2 * np.pi - theta)
    h = np.where(den > 1e-12, h, 0.0)
    return np.stack([np.mod(h, 2 * np.pi), np.clip(s, 0, 1), np.clip(i, 0, 1)], axis=-1)


def _grid_seeds(h, w, target_count, origin):
    s = np.sqrt(h * w / target_count)
    nx = int(min(w, max(1, round(w / s))))
    ny = int(min(h, max(1, round(target_count / nx))))
    step_x, step_y = w / nx, h / ny
    # pixel (r, c) has its centre at coordinate (r, c), hence the -0.5
    xs = (np.arange(nx) + origin[0]) * step_x - 0.5
    ys = (np.arange(ny) + origin[1]) * step_y - 0.5
    return ny, nx, ys, xs, step_y, step_x


def _relabel_in_scan_order(labels):
    _, first = np.unique(labels.ravel(), return_index=True)
    order = np.argsort(first)
    remap = np.empty(labels.max() + 1, dtype=np.int64)
    remap[np.unique(labels.ravel())[order]] = np.arange(len(order))
    return remap[labels]


def _enforce_connectivity(labels, min_size):
    comp = connected_components(labels, connectivity=1, background=-1) - 1
    n = comp.max() + 1
    sizes = np.bincount(comp.ravel(), minlength=n)
    # fragments below min_size merge; larger ones become superpixels of their own
    keep = sizes >= min_size
    if not keep.any():
        keep[int(np.argmax(sizes))] = True
    for c in np.argsort(sizes, kind="stable"):
        if keep[c]:
            continue
        mask = comp == c
        if not mask.any():
            continue
        border = np.zeros_like(mask)
        border[1:, :] |= mask[:-1, :]
        border[:-1, :] |= mask[1:, :]
        border[:, 1:] |= mask[:, :-1]
        border[:, :-1] |= mask[:, 1:]
        border &= ~mask
        nb = comp[border]
        if nb.size == 0:
            keep[c] = True
            continue
        counts = np.bincount(nb, minlength=n)
        target = int(np.argmax(counts))
        comp[mask] = target
        sizes[target] += sizes[c]
        sizes[c] = 0
    return _relabel_in_scan_order(comp)


def _adjacency(labels):
    pairs = []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        d = a != b
        pairs.append(np.stack([np.minimum(a[d], b[d]), np.maximum(a[d], b[d])], axis=1))
    p = np.unique(np.concatenate(pairs), axis=0) if pairs else np.zeros((0, 2), int)
    return frozenset((int(x), int(y)) for x, y in p)


def map_from_labels(labels, frame_index=0) -> SuperpixelMap:
    labels = np.asarray(labels, dtype=np.int64)
    n = int(labels.max()) + 1
    h, w = labels.shape
    sizes = np.bincount(labels.ravel(), minlength=n)
    if np.any(sizes == 0):
        raise ValueError("labels must be contiguous 0..n-1")
    yy, xx = np.mgrid[0:h, 0:w]
    cx = np.bincount(labels.ravel(), weights=xx.ravel(), minlength=n) / sizes
    cy = np.bincount(labels.ravel(), weights=yy.ravel(), minlength=n) / sizes
    return SuperpixelMap(frame_index=frame_index, labels=labels,
                         adjacency=_adjacency(labels), sizes=sizes,
                         centroids=np.stack([cx, cy], axis=1))


def slic_segment(frame, target_count: int = 200, compactness: float = 10.0,
                 frame_index: int = 0, origin=(0.5, 0.5),
                 n_iter: int = SLIC_ITERATIONS) -> SuperpixelMap:
    """SLIC superpixels: local k-means in (CIELAB, x, y) space.

    Seeds start on a regular grid with spacing sqrt(HW / target_count),
    shifted by ``origin`` (fraction of a cell).  Each iteration assigns a
    pixel to the nearest seed among those of the 3x3 surrounding grid cells
    whose 2S x 2S window covers it.  A single connectivity pass then folds
    fragments smaller than S^2/4 into their longest-bordering neighbour.
    """
    rgb = _as_float_rgb(frame)
    h, w = rgb.shape[:2]
    if target_count < 2:
        raise ValueError("target_count must be >= 2")
    if compactness <= 0:
        raise ValueError("compactness must be > 0")
    if target_count > h * w:
        raise ValueError(f"target_count {target_count} exceeds pixel count {h * w}")
    lab = rgb2lab(rgb)
    ny, nx, ys, xs, step_y, step_x = _grid_seeds(h, w, target_count, origin)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    seeds = np.column_stack([gy.ravel(), gx.ravel()])
    si = np.clip(np.rint(seeds).astype(int), 0, [h - 1, w - 1])
    centers = np.column_stack([lab[si[:, 0], si[:, 1]], seeds])
    step = max(step_x, step_y)
    s_norm = np.sqrt(h * w / target_count)
    spatial_w = (compactness / s_norm) ** 2

    # candidate seeds of a pixel: its grid cell and the 8 cells around it
    yy, xx = np.mgrid[0:h, 0:w]
    cell_y = np.minimum((yy / step_y).astype(int), ny - 1)
    cell_x = np.minimum((xx / step_x).astype(int), nx - 1)
    cand = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            cy_, cx_ = cell_y + dy, cell_x + dx
            valid = (cy_ >= 0) & (cy_ < ny) & (cx_ >= 0) & (cx_ < nx)
            cand.append(np.where(valid, cy_ * nx + cx_, -1))
    cand = np.stack(cand, axis=-1).reshape(h * w, 9)
    has = cand >= 0
    cand_safe = np.where(has, cand, 0)
    pix = np.column_stack([lab.reshape(-1, 3), yy.ravel(), xx.ravel()]).astype(np.float64)
    labels = cand_safe[:, 4].copy()
    k_all = len(centers)
    for _ in range(n_iter):
        c = centers[cand_safe]  # (HW, 9, 5)
        dc = ((pix[:, None, :3] - c[..., :3]) ** 2).sum(-1)
        dyy = pix[:, None, 3] - c[..., 3]
        dxx = pix[:, None, 4] - c[..., 4]
        d = dc + spatial_w * (dyy ** 2 + dxx ** 2)
        inside = has & (np.abs(dyy) <= step) & (np.abs(dxx) <= step)
        d = np.where(inside, d, np.inf)
        j = np.argmin(d, axis=1)
        found = np.isfinite(d[np.arange(h * w), j])
        labels = np.where(found, cand_safe[np.arange(h * w), j], labels)
        cnt = np.bincount(labels, minlength=k_all)
        new = np.empty_like(centers)
        for col in range(5):
            new[:, col] = np.bincount(labels, weights=pix[:, col], minlength=k_all)
        alive = cnt > 0
        new[alive] /= cnt[alive, None]
        new[~alive] = centers[~alive]
        centers = new
    labels = labels.reshape(h, w)
    min_size = max(1, int(step * step / 4))
    labels = _enforce_connectivity(labels, min_size)
    return map_from_labels(labels, frame_index)


def _flow_arrays(flow):
    if flow is None:
        return None, None
    if hasattr(flow, "u"):
        return np.asarray(flow.u, float), np.asarray(flow.v, float)
    u, v = flow
    return np.asarray(u, float), np.asarray(v, float)


def _grad_mag(img):
    gy, gx = np.gradient(img)
    return np.sqrt(gx * gx + gy * gy)


def _pair_means(labels, value, n):
    """Mean of ``value`` over the shared border of every adjacent pair.

    The border of (a, b) is the set of 4-neighbour pixel pairs (p, q) with
    label a on one side and b on the other; each pair contributes the mean
    of the two pixel values.
    """
    keys, vals = [], []
    for (la, lb, va, vb) in (
            (labels[:, :-1], labels[:, 1:], value[:, :-1], value[:, 1:]),
            (labels[:-1, :], labels[1:, :], value[:-1, :], value[1:, :])):
        d = la != lb
        a, b = la[d], lb[d]
        keys.append(np.minimum(a, b) * n + np.maximum(a, b))
        vals.append(0.5 * (va[d] + vb[d]))
    keys = np.concatenate(keys)
    vals = np.concatenate(vals)
    uk, inv = np.unique(keys, return_inverse=True)
    sums = np.bincount(inv, weights=vals)
    cnts = np.bincount(inv)
    return {(int(k // n), int(k % n)): float(s / c) for k, s, c in zip(uk, sums, cnts)}


def flow_histograms(labels, u, v, n, bins=8):
    mag = np.sqrt(u * u + v * v)
    ang = np.mod(np.arctan2(v, u), 2 * np.pi)
    b = np.minimum((ang / (2 * np.pi / bins)).astype(np.int64), bins - 1)
    hist = np.bincount((labels * bins + b).ravel(), weights=mag.ravel(),
                       minlength=n * bins).reshape(n, bins)
    tot = hist.sum(axis=1)
    empty = tot <= 0
    hist[~empty] /= tot[~empty, None]
    hist[empty] = 0.0
    hist[empty, 0] = 1.0  # no motion: all mass in bin 0
    return hist


def extract_features(smap: SuperpixelMap, frame, flow=None, previous: SuperpixelMap | None = None,
                     bins: int = 8) -> SuperpixelMap:
    """Fill colour/flow descriptors and border strengths of ``smap``.

    ``flow`` is the displacement field on this frame's pixel grid.  When it
    is missing, the flow-dependent fields are copied from the superpixel of
    ``previous`` with the nearest centroid (zeros if there is no previous
    map) and the motion-boundary strength of a pair falls back to the
    difference of the two copied mean flows.
    """
    rgb = _as_float_rgb(frame)
    labels = smap.labels
    h, w = labels.shape
    if rgb.shape[:2] != (h, w):
        raise ValueError("frame and superpixel map dimensions differ")
    n = smap.n
    hsi = rgb_to_hsi(rgb)
    hb = np.minimum((hsi[..., 0] / (2 * np.pi) * N_COLOR_BINS).astype(np.int64), N_COLOR_BINS - 1)
    sb = np.minimum((hsi[..., 1] * N_COLOR_BINS).astype(np.int64), N_COLOR_BINS - 1)
    ib = np.minimum((hsi[..., 2] * N_COLOR_BINS).astype(np.int64), N_COLOR_BINS - 1)
    code = hb * N_COLOR_BINS * N_COLOR_BINS + sb * N_COLOR_BINS + ib
    color = np.bincount((labels * COLOR_DIM + code).ravel(),
                        minlength=n * COLOR_DIM).reshape(n, COLOR_DIM).astype(np.float64)
    color /= smap.sizes[:, None]
    edge = _pair_means(labels, _grad_mag(hsi[..., 2]), n) if smap.adjacency else {}

    u, v = _flow_arrays(flow)
    if u is not None:
        if u.shape != (h, w) or v.shape != (h, w):
            raise ValueError("flow dimensions differ from frame")
        fh = flow_histograms(labels, u, v, n, bins)
        mag = np.sqrt(u * u + v * v)
        fmag = np.bincount(labels.ravel(), weights=mag.ravel(), minlength=n) / smap.sizes
        mu = np.bincount(labels.ravel(), weights=u.ravel(), minlength=n) / smap.sizes
        mv = np.bincount(labels.ravel(), weights=v.ravel(), minlength=n) / smap.sizes
        mflow = np.stack([mu, mv], axis=1)
        mb = _pair_means(labels, _grad_mag(u) + _grad_mag(v), n) if smap.adjacency else {}
    else:
        if previous is not None and previous.flow_hist is not None:
            d = ((smap.centroids[:, None, :] - previous.centroids[None, :, :]) ** 2).sum(-1)
            src = np.argmin(d, axis=1)
            fh = previous.flow_hist[src].copy()
            fmag = previous.mean_flow_mag[src].copy()
            mflow = previous.mean_flow[src].copy()
        else:
            fh = np.zeros((n, bins))
            fh[:, 0] = 1.0
            fmag = np.zeros(n)
            mflow = np.zeros((n, 2))
        mb = {(a, b): float(np.linalg.norm(mflow[a] - mflow[b])) for a, b in smap.adjacency}

    boundary = {k: (mb.get(k, 0.0), edge.get(k, 0.0)) for k in smap.adjacency}
    return replace(smap, color_hist=color, flow_hist=fh, mean_flow_mag=fmag,
                   mean_flow=mflow, boundary=boundary)


def chi2(a, b, eps=CHI2_EPS):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return 0.5 * np.sum((a - b) ** 2 / (a + b + eps), axis=-1)


def superpixel_distance(kind: str, s: Superpixel, s2: Superpixel) -> float:
    if kind == "col":
        return float(chi2(s.color_hist, s2.color_hist))
    if kind == "hof":
        return float(chi2(s.flow_hist, s2.flow_hist))
    if kind == "mu":
        return abs(s.mean_flow_mag - s2.mean_flow_mag)
    if kind in ("mb", "edge"):
        if s.id == s2.id and s.frame_index == s2.frame_index:
            return 0.0
        if s.frame_index != s2.frame_index or s2.id not in s.boundary_strength:
            raise ValueError(f"d_{kind} needs adjacent superpixels of one frame")
        return float(s.boundary_strength[s2.id][0 if kind == "mb" else 1])
    raise ValueError(f"unknown distance kind {kind!r}")


def forward_splat(u, v):
    """Push a t -> t+1 flow field onto the pixel grid of frame t+1.

    Each source pixel lands on its rounded destination; where several
    land on one pixel the largest displacement wins (moving surfaces
    occlude static ones).  Unreached pixels get zero motion.
    """
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    h, w = u.shape
    yy, xx = np.mgrid[0:h, 0:w]
    tx = np.rint(xx + u).astype(np.int64)
    ty = np.rint(yy + v).astype(np.int64)
    ok = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    dest = (ty * w + tx)[ok]
    mag = np.hypot(u, v)[ok]
    su, sv = u[ok], v[ok]
    order = np.lexsort((mag, dest))
    dest, su, sv = dest[order], su[order], sv[order]
    last = np.r_[dest[1:] != dest[:-1], True]
    out_u = np.zeros(h * w)
    out_v = np.zeros(h * w)
    out_u[dest[last]] = su[last]
    out_v[dest[last]] = sv[last]
    return out_u.reshape(h, w), out_v.reshape(h, w)


def segment_cached(frame, target_count, compactness, cache_dir=None, frame_index=0):
    """slic_segment with an on-disk label cache keyed by frame content."""
    if cache_dir is None:
        return slic_segment(frame, target_count, compactness, frame_index=frame_index)
    frame = np.ascontiguousarray(frame)
    key = hashlib.sha1(frame.tobytes() + str(frame.shape).encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"slic_{key}_{target_count}_{compactness:g}.npz"
    if path.exists():
        return map_from_labels(np.load(path)["labels"], frame_index)
    smap = slic_segment(frame, target_count, compactness, frame_index=frame_index)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, labels=smap.labels)
    return smap

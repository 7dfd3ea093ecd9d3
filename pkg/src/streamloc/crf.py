"""Spatio-temporal superpixel CRF, actor box extraction and the MAP state update."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field

import maxflow
import numpy as np

from .geometry import box_center, box_state, centroid_inside, clip_box, mask_box
from .pose import minmax, pose_likelihood
from .superpixels import chi2

log = logging.getLogger(__name__)

SPATIAL, TEMPORAL = 0, 1
BG, FG = 0, 1


@dataclass
class CrfGraph:
    unary: np.ndarray  # (n, 2) cost of label bg (col 0) and fg (col 1)
    edges: np.ndarray  # (E, 2) node pairs
    weights: np.ndarray  # (E,) disagreement penalty
    kinds: np.ndarray  # (E,) SPATIAL or TEMPORAL
    node_frame: np.ndarray  # window position of each node
    node_sp: np.ndarray  # superpixel id within its frame
    fg_prob: np.ndarray = None

    @property
    def n(self) -> int:
        return len(self.unary)

    def frame_nodes(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.node_frame == k)

    def dump(self, path) -> None:
        """Write nodes, edges and potentials as JSON lines for cross-checking."""
        with open(path, "w") as fh:
            for i in range(self.n):
                fh.write(json.dumps({"node": i, "frame": int(self.node_frame[i]), "sp": int(self.node_sp[i]),
                                     "unary": self.unary[i].tolist()}) + "\n")
            for (a, b), w, k in zip(self.edges, self.weights, self.kinds):
                fh.write(json.dumps({"edge": [int(a), int(b)], "weight": float(w),
                                     "kind": "spatial" if k == SPATIAL else "temporal"}) + "\n")


def _softplus(x):
    return np.logaddexp(0.0, x)


def unary_costs(h_fg_norm, p_pose, alpha_fg=1.0, alpha_pose=1.0, gain=8.0, center=0.5):
    """Label costs from a logistic foreground probability.

    The squashed evidence ``alpha_fg * H_fg + alpha_pose * P_pose`` gives
    p(fg); costs are -log p(fg) and -log(1 - p(fg)).
    """
    z = alpha_fg * np.asarray(h_fg_norm) + alpha_pose * np.asarray(p_pose)
    x = gain * (z - center)
    return np.column_stack([_softplus(x), _softplus(-x)]), 1.0 / (1.0 + np.exp(-x))


def adaptive_center(h_bar, in_pose, default: float = 0.5) -> float:
    """Logistic centre halfway between the mean normalized appearance score
    inside the pose boxes and the mean outside.  Min-max scaling is set by
    outliers, so a fixed centre can land on either side of the background
    level; the pose split anchors it.  Falls back to ``default`` when either
    side is empty."""
    h_bar = np.asarray(h_bar, float)
    in_pose = np.asarray(in_pose, bool)
    if not in_pose.any() or in_pose.all():
        return default
    return float(0.5 * (h_bar[in_pose].mean() + h_bar[~in_pose].mean()))


SPATIAL_KINDS = ("col", "hof", "mu", "mb", "edge")
TEMPORAL_KINDS = ("col", "hof", "mu")


def spatial_distances(smap):
    """Adjacent pairs of one frame and their (col, hof, mu, mb, edge) distances."""
    if not smap.adjacency:
        return np.zeros((0, 2), int), np.zeros((0, 5))
    pairs = np.array(sorted(smap.adjacency), dtype=np.int64)
    a, b = pairs[:, 0], pairs[:, 1]
    bd = np.array([smap.boundary[(int(x), int(y))] for x, y in pairs]).reshape(-1, 2)
    d = np.column_stack([chi2(smap.color_hist[a], smap.color_hist[b]),
                         chi2(smap.flow_hist[a], smap.flow_hist[b]),
                         np.abs(smap.mean_flow_mag[a] - smap.mean_flow_mag[b]), bd])
    return pairs, d


def temporal_pairs(map_a, map_b, flow, min_overlap=0.2):
    """Superpixel pairs (s in a, s' in b) where >= min_overlap of s's
    flow-warped pixels land in s'."""
    h, w = map_a.shape
    u = flow.u if hasattr(flow, "u") else flow[0]
    v = flow.v if hasattr(flow, "v") else flow[1]
    yy, xx = np.mgrid[0:h, 0:w]
    tx = np.rint(xx + u).astype(int)
    ty = np.rint(yy + v).astype(int)
    ok = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    src = map_a.labels[ok]
    dst = map_b.labels[ty[ok], tx[ok]]
    key = src * map_b.n + dst
    uk, cnt = np.unique(key, return_counts=True)
    s, d = uk // map_b.n, uk % map_b.n
    keep = cnt >= min_overlap * map_a.sizes[s]
    return np.column_stack([s[keep], d[keep]])


def temporal_distances(map_a, map_b, pairs):
    a, b = pairs[:, 0], pairs[:, 1]
    return np.column_stack([chi2(map_a.color_hist[a], map_b.color_hist[b]),
                            chi2(map_a.flow_hist[a], map_b.flow_hist[b]),
                            np.abs(map_a.mean_flow_mag[a] - map_b.mean_flow_mag[b])]).reshape(-1, 3)


def distance_scales(dists) -> np.ndarray:
    """Mean of each distance column over the graph's edges (1 where zero)."""
    if len(dists) == 0:
        return np.ones(dists.shape[1])
    m = dists.mean(axis=0)
    return np.where(m > 0, m, 1.0)


def potts_weights(dists, scales, beta, kinds) -> np.ndarray:
    """sum_f beta_f * exp(-d_f / mean d_f): 1 per kind for identical neighbours,
    falling towards 0 across strong contrast."""
    b = np.array([beta[k] for k in kinds])
    return (np.exp(-dists / scales) * b).sum(axis=1)


def build_graph(maps, flows, model, poses, h_pose, beta=None, alpha_fg=1.0, alpha_pose=-1.0,
                gain=8.0, center=None, min_overlap=0.2, pose_margin=0.0,
                temporal_cache=None) -> CrfGraph:
    """CRF over the superpixels of a window of frames.

    ``maps`` run oldest to newest; ``flows[k]`` maps frame k to k+1 of the
    window.  ``poses[k]``/``h_pose[k]`` are the refined pose of frame k and
    its combined cost.  ``alpha_pose`` is the signed weight used inside the
    pose likelihood; the unary uses its magnitude.  ``center`` None picks
    the logistic centre from the pose split (``adaptive_center``).  Each pairwise distance
    kind is scaled by its mean over the window's edges of that type.
    """
    beta = beta or {k: 1.0 for k in SPATIAL_KINDS}
    offsets = np.cumsum([0] + [m.n for m in maps])
    node_frame = np.concatenate([np.full(m.n, k) for k, m in enumerate(maps)])
    node_sp = np.concatenate([np.arange(m.n) for m in maps])
    h_fg = np.concatenate([model.scores(m.color_hist, m.mean_flow) for m in maps])
    h_bar = minmax(h_fg)
    p_pose = np.zeros(len(h_fg))
    in_pose = np.zeros(len(h_fg), bool)
    for k, m in enumerate(maps):
        p = poses[k] if poses is not None else None
        if p is None:
            continue
        inside = centroid_inside(m.centroids, p.bbox(pose_margin, m.shape))
        in_pose[offsets[k]:offsets[k + 1]] = inside
        p_pose[offsets[k]:offsets[k + 1]] = pose_likelihood(h_pose[k], alpha_pose) * inside
    if center is None:
        center = adaptive_center(h_bar, in_pose)
    unary, prob = unary_costs(h_bar, p_pose, abs(alpha_fg), abs(alpha_pose), gain, center)

    s_pairs, s_dist = [], []
    for k, m in enumerate(maps):
        pairs, d = spatial_distances(m)
        s_pairs.append(pairs + offsets[k])
        s_dist.append(d)
    t_pairs, t_dist = [], []
    for k in range(len(maps) - 1):
        key = (maps[k].frame_index, maps[k + 1].frame_index)
        if temporal_cache is not None and key in temporal_cache:
            pairs, d = temporal_cache[key]
        else:
            pairs = temporal_pairs(maps[k], maps[k + 1], flows[k], min_overlap)
            d = temporal_distances(maps[k], maps[k + 1], pairs)
            if temporal_cache is not None:
                temporal_cache[key] = (pairs, d)
        t_pairs.append(np.column_stack([pairs[:, 0] + offsets[k], pairs[:, 1] + offsets[k + 1]]))
        t_dist.append(d)
    s_pairs = np.concatenate(s_pairs).reshape(-1, 2)
    s_dist = np.concatenate(s_dist).reshape(-1, 5)
    t_pairs = np.concatenate(t_pairs).reshape(-1, 2) if t_pairs else np.zeros((0, 2), int)
    t_dist = np.concatenate(t_dist).reshape(-1, 3) if t_dist else np.zeros((0, 3))
    w_s = potts_weights(s_dist, distance_scales(s_dist), beta, SPATIAL_KINDS)
    w_t = potts_weights(t_dist, distance_scales(t_dist), beta, TEMPORAL_KINDS)
    edges = np.vstack([s_pairs, t_pairs]).astype(np.int64)
    kinds = np.r_[np.full(len(w_s), SPATIAL), np.full(len(w_t), TEMPORAL)]
    return CrfGraph(unary, edges, np.r_[w_s, w_t], kinds, node_frame, node_sp, prob)


def energy(graph: CrfGraph, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    e = graph.unary[np.arange(graph.n), labels].sum()
    if len(graph.edges):
        dis = labels[graph.edges[:, 0]] != labels[graph.edges[:, 1]]
        e += graph.weights[dis].sum()
    return float(e)


def infer_labels(graph: CrfGraph) -> np.ndarray:
    """Exact minimum-energy labelling (1 = foreground) by s-t min-cut.

    Source side is foreground.  Where several labellings reach the minimum
    the cut keeps the maximal source set, so ties resolve to foreground.
    """
    if np.any(graph.weights < 0):
        raise ValueError("negative pairwise weight: energy is not submodular")
    g = maxflow.Graph[float](graph.n, len(graph.edges))
    nodes = g.add_nodes(graph.n)
    # node on the source (fg) side cuts its sink edge, so the sink capacity is cost(fg)
    for i in range(graph.n):
        g.add_tedge(nodes[i], float(graph.unary[i, BG]), float(graph.unary[i, FG]))
    for (a, b), w in zip(graph.edges, graph.weights):
        g.add_edge(int(a), int(b), float(w), float(w))
    g.maxflow()
    seg = np.array([g.get_segment(i) for i in range(graph.n)])
    return (seg == 0).astype(np.int64)


def icm(graph: CrfGraph, init=None, max_sweeps: int = 50) -> np.ndarray:
    """Iterated conditional modes; a local minimizer kept for debugging."""
    labels = np.argmin(graph.unary, axis=1) if init is None else np.array(init, dtype=np.int64)
    nbrs = [[] for _ in range(graph.n)]
    for (a, b), w in zip(graph.edges, graph.weights):
        nbrs[a].append((b, w))
        nbrs[b].append((a, w))
    for _ in range(max_sweeps):
        changed = False
        for i in range(graph.n):
            cost = graph.unary[i].copy()
            for j, w in nbrs[i]:
                cost[1 - labels[j]] += w
            best = int(np.argmin(cost))
            if cost[best] < cost[labels[i]]:
                labels[i] = best
                changed = True
        if not changed:
            break
    return labels


def segment_to_box(fg, smap):
    """Largest connected foreground component of one frame.

    ``fg`` is a boolean per superpixel.  Components are linked through
    superpixel adjacency; the largest by superpixel count wins (then by
    pixel count, then lowest id).  Returns (box, sorted member ids), or
    (None, []) when nothing is foreground.
    """
    fg = np.asarray(fg, dtype=bool)
    ids = np.flatnonzero(fg)
    if len(ids) == 0:
        return None, []
    nbrs = {int(i): [] for i in ids}
    for a, b in smap.adjacency:
        if fg[a] and fg[b]:
            nbrs[a].append(b)
            nbrs[b].append(a)
    seen, comps = set(), []
    for i in ids:
        i = int(i)
        if i in seen:
            continue
        stack, comp = [i], []
        seen.add(i)
        while stack:
            x = stack.pop()
            comp.append(x)
            for y in nbrs[x]:
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        comps.append(sorted(comp))
    best = max(comps, key=lambda c: (len(c), int(smap.sizes[c].sum()), -c[0]))
    return mask_box(np.isin(smap.labels, best)), best


def soft_box_overlap(box, smap, prob) -> float:
    """Soft IoU between a box and a per-superpixel foreground probability map:
    foreground mass inside the box over (box area + foreground mass outside)."""
    if box is None:
        return 0.0
    p = np.asarray(prob, float)[smap.labels]
    h, w = smap.shape
    x, y, bw, bh = box
    r0, r1 = int(max(0, np.floor(y))), int(min(h, np.ceil(y + bh)))
    c0, c1 = int(max(0, np.floor(x))), int(min(w, np.ceil(x + bw)))
    inside = p[r0:r1, c0:c1].sum()
    area = max(0, r1 - r0) * max(0, c1 - c0)
    denom = area + (p.sum() - inside)
    return float(inside / denom) if denom > 0 else 0.0


def propagate_box(box, flow, shape):
    """Shift a box by the median flow inside it."""
    if box is None:
        return None
    u = flow.u if hasattr(flow, "u") else flow[0]
    v = flow.v if hasattr(flow, "v") else flow[1]
    x, y, w, h = box
    r0, r1 = int(max(0, y)), int(min(shape[0], y + h))
    c0, c1 = int(max(0, x)), int(min(shape[1], x + w))
    if r1 <= r0 or c1 <= c0:
        return box
    du = float(np.median(u[r0:r1, c0:c1]))
    dv = float(np.median(v[r0:r1, c0:c1]))
    return clip_box((x + du, y + dv, w, h), shape)


@dataclass
class LocalizationState:
    frame_index: int
    boxes: deque  # tube over the last delta+1 frames, oldest first
    posterior: float
    transition_cov: tuple
    segment: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    candidate_posteriors: list = field(default_factory=list)

    @property
    def box(self):
        return self.boxes[-1] if self.boxes else None


def transition_logpdf(box, prev_box, cov) -> float:
    d = box_state(box) - box_state(prev_box)
    cov = np.asarray(cov, float)
    return float(-0.5 * np.sum(d * d / cov) - 0.5 * np.sum(np.log(2 * np.pi * cov)))


def map_update(prev: LocalizationState | None, candidates, p_s, p_p, frame_index: int,
               delta: int = 5, cov=(36.0, 36.0, 36.0, 36.0), segment=None, flags=None,
               use_prior: bool = True) -> LocalizationState:
    """MAP choice of the new box over a discrete candidate set.

    posterior(c) is proportional to p_s(c) * p_p(c) * N(c; previous box, cov)
    and is normalized over the candidates.  Ties go to the candidate whose
    centre is closest to the previous box.  With ``use_prior`` False the
    transition term is dropped (the tube still grows from ``prev``).
    """
    if not candidates:
        raise ValueError("empty candidate set")
    p_s = np.asarray(p_s, float)
    p_p = np.asarray(p_p, float)
    if use_prior and prev is not None and prev.box is not None:
        trans = np.array([np.exp(transition_logpdf(c, prev.box, cov)) for c in candidates])
        log_trans = np.array([transition_logpdf(c, prev.box, cov) for c in candidates])
    else:
        trans = np.ones(len(candidates))
        log_trans = np.zeros(len(candidates))
    joint = p_s * p_p * trans
    z = joint.sum()
    if z > 0 and np.isfinite(z):
        post = joint / z
    else:
        with np.errstate(divide="ignore"):
            lj = np.log(p_s) + np.log(p_p) + log_trans
        if not np.any(np.isfinite(lj)):
            post = np.full(len(candidates), 1.0 / len(candidates))
        else:
            lj = lj - lj[np.isfinite(lj)].max()
            post = np.exp(lj)
            post /= post.sum()
    best = np.flatnonzero(post == post.max())
    if len(best) > 1 and prev is not None and prev.box is not None:
        pc = box_center(prev.box)
        best = sorted(best, key=lambda i: (np.linalg.norm(box_center(candidates[i]) - pc), i))
    i = int(best[0])
    tube = deque(prev.boxes if prev is not None else [], maxlen=delta + 1)
    tube.append(tuple(float(x) for x in candidates[i]))
    return LocalizationState(frame_index, tube, float(post[i]), tuple(cov),
                             list(segment or []), list(flags or []), post.tolist())

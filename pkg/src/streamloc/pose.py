"""Pose hypotheses, joint trajectory splines and batch pose refinement."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_smoothing_spline

log = logging.getLogger(__name__)

TERMS = ("raw", "app", "loc", "sc")


@dataclass
class Pose:
    joints: np.ndarray  # (J, 2) pixel coordinates (x, y)
    occluded: np.ndarray  # (J,) bool
    score: float = 0.0  # detector score, higher is better
    frame_index: int = 0
    body_config: str = "full"
    virtual: bool = False

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 2)
        if self.occluded is None:
            self.occluded = np.zeros(len(self.joints), bool)
        self.occluded = np.asarray(self.occluded, dtype=bool)

    @property
    def raw_cost(self) -> float:
        return -float(self.score)

    @property
    def visible(self) -> np.ndarray:
        return ~self.occluded

    def bbox(self, margin: float = 0.0, shape=None):
        """Tight (x, y, w, h) box over visible joints, inclusive of pixels."""
        vis = self.joints[self.visible]
        if len(vis) == 0:
            return None
        x0 = np.floor(vis[:, 0].min() - margin)
        y0 = np.floor(vis[:, 1].min() - margin)
        x1 = np.ceil(vis[:, 0].max() + margin)
        y1 = np.ceil(vis[:, 1].max() + margin)
        if shape is not None:
            h, w = shape
            x0, y0 = max(0.0, x0), max(0.0, y0)
            x1, y1 = min(w - 1.0, x1), min(h - 1.0, y1)
        return (float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1))


# -- splines ----------------------------------------------------------------

@dataclass
class _Curve:
    """Per-coordinate callables mapping normalized time to a 2-D point."""
    parts: tuple

    def __call__(self, u):
        u = np.atleast_1d(np.asarray(u, float))
        return np.column_stack([f(u) for f in self.parts])


class _Line:
    def __init__(self, coef):
        self.coef = coef

    def __call__(self, u):
        return self.coef[0] + self.coef[1] * u


def fit_smoothing_spline(u, pts, lam):
    """Cubic smoothing spline through 2-D points, per coordinate.

    Minimizes the squared residual plus ``lam`` times the integrated
    squared second derivative.  Linear trends are free, so a steady
    motion is reproduced exactly while isolated outliers are not chased.
    With fewer than five samples the least-squares line is used (the
    large-``lam`` limit); two samples are interpolated.
    """
    u = np.asarray(u, float)
    pts = np.asarray(pts, float).reshape(len(u), 2)
    if len(u) >= 5:
        return _Curve(tuple(make_smoothing_spline(u, pts[:, d], lam=lam) for d in range(2)))
    A = np.column_stack([np.ones_like(u), u])
    coef, *_ = np.linalg.lstsq(A, pts, rcond=None)
    return _Curve(tuple(_Line(coef[:, d]) for d in range(2)))


@dataclass
class JointSplines:
    t0: int
    t1: int
    curves: list  # per joint: _Curve, or None when the joint was never seen
    constant: list = field(default_factory=list)  # per joint: fallback point or None
    degenerate: list = field(default_factory=list)
    _memo: dict = field(default_factory=dict, repr=False, compare=False)

    def _u(self, t):
        span = max(1, self.t1 - self.t0)
        return (np.asarray(t, float) - self.t0) / span

    def __call__(self, j: int, t) -> np.ndarray:
        if self.curves[j] is not None:
            return self.curves[j](self._u(t))[0] if np.ndim(t) == 0 else self.curves[j](self._u(t))
        if self.constant[j] is not None:
            c = np.asarray(self.constant[j], float)
            return c if np.ndim(t) == 0 else np.tile(c, (len(t), 1))
        return np.full(2, np.nan) if np.ndim(t) == 0 else np.full((len(t), 2), np.nan)

    @property
    def J(self) -> int:
        return len(self.curves)

    def evaluate(self, t) -> np.ndarray:
        """(J, 2) predicted joint positions at frame ``t`` (NaN if unknown)."""
        key = ("at", float(t))
        if key not in self._memo:
            self._memo[key] = np.array([self(j, t) for j in range(self.J)])
        return self._memo[key].copy()

    def envelope(self):
        """Vertical extent (y_min, y_max) of all joint splines over the window."""
        if "env" not in self._memo:
            ts = np.arange(self.t0, self.t1 + 1)
            ys = np.concatenate([np.atleast_2d(self(j, ts))[:, 1] for j in range(self.J)])
            ys = ys[np.isfinite(ys)]
            self._memo["env"] = None if len(ys) == 0 else (float(ys.min()), float(ys.max()))
        return self._memo["env"]


def fit_joint_splines(poses, frames, lam: float = 0.5, t0=None, t1=None) -> JointSplines:
    """Fit one spline per joint to the selected poses of a window.

    ``poses[i]`` is the pose selected at ``frames[i]`` (or None).  Occluded
    joints are left out; a joint seen in fewer than two frames becomes a
    constant at its last seen location and is flagged degenerate.
    """
    frames = list(frames)
    t0 = frames[0] if t0 is None else t0
    t1 = frames[-1] if t1 is None else t1
    present = [p for p in poses if p is not None]
    if not present:
        raise ValueError("no poses to fit")
    J = len(present[0].joints)
    span = max(1, t1 - t0)
    curves, consts, degen = [], [], []
    for j in range(J):
        ts, pts = [], []
        for t, p in zip(frames, poses):
            if p is not None and not p.occluded[j]:
                ts.append(t)
                pts.append(p.joints[j])
        if len(ts) >= 2:
            curves.append(fit_smoothing_spline((np.asarray(ts, float) - t0) / span, pts, lam))
            consts.append(None)
            degen.append(False)
        else:
            curves.append(None)
            consts.append(np.asarray(pts[-1]) if pts else None)
            degen.append(True)
    return JointSplines(t0, t1, curves, consts, degen)


# -- smoothness costs -------------------------------------------------------

def _enclosing_scores(pose, smap, scores):
    h, w = smap.shape
    j = pose.joints
    if np.any((j[:, 0] < 0) | (j[:, 0] > w - 1) | (j[:, 1] < 0) | (j[:, 1] > h - 1)):
        log.warning("joint outside frame %s clamped", pose.frame_index)
    r = np.clip(np.rint(j[:, 1]).astype(int), 0, h - 1)
    c = np.clip(np.rint(j[:, 0]).astype(int), 0, w - 1)
    return scores[smap.labels[r, c]]


def appearance_smoothness(pose, prev_pose, smap, prev_map, model=None, scores=None, prev_scores=None) -> float:
    """Sum over joints of the change in foreground score of the enclosing superpixel."""
    if prev_pose is None:
        return 0.0
    if scores is None:
        scores = model.scores(smap.color_hist, smap.mean_flow)
    if prev_scores is None:
        prev_scores = model.scores(prev_map.color_hist, prev_map.mean_flow)
    a = _enclosing_scores(pose, smap, scores)
    b = _enclosing_scores(prev_pose, prev_map, prev_scores)
    both = pose.visible & prev_pose.visible
    return float(np.abs(a - b)[both].sum())


def location_smoothness(pose, splines: JointSplines, t=None) -> float:
    t = pose.frame_index if t is None else t
    pred = splines.evaluate(t)
    ok = pose.visible & np.all(np.isfinite(pred), axis=1)
    return float(np.linalg.norm(pred[ok] - pose.joints[ok], axis=1).sum())


def scale_smoothness(pose, splines: JointSplines) -> float:
    env = splines.envelope()
    vis = pose.joints[pose.visible]
    if env is None or len(vis) == 0:
        return 0.0
    return abs((env[1] - env[0]) - (vis[:, 1].max() - vis[:, 1].min()))


def minmax(col) -> np.ndarray:
    col = np.asarray(col, float)
    lo, hi = col.min(), col.max()
    if hi - lo <= 0:
        return np.zeros_like(col)
    return (col - lo) / (hi - lo)


def candidate_terms(cands, prev_pose, splines, t, smap=None, prev_map=None,
                    scores=None, prev_scores=None) -> np.ndarray:
    """Unnormalized (raw, app, loc, sc) terms of every candidate, shape (n, 4)."""
    out = np.zeros((len(cands), 4))
    for i, p in enumerate(cands):
        out[i, 0] = p.raw_cost
        if smap is not None and prev_map is not None and scores is not None:
            out[i, 1] = appearance_smoothness(p, prev_pose, smap, prev_map, scores=scores,
                                              prev_scores=prev_scores)
        out[i, 2] = location_smoothness(p, splines, t)
        out[i, 3] = scale_smoothness(p, splines)
    return out


def combined_cost(terms: np.ndarray) -> np.ndarray:
    """H_pose of every candidate of one frame.

    Each term is min-max normalized over the frame's candidates before the
    four are summed, so detector units and pixel units mix on equal
    footing.  A frame with one candidate gets all terms 0.
    """
    terms = np.atleast_2d(terms)
    return sum(minmax(terms[:, k]) for k in range(terms.shape[1]))


def pose_likelihood(h_pose: float, alpha: float = -1.0) -> float:
    return float(np.exp(alpha * h_pose))


# -- refinement ---------------------------------------------------------------

@dataclass
class RefineResult:
    selection: list  # candidate index per frame, None where synthesized
    poses: list
    h_pose: list  # H_pose of each selected pose
    objective: list  # window objective after init and after each accepted iteration
    splines: JointSplines | None
    iterations: int = 0


@dataclass
class _Window:
    candidates: list
    frames: list
    lam: float
    maps: list | None
    scores: list | None
    _memo: dict = field(default_factory=dict)

    def context(self, k):
        if self.maps is None or self.scores is None:
            return None, None, None, None
        if k == 0:
            # the frame before the window is not held; no appearance term
            return self.maps[0], None, self.scores[0], None
        return self.maps[k], self.maps[k - 1], self.scores[k], self.scores[k - 1]

    def prev_pose(self, sel, k):
        if k == 0:
            return None
        i = sel[k - 1]
        return None if i is None else self.candidates[k - 1][i]

    def frame_costs(self, k, sel, splines):
        cands = self.candidates[k]
        smap, pmap, sc, psc = self.context(k)
        terms = candidate_terms(cands, self.prev_pose(sel, k), splines, self.frames[k],
                                smap, pmap, sc, psc)
        return combined_cost(terms)

    def splines_for(self, sel):
        poses = [None if i is None else c[i] for c, i in zip(self.candidates, sel)]
        return fit_joint_splines(poses, self.frames, self.lam)

    def objective(self, sel):
        key = tuple(sel)
        if key not in self._memo:
            self._memo[key] = self._objective(sel)
        return self._memo[key]

    def _objective(self, sel):
        splines = self.splines_for(sel)
        total, hs = 0.0, []
        for k, i in enumerate(sel):
            if i is None:
                hs.append(0.0)
                continue
            h = self.frame_costs(k, sel, splines)[i]
            hs.append(float(h))
            total += h
        return float(total), hs, splines


def _best_flip(win, sel, obj):
    """Best single-frame change of the selection under the refitted objective."""
    best = None
    for k, c in enumerate(win.candidates):
        for i in range(len(c)):
            if i == sel[k]:
                continue
            trial = list(sel)
            trial[k] = i
            t_obj, t_hs, t_spl = win.objective(trial)
            if t_obj < obj and (best is None or t_obj < best[1]):
                best = (trial, t_obj, t_hs, t_spl)
    return best


def refine_poses(candidates, frames, Q: int = 3, maps=None, scores=None,
                 lam: float = 0.5) -> RefineResult:
    """Select one pose per frame of a window by iterated greedy descent.

    Starts from the raw-cost argmin of every frame.  Each iteration fits
    joint splines to the current selection, sweeps the frames forward and
    re-selects per frame the candidate of least H_pose (ties go to the
    lower index).  The sweep is kept only if it lowers the window objective
    (sum of H_pose with splines refitted to the selection); otherwise the
    best single-frame change under that objective is taken, and the loop
    stops once neither improves.  The objective never increases.
    """
    frames = list(frames)
    if len(candidates) != len(frames):
        raise ValueError("one candidate list per frame required")
    win = _Window(candidates, frames, lam, maps, scores)
    sel = [int(np.argmin([p.raw_cost for p in c])) if c else None for c in candidates]
    if all(i is None for i in sel):
        raise ValueError("no pose candidates in the whole window")
    obj, hs, splines = win.objective(sel)
    history = [obj]
    it = 0
    for it in range(1, Q + 1):
        proposal = list(sel)
        for k, c in enumerate(candidates):
            if c:
                proposal[k] = int(np.argmin(win.frame_costs(k, proposal, splines)))
        step = None
        if proposal != sel:
            cand_obj, cand_hs, cand_spl = win.objective(proposal)
            if cand_obj < obj:
                step = (proposal, cand_obj, cand_hs, cand_spl)
        if step is None:
            step = _best_flip(win, sel, obj)
        if step is None:
            break
        sel, obj, hs, splines = step
        history.append(obj)
    poses = []
    for k, (c, i) in enumerate(zip(candidates, sel)):
        if i is not None:
            poses.append(c[i])
            continue
        pred = splines.evaluate(frames[k])
        occ = ~np.all(np.isfinite(pred), axis=1)
        pred[occ] = 0.0
        poses.append(Pose(pred, occ, score=0.0, frame_index=frames[k], virtual=True))
        log.info("frame %d: no pose candidates, using spline prediction", frames[k])
    return RefineResult(sel, poses, hs, history, splines, it)


def exhaustive_refine(candidates, frames, maps=None, scores=None, lam: float = 0.5):
    """Minimum of the window objective over every candidate combination."""
    win = _Window(candidates, frames, lam, maps, scores)
    best, best_sel = np.inf, None
    for sel in itertools.product(*[range(len(c)) for c in candidates]):
        obj, _, _ = win.objective(list(sel))
        if obj < best:
            best, best_sel = obj, list(sel)
    return best, best_sel


def window_objective(candidates, frames, sel, maps=None, scores=None, lam: float = 0.5) -> float:
    return _Window(candidates, frames, lam, maps, scores).objective(list(sel))[0]


def associate_tracks(candidates_per_frame, n_actors: int):
    """Split per-frame candidates into actor tracks by nearest-box linking.

    Frame 1 seeds ``n_actors`` tracks with its best-scoring poses; every
    later candidate joins the track whose last seed box centre is nearest.
    Returns one list of per-frame candidate lists per actor.
    """
    def center(p):
        b = p.bbox()
        return np.array([b[0] + b[2] / 2, b[1] + b[3] / 2]) if b else np.zeros(2)

    tracks = [[] for _ in range(n_actors)]
    anchors = [None] * n_actors
    for cands in candidates_per_frame:
        buckets = [[] for _ in range(n_actors)]
        if any(a is None for a in anchors):
            order = sorted(range(len(cands)), key=lambda i: cands[i].raw_cost)
            for a, i in zip(range(n_actors), order):
                anchors[a] = center(cands[i])
        for p in cands:
            d = [np.linalg.norm(center(p) - a) if a is not None else np.inf for a in anchors]
            buckets[int(np.argmin(d))].append(p)
        for a in range(n_actors):
            if buckets[a]:
                best = min(buckets[a], key=lambda p: p.raw_cost)
                anchors[a] = center(best)
            tracks[a].append(buckets[a])
    return tracks

"""Discriminative foreground/background appearance model over superpixels.

Superpixels of the trailing window are clustered on their colour
histograms; each cluster keeps its centre and radius, the mean and variance
of member flow vectors, and the add-one smoothed ratio of foreground to
background members.  A superpixel's foreground score combines its colour
similarity to the nearest cluster (scaled by that ratio) with its flow
similarity to the same cluster.
"""
from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

log = logging.getLogger(__name__)

RADIUS_FLOOR = 1e-6


@dataclass
class FrameSample:
    """Labelled superpixel features of one frame, as kept in the window."""
    color: np.ndarray  # (n, 512)
    flow: np.ndarray  # (n, 2) mean flow vectors
    is_fg: np.ndarray  # (n,) bool


@dataclass
class AppearanceModel:
    centers: np.ndarray  # q_k
    radii: np.ndarray  # r_k
    flow_means: np.ndarray  # mu_k
    flow_vars: np.ndarray  # rho_k
    zeta: np.ndarray
    delta: int = 5
    seed: int = 0
    rho_floor: float = 0.25
    window: deque = field(default_factory=deque)
    k_target: int = 20  # requested K; the fitted K may be lower on sparse data

    @property
    def K(self) -> int:
        return len(self.centers)

    def assign(self, color: np.ndarray) -> np.ndarray:
        d = ((np.atleast_2d(color)[:, None, :] - self.centers[None]) ** 2).sum(-1)
        return np.argmin(d, axis=1)

    def scores(self, color: np.ndarray, flow: np.ndarray) -> np.ndarray:
        """Vectorized foreground score of many superpixels."""
        color = np.atleast_2d(color)
        flow = np.atleast_2d(flow)
        k = self.assign(color)
        dc = np.linalg.norm(color - self.centers[k], axis=1)
        df = np.linalg.norm(flow - self.flow_means[k], axis=1)
        return np.exp(-dc / self.radii[k]) * self.zeta[k] + np.exp(-df / self.flow_vars[k])

    def dump(self) -> dict:
        return {"K": self.K, "delta": self.delta, "radii": self.radii.tolist(),
                "flow_means": self.flow_means.tolist(), "flow_vars": self.flow_vars.tolist(),
                "zeta": self.zeta.tolist(), "window_frames": len(self.window)}


def sample_from_map(smap, fg_mask) -> FrameSample:
    fg_mask = np.asarray(fg_mask, dtype=bool)
    return FrameSample(np.asarray(smap.color_hist), np.asarray(smap.mean_flow), fg_mask)


def sample_from_superpixels(fg, bg) -> FrameSample:
    sps = list(fg) + list(bg)
    color = np.array([s.color_hist for s in sps], dtype=np.float64).reshape(len(sps), -1)
    flow = np.array([s.mean_flow for s in sps], dtype=np.float64).reshape(len(sps), 2)
    is_fg = np.r_[np.ones(len(fg), bool), np.zeros(len(bg), bool)]
    return FrameSample(color, flow, is_fg)


def _n_distinct(x) -> int:
    x = np.ascontiguousarray(x)
    rows = x.view(np.dtype((np.void, x.dtype.itemsize * x.shape[1]))).ravel()
    return len(np.unique(rows))


def _cluster(x, k, seed, init=None):
    n_distinct = _n_distinct(x)
    if k > n_distinct:
        log.warning("only %d distinct points for %d clusters; reducing K", n_distinct, k)
        k = n_distinct
    if init is not None and len(init) != k:
        init = None
    km = KMeans(n_clusters=k, init="k-means++" if init is None else init,
                n_init=1, tol=0.0, max_iter=300, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km.fit(x)
    return km.cluster_centers_, km.labels_


def _statistics(sample: FrameSample, centers, labels, rho_floor):
    k = len(centers)
    radii = np.full(k, RADIUS_FLOOR)
    fmeans = np.zeros((k, 2))
    fvars = np.full(k, rho_floor)
    zeta = np.ones(k)
    for j in range(k):
        mem = labels == j
        if not mem.any():
            continue
        radii[j] = max(RADIUS_FLOOR, float(np.linalg.norm(sample.color[mem] - centers[j], axis=1).mean()))
        fmeans[j] = sample.flow[mem].mean(axis=0)
        fvars[j] = max(rho_floor, float(((sample.flow[mem] - fmeans[j]) ** 2).sum(axis=1).mean()))
        nfg = int(sample.is_fg[mem].sum())
        zeta[j] = (nfg + 1) / (int(mem.sum()) - nfg + 1)
    return radii, fmeans, fvars, zeta


def concat_samples(samples) -> FrameSample:
    return FrameSample(np.concatenate([s.color for s in samples]),
                       np.concatenate([s.flow for s in samples]),
                       np.concatenate([s.is_fg for s in samples]))


def fit_sample(sample: FrameSample, K: int = 20, delta: int = 5, seed: int = 0,
               rho_floor: float = 0.25, init=None) -> AppearanceModel:
    n = len(sample.is_fg)
    if n == 0:
        raise ValueError("cannot fit an appearance model on zero superpixels")
    if K < 1:
        raise ValueError("K must be >= 1")
    k_target = K
    if n < K:
        log.warning("%d superpixels for K=%d clusters; reducing K", n, K)
        K = n
    centers, labels = _cluster(sample.color, K, seed, init)
    radii, fm, fv, zeta = _statistics(sample, centers, labels, rho_floor)
    return AppearanceModel(centers, radii, fm, fv, zeta, delta=delta, seed=seed,
                           rho_floor=rho_floor, k_target=k_target)


def fit(fg, bg=None, K: int = 20, delta: int = 5, seed: int = 0, rho_floor: float = 0.25) -> AppearanceModel:
    """Fit a fresh model on foreground and background superpixels.

    ``fg``/``bg`` are lists of ``Superpixel`` records, or a single
    ``FrameSample`` may be passed as ``fg`` with ``bg=None``.
    """
    sample = fg if isinstance(fg, FrameSample) else sample_from_superpixels(fg, bg)
    model = fit_sample(sample, K, delta, seed, rho_floor)
    model.window = deque([sample], maxlen=max(1, delta))
    return model


def foreground_score(model: AppearanceModel, s) -> float:
    return float(model.scores(np.asarray(s.color_hist)[None], np.asarray(s.mean_flow)[None])[0])


def update(model: AppearanceModel, fg, bg=None, K: int | None = None) -> AppearanceModel:
    """Push the newest frame's labelled superpixels and refit on the window.

    Frames older than ``delta`` are evicted first, so nothing outside the
    window influences the new statistics.  Clustering warm-starts from the
    previous centres.
    """
    sample = fg if isinstance(fg, FrameSample) else sample_from_superpixels(fg, bg)
    window = deque(model.window, maxlen=max(1, model.delta))
    window.append(sample)
    data = concat_samples(window)
    k = K or model.k_target
    n_distinct = _n_distinct(data.color)
    init = model.centers if len(model.centers) == min(k, n_distinct, len(data.is_fg)) else None
    new = fit_sample(data, k, model.delta, model.seed, model.rho_floor, init=init)
    return replace(new, window=window)

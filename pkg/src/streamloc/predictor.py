"""Online class confidences from localized tubes.

Two predictors share one bag-of-words encoding:

* DP-SVM: one binary SVM per (class, segment index) and a stay-or-advance
  dynamic programme over the streamed segment scores.
* S-SVM: one weight vector per class trained by n-slack cutting planes with
  margin re-scaling and a temporal loss that favours later segments.

Both append a constant 1 to every input so the bias is learned (and
regularized) as an ordinary weight.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from cvxopt import matrix, solvers
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .geometry import centroid_inside

log = logging.getLogger(__name__)

MODEL_FORMAT = "streamloc-model/1"
COLOR_GROUPS = 32
NEG = -1


# -- descriptors and codebook -------------------------------------------------

def superpixel_descriptors(smap) -> np.ndarray:
    """Per-superpixel raw descriptor: flow histogram, mean flow magnitude and
    the colour histogram pooled into 32 groups of consecutive bins."""
    col = np.asarray(smap.color_hist)
    pooled = col.reshape(len(col), COLOR_GROUPS, -1).sum(axis=2)
    return np.hstack([smap.flow_hist, smap.mean_flow_mag[:, None], pooled])


@dataclass
class Codebook:
    centers: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if len(self.centers) < 2:
            raise ValueError("codebook needs at least 2 centres")

    @property
    def V(self) -> int:
        return len(self.centers)

    def quantize(self, desc) -> np.ndarray:
        desc = np.atleast_2d(np.asarray(desc, dtype=np.float64))
        if desc.size == 0:
            return np.zeros(0, dtype=np.int64)
        d = ((desc[:, None, :] - self.centers[None]) ** 2).sum(-1)
        return np.argmin(d, axis=1)

    def histogram(self, desc) -> np.ndarray:
        """Raw counts per word."""
        return np.bincount(self.quantize(desc), minlength=self.V).astype(np.float64)


def build_codebook(descriptors, V: int = 64, seed: int = 0) -> Codebook:
    x = np.asarray(descriptors, dtype=np.float64)
    uniq = np.unique(x, axis=0)
    if len(uniq) < 2:
        raise ValueError("need at least 2 distinct descriptors for a codebook")
    if V > len(uniq):
        log.warning("only %d distinct descriptors; codebook reduced from %d", len(uniq), V)
        V = len(uniq)
    km = KMeans(n_clusters=V, n_init=1, random_state=seed, tol=0.0, max_iter=300)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km.fit(x)
    return Codebook(np.unique(km.cluster_centers_, axis=0))


@dataclass
class SegmentFeature:
    histogram: np.ndarray
    m: int = 1
    video_id: str = ""
    empty: bool = False
    counts: np.ndarray = None  # raw word counts before normalization


def l1(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    s = h.sum()
    return h / s if s > 0 else np.zeros_like(h)


def tube_descriptors(frames, boxes):
    """Descriptors of superpixels whose centroid lies in that frame's box.

    ``frames`` holds (descriptors, centroids) pairs aligned with ``boxes``.
    """
    out = [np.asarray(d)[centroid_inside(c, b)] for (d, c), b in zip(frames, boxes) if b is not None]
    out = [d for d in out if len(d)]
    return np.vstack(out) if out else np.zeros((0, 0))


def encode_segment(frames, boxes, codebook: Codebook, m: int = 1, video_id: str = "") -> SegmentFeature:
    desc = tube_descriptors(frames, boxes)
    counts = codebook.histogram(desc) if len(desc) else np.zeros(codebook.V)
    empty = counts.sum() == 0
    return SegmentFeature(l1(counts), m, video_id, bool(empty), counts)


def augment(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.hstack([x, np.ones((len(x), 1))])


# -- binary SVM (dual coordinate descent) -------------------------------------

def kernel_matrix(a, b, kind: str) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if kind == "linear":
        return a @ b.T
    if kind == "histogram_intersection":
        return np.minimum(a[:, None, :], b[None, :, :]).sum(-1)
    raise ValueError(f"unknown kernel {kind!r}")


@dataclass
class BinarySVM:
    support: np.ndarray  # training inputs
    coef: np.ndarray  # alpha_i * y_i
    kernel: str = "linear"

    @property
    def bias(self) -> float:
        return float(self.coef.sum())

    @property
    def w(self) -> np.ndarray:
        if self.kernel != "linear":
            raise ValueError("explicit weights exist only for the linear kernel")
        return self.coef @ self.support

    def decision(self, x) -> np.ndarray:
        return (kernel_matrix(x, self.support, self.kernel) + 1.0) @ self.coef


def train_binary_svm(x, y, C: float = 1.0, kernel: str = "linear", tol: float = 1e-6,
                     max_sweeps: int = 100000) -> BinarySVM:
    """Soft-margin SVM ``min 1/2(|w|^2 + b^2) + C sum xi`` via its dual.

    Cyclic coordinate descent on the box-constrained dual until every
    projected gradient is below ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise ValueError("labels must be -1/+1")
    Q = (kernel_matrix(x, x, kernel) + 1.0) * np.outer(y, y)
    n = len(y)
    a = np.zeros(n)
    g = -np.ones(n)  # gradient Q a - 1
    for _ in range(max_sweeps):
        worst = 0.0
        for i in range(n):
            gi = g[i]
            pg = min(gi, 0.0) if a[i] <= 0 else (max(gi, 0.0) if a[i] >= C else gi)
            worst = max(worst, abs(pg))
            if pg != 0.0 and Q[i, i] > 0:
                new = min(max(a[i] - gi / Q[i, i], 0.0), C)
                d = new - a[i]
                if d != 0.0:
                    a[i] = new
                    g += d * Q[:, i]
        if worst < tol:
            break
    else:
        log.warning("SVM dual did not reach tolerance %g", tol)
    return BinarySVM(x.copy(), a * y, kernel)


def svm_primal(svm: BinarySVM, x, y, C: float) -> float:
    """Primal objective with the bias treated as a regularized weight."""
    K = kernel_matrix(svm.support, svm.support, svm.kernel) + 1.0
    reg = 0.5 * svm.coef @ K @ svm.coef
    hinge = np.maximum(0.0, 1.0 - np.asarray(y) * svm.decision(x))
    return float(reg + C * hinge.sum())


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


# -- DP over segment scores ---------------------------------------------------

def dp_step(F: np.ndarray, scores) -> np.ndarray:
    """One interval of the stay-or-advance recursion.

    ``F`` has entries for z = 0..M with F[0] the not-yet-started state;
    ``scores[z-1]`` is the sigmoid score of segment model z on the new
    interval.  F'(z) = max(F(z), F(z-1)) * s_z.
    """
    s = np.asarray(scores, dtype=np.float64)
    new = np.zeros_like(F)
    new[1:] = np.maximum(F[1:], F[:-1]) * s
    return new


def dp_init(M: int) -> np.ndarray:
    F = np.zeros(M + 1)
    F[0] = 1.0
    return F


def dp_confidence(score_matrix) -> np.ndarray:
    """Confidence after each interval for a (T, M) matrix of segment scores."""
    S = np.atleast_2d(np.asarray(score_matrix, dtype=np.float64))
    F = dp_init(S.shape[1])
    out = []
    for row in S:
        F = dp_step(F, row)
        out.append(F[1:].max())
    return np.array(out)


@dataclass
class DPState:
    """Streaming DP table for one class with the untrimmed-stream reset."""
    M: int
    floor: float = 0.01
    patience: int = 3
    F: np.ndarray = None
    low_run: int = 0

    def __post_init__(self):
        if self.F is None:
            self.F = dp_init(self.M)

    def push(self, scores) -> float:
        self.F = dp_step(self.F, scores)
        conf = float(self.F[1:].max())
        self.low_run = self.low_run + 1 if conf < self.floor else 0
        if self.low_run >= self.patience:
            self.F = dp_init(self.M)
            self.low_run = 0
        return conf


@dataclass
class DPSVMBank:
    classes: list
    M: int
    models: dict  # class -> list of M BinarySVM
    kernel: str = "histogram_intersection"

    def segment_scores(self, c, x) -> np.ndarray:
        return np.array([sigmoid(m.decision(x[None])[0]) for m in self.models[c]])


def train_dp_svm(x, seg, labels, classes, M: int, C: float = 1.0,
                 kernel: str = "histogram_intersection", tol: float = 1e-6) -> DPSVMBank:
    """Per class and per segment index, a binary SVM separating that class's
    m-th segments from every other class's m-th segments."""
    x = np.asarray(x, dtype=np.float64)
    seg = np.asarray(seg)
    labels = np.asarray(labels)
    models = {}
    for c in classes:
        models[c] = []
        for m in range(1, M + 1):
            sel = seg == m
            pos = sel & (labels == c)
            neg = sel & (labels != c)
            if not pos.any() or not neg.any():
                raise ValueError(f"class {c!r} segment {m}: need a positive and a negative example")
            y = np.where(labels[sel] == c, 1.0, -1.0)
            models[c].append(train_binary_svm(x[sel], y, C, kernel, tol))
    return DPSVMBank(list(classes), M, models, kernel)


# -- structural SVM -----------------------------------------------------------

def label_set(M: int) -> list:
    return [NEG] + list(range(1, M + 1))


def loss_delta(y_true: int, y: int, M: int, eps: float = 0.5) -> float:
    if y_true > 0 and y > 0:
        return float(abs(y_true - y))
    if y_true > 0 and y == NEG:
        return float(M + eps)
    return float(eps)


def psi(x, y: int, M: int, variant: str = "sign") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if y == NEG:
        return -x
    return x * (y / M) if variant == "scaled" else x.copy()


def ssvm_primal(w, X, Y, M, C, eps, variant="sign") -> float:
    """Full objective: every alternative label's constraint enters the slacks."""
    X = augment(X)
    total = 0.5 * float(w @ w)
    for x, yi in zip(X, Y):
        base = w @ psi(x, yi, M, variant)
        h = max(loss_delta(yi, y, M, eps) + w @ psi(x, y, M, variant) - base
                for y in label_set(M) if y != yi)
        total += C * max(0.0, h)
    return float(total)


@dataclass
class SSVMResult:
    w: np.ndarray  # includes the bias as its last entry
    objective: float  # full objective at w
    lower_bounds: list  # restricted-problem optimum after each round
    upper_bounds: list  # full objective at each round's iterate
    best_upper: list  # running minimum of upper_bounds
    working_set: list  # per sample, list of labels
    rounds: int
    converged: bool
    first_round_set: list = field(default_factory=list)


def _solve_working_set(A, delta, groups, n, C):
    """Dual of the restricted problem; returns w and the dual variables."""
    m = len(delta)
    P = A @ A.T
    G = np.vstack([-np.eye(m), np.zeros((n, m))])
    for k, i in enumerate(groups):
        G[m + i, k] = 1.0
    h = np.r_[np.zeros(m), np.full(n, float(C))]
    opts = solvers.options.copy()
    solvers.options.update({"show_progress": False, "abstol": 1e-12, "reltol": 1e-12, "feastol": 1e-12,
                            "maxiters": 200})
    try:
        sol = solvers.qp(matrix(P + 1e-12 * np.eye(m)), matrix(-np.asarray(delta, float)),
                         matrix(G), matrix(h))
    finally:
        solvers.options.clear()
        solvers.options.update(opts)
    alpha = np.maximum(np.array(sol["x"]).ravel(), 0.0)
    return A.T @ alpha, alpha


def train_ssvm(X, Y, M: int, C: float = 1.0, eps: float = 0.5, tol: float = 1e-4,
               max_rounds: int = 100, variant: str = "sign") -> SSVMResult:
    """n-slack cutting-plane training with margin re-scaling.

    ``Y`` holds segment labels 1..M for positives and -1 for negatives.
    """
    Xa = augment(X)
    Y = [int(y) for y in Y]
    n, d = Xa.shape
    if not any(y > 0 for y in Y) or NEG not in Y:
        raise ValueError("need at least one positive and one negative example")
    labels = label_set(M)
    w = np.zeros(d)
    ws = [[] for _ in range(n)]
    rows, deltas, groups = [], [], []
    lower, upper, best = [], [], []
    best_w, best_obj = w.copy(), np.inf
    first = []
    converged = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        added = 0
        for i in range(n):
            x, yi = Xa[i], Y[i]
            base = w @ psi(x, yi, M, variant)
            hs = [loss_delta(yi, y, M, eps) + w @ psi(x, y, M, variant) - base if y != yi else -np.inf
                  for y in labels]
            k = int(np.argmax(hs))  # first maximum: -1 before positives, lower labels first
            ystar = labels[k]
            xi = max([0.0] + [deltas[j] - rows[j] @ w for j in range(len(rows)) if groups[j] == i])
            if hs[k] > xi + tol and ystar not in ws[i]:
                ws[i].append(ystar)
                rows.append(psi(x, yi, M, variant) - psi(x, ystar, M, variant))
                deltas.append(loss_delta(yi, ystar, M, eps))
                groups.append(i)
                added += 1
        if rounds == 1:
            first = [list(s) for s in ws]
        if added == 0:
            converged = True
            break
        w, _ = _solve_working_set(np.array(rows), np.array(deltas), groups, n, C)
        slack = np.zeros(n)
        for r, dl, g in zip(rows, deltas, groups):
            slack[g] = max(slack[g], dl - r @ w)
        lower.append(0.5 * float(w @ w) + C * float(slack.sum()))
        obj = ssvm_primal(w, X, Y, M, C, eps, variant)
        upper.append(obj)
        if obj < best_obj:
            best_obj, best_w = obj, w.copy()
        best.append(best_obj)
    if not converged:
        warnings.warn(f"cutting plane stopped after {max_rounds} rounds without convergence")
    if not upper:  # nothing was ever violated: w = 0 is optimal
        best_obj = ssvm_primal(w, X, Y, M, C, eps, variant)
        best_w = w
    return SSVMResult(best_w, float(best_obj), lower, upper, best, ws, rounds, converged, first)


def ssvm_confidence(w, x, M: int = 1, variant: str = "sign"):
    """(label, score) from the argmax over all labels; ties favour -1, then
    the lowest positive label."""
    xa = augment(x)[0]
    best_y, best_s = NEG, float(w @ psi(xa, NEG, M, variant))
    for y in range(1, M + 1):
        s = float(w @ psi(xa, y, M, variant))
        if s > best_s:
            best_y, best_s = y, s
    return best_y, best_s


def class_score(w, x) -> float:
    """Per-class ranking confidence <w, x> (bias included)."""
    return float(w @ augment(x)[0])


# -- classifier bank and model files ------------------------------------------

@dataclass
class ClassifierBank:
    mode: str
    classes: list
    M: int
    omega: int
    C: float
    epsilon: float
    codebook: Codebook
    kernel: str = "histogram_intersection"
    psi_variant: str = "sign"
    dp: DPSVMBank | None = None
    ssvm: dict = field(default_factory=dict)  # class -> weight vector

    def __post_init__(self):
        if self.M < 1 or self.omega < 1 or self.epsilon <= 0:
            raise ValueError("need M >= 1, omega >= 1 and epsilon > 0")


def save_bank(bank: ClassifierBank, path) -> None:
    d = {"format": MODEL_FORMAT, "mode": bank.mode, "classes": bank.classes, "M": bank.M,
         "omega": bank.omega, "C": bank.C, "epsilon": bank.epsilon, "kernel": bank.kernel,
         "psi_variant": bank.psi_variant, "codebook": bank.codebook.centers.tolist()}
    if bank.dp is not None:
        d["dp_svm"] = {c: [{"support": m.support.tolist(), "coef": m.coef.tolist()} for m in ms]
                       for c, ms in bank.dp.models.items()}
    if bank.ssvm:
        d["s_svm"] = {c: np.asarray(w).tolist() for c, w in bank.ssvm.items()}
    Path(path).write_text(json.dumps(d, indent=1))


def load_bank(path) -> ClassifierBank:
    d = json.loads(Path(path).read_text())
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a model file")
    dp = None
    if "dp_svm" in d:
        models = {c: [BinarySVM(np.array(m["support"]), np.array(m["coef"]), d["kernel"]) for m in ms]
                  for c, ms in d["dp_svm"].items()}
        dp = DPSVMBank(d["classes"], d["M"], models, d["kernel"])
    ssvm = {c: np.array(w) for c, w in d.get("s_svm", {}).items()}
    return ClassifierBank(d["mode"], d["classes"], d["M"], d["omega"], d["C"], d["epsilon"],
                          Codebook(np.array(d["codebook"])), d["kernel"], d["psi_variant"], dp, ssvm)


class OnlinePredictor:
    """Per-stream confidence state; fed one interval histogram at a time."""

    def __init__(self, bank: ClassifierBank, mode: str | None = None, floor=0.01, patience=3):
        self.bank = bank
        self.mode = mode or bank.mode
        self.dp_states = {c: DPState(bank.M, floor, patience) for c in bank.classes}
        self.cumulative = np.zeros(bank.codebook.V)
        self.last = [0.0] * len(bank.classes)

    def push(self, counts) -> list:
        counts = np.asarray(counts, dtype=np.float64)
        self.cumulative += counts
        if self.mode == "dp_svm":
            x = l1(counts)
            self.last = [self.dp_states[c].push(self.bank.dp.segment_scores(c, x)) for c in self.bank.classes]
        else:
            x = l1(self.cumulative)
            self.last = [class_score(self.bank.ssvm[c], x) for c in self.bank.classes]
        return list(self.last)

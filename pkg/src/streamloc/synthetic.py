"""Synthetic scenes with exact flow and ground truth, used as test oracles.

An actor is a coloured, lightly textured rectangle translating over a
static smooth background.  Flow is the exact integer displacement of the
actor pixels.  Pose hypotheses are the true joints (fixed points on the
rectangle) plus Gaussian noise, mixed with displaced distractor poses that
score lower on average.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .media import FlowField, GroundTruth, PoseHypothesisFile, Sequence, VideoStream, write_sequence
from .pose import Pose

# (fx, fy) joint anchors on the actor rectangle: head, neck, hands, pelvis, knee, feet
JOINT_TEMPLATE = np.array([
    (0.5, 0.0), (0.5, 0.2), (0.0, 0.45), (1.0, 0.45),
    (0.5, 0.6), (0.25, 0.8), (0.0, 1.0), (1.0, 1.0)])

CLASS_PRESETS = {
    "rightward": {"velocity": (2, 1), "color": (0.95, 0.2, 0.15)},
    "leftward": {"velocity": (-2, 1), "color": (0.15, 0.3, 0.95)},
}


@dataclass
class SceneSpec:
    height: int = 72
    width: int = 96
    frames: int = 30
    actor_size: tuple = (16, 28)  # w, h
    start: tuple | None = None  # top-left; None picks one that keeps the actor inside
    velocity: tuple = (2, 1)  # integer px / frame
    color: tuple = (0.95, 0.2, 0.15)
    contrast: float = 0.5
    texture: float = 0.12
    pose_noise: float = 2.0
    distractors: int = 2
    score_noise: float = 0.25
    score_gap: float = 0.3
    class_label: str = "rightward"
    video_id: str = "scene"

    @classmethod
    def for_class(cls, label: str, **kw) -> "SceneSpec":
        p = CLASS_PRESETS[label]
        return cls(velocity=p["velocity"], color=p["color"], class_label=label, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def _background(rng, h, w, texture):
    base = rng.normal(size=(h, w, 3))
    smooth = np.stack([gaussian_filter(base[..., c], 3.0) for c in range(3)], axis=-1)
    smooth /= np.abs(smooth).max() + 1e-12
    return np.clip(0.5 + texture * smooth, 0, 1)


def _positions(spec: SceneSpec, rng):
    aw, ah = spec.actor_size
    vx, vy = spec.velocity
    n = spec.frames
    if spec.start is not None:
        x0, y0 = spec.start
    else:
        span_x = (spec.width - aw) - abs(vx) * (n - 1)
        span_y = (spec.height - ah) - abs(vy) * (n - 1)
        if span_x < 0 or span_y < 0:
            raise ValueError("actor cannot stay inside the frame for the whole scene")
        x0 = int(rng.integers(0, span_x + 1)) + (abs(vx) * (n - 1) if vx < 0 else 0)
        y0 = int(rng.integers(0, span_y + 1)) + (abs(vy) * (n - 1) if vy < 0 else 0)
    t = np.arange(n)
    return np.column_stack([x0 + vx * t, y0 + vy * t]).astype(int)


def true_joints(box) -> np.ndarray:
    x, y, w, h = box
    return np.column_stack([x + JOINT_TEMPLATE[:, 0] * (w - 1), y + JOINT_TEMPLATE[:, 1] * (h - 1)])


def _pose(joints, score, t, shape):
    h, w = shape
    occ = (joints[:, 0] < 0) | (joints[:, 0] > w - 1) | (joints[:, 1] < 0) | (joints[:, 1] > h - 1)
    joints = np.column_stack([np.clip(joints[:, 0], 0, w - 1), np.clip(joints[:, 1], 0, h - 1)])
    return Pose(joints, occ, float(score), t)


def synthesize_scene(spec: SceneSpec, seed: int = 0) -> Sequence:
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    aw, ah = spec.actor_size
    bg = _background(rng, h, w, spec.texture)
    color = 0.5 + spec.contrast * (np.asarray(spec.color) - 0.5)
    patch = np.clip(color + 0.5 * spec.texture * rng.uniform(-1, 1, size=(ah, aw, 3)), 0, 1)
    pos = _positions(spec, rng)
    frames, flows, boxes, poses = [], [], {}, {}
    for k, (x, y) in enumerate(pos):
        t = k + 1
        img = bg.copy()
        img[y:y + ah, x:x + aw] = patch
        frames.append(np.round(img * 255).astype(np.uint8))
        box = (float(x), float(y), float(aw), float(ah))
        boxes[t] = [box]
        tj = true_joints(box)
        cands = [_pose(tj + rng.normal(0, spec.pose_noise, tj.shape) if spec.pose_noise > 0 else tj,
                       rng.normal(0, spec.score_noise), t, (h, w))]
        for _ in range(spec.distractors):
            for _attempt in range(20):  # keep at least half of the joints in view
                ang = rng.uniform(0, 2 * np.pi)
                mag = rng.uniform(0.5, 1.5) * np.array([aw, ah])
                dj = tj + mag * np.array([np.cos(ang), np.sin(ang)])
                inside = (dj[:, 0] >= 0) & (dj[:, 0] <= w - 1) & (dj[:, 1] >= 0) & (dj[:, 1] <= h - 1)
                if inside.mean() >= 0.5:
                    break
            if spec.pose_noise > 0:
                dj = dj + rng.normal(0, spec.pose_noise, tj.shape)
            cands.append(_pose(dj, rng.normal(-spec.score_gap, spec.score_noise), t, (h, w)))
        order = rng.permutation(len(cands))
        poses[t] = [cands[i] for i in order]
    for k in range(len(pos) - 1):
        u = np.zeros((h, w))
        v = np.zeros((h, w))
        x, y = pos[k]
        d = pos[k + 1] - pos[k]
        u[y:y + ah, x:x + aw] = d[0]
        v[y:y + ah, x:x + aw] = d[1]
        flows.append(FlowField(u, v, k + 1))
    gt = GroundTruth(spec.video_id, spec.class_label, 1, spec.frames, boxes)
    stream = VideoStream(spec.video_id, frames)
    return Sequence(stream, flows, PoseHypothesisFile(len(JOINT_TEMPLATE), poses), gt,
                    {"synthetic": spec.to_dict(), "seed": seed})


def write_scene(directory, spec: SceneSpec, seed: int = 0):
    return write_sequence(directory, synthesize_scene(spec, seed))


def batch_specs(n: int, classes=("rightward", "leftward"), prefix: str = "scene", **kw) -> list:
    """Alternating-class scene specs with distinct video ids."""
    return [SceneSpec.for_class(classes[i % len(classes)], video_id=f"{prefix}{i:03d}", **kw) for i in range(n)]


# -- accumulating bag-of-words streams -------------------------------------------

@dataclass
class AccumulatingStreams:
    """Histograms whose class-specific mass grows linearly with the observed
    fraction, over a fixed non-discriminative context."""
    V: int = 16
    context: float = 60.0  # counts present from the first frame
    action: float = 60.0  # class counts accumulated by the end of the action
    noise: float = 0.1
    seed: int = 0
    patterns: dict = field(default_factory=dict)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.background = rng.dirichlet(np.ones(self.V))
        half = self.V // 2
        pos = np.zeros(self.V)
        pos[:half] = rng.dirichlet(np.ones(half))
        neg = np.zeros(self.V)
        neg[half:] = rng.dirichlet(np.ones(self.V - half))
        self.patterns = {"pos": pos, "neg": neg}

    def histogram(self, kind: str, f: float, rng) -> np.ndarray:
        c = self.context * self.background + f * self.action * self.patterns[kind]
        c = c * np.exp(self.noise * rng.normal(size=self.V))
        return c / c.sum()

    def training_set(self, n_videos: int, M: int, rng=None):
        """Positives labelled by segment (cumulative up to segment m) and
        negatives from the other pattern at random fractions."""
        rng = rng or np.random.default_rng(self.seed + 1)
        X, Y = [], []
        for _ in range(n_videos):
            for m in range(1, M + 1):
                X.append(self.histogram("pos", m / M, rng))
                Y.append(m)
            X.append(self.histogram("neg", rng.uniform(0.2, 1.0), rng))
            Y.append(-1)
        return np.array(X), Y

    def test_streams(self, n: int, steps: int = 10, rng=None):
        rng = rng or np.random.default_rng(self.seed + 2)
        fr = np.linspace(1.0 / steps, 1.0, steps)
        return fr, np.array([[self.histogram("pos", f, rng) for f in fr] for _ in range(n)])


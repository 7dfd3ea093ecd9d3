"""Loading and writing of sequences, pose hypotheses, annotations and tracks.

On-disk layout of one sequence directory::

    manifest.yaml        key-value header + indexed file lists
    frames/000001.png    lossless RGB rasters, 1-based
    flows/000001.jsonl   flow t maps frame t to t+1 (frame_count - 1 files)
    poses.jsonl          one line per frame with that frame's hypotheses
    groundtruth.jsonl    optional; header line then one line per frame

Track files are JSON lines as well: a header naming the class order, then
one record per processed frame, appended as the stream advances.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .pose import Pose

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "streamloc-manifest/1"
TRACK_FORMAT = "streamloc-track/1"
FLOW_CONVENTION = "t->t+1"


@dataclass
class VideoStream:
    id: str
    frames: list  # H x W x 3 uint8 arrays, frames[0] is frame 1
    frame_rate: float = 25.0

    def __post_init__(self):
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise ValueError(f"frames of {self.id} differ in size: {sorted(shapes)}")

    @property
    def shape(self):
        return self.frames[0].shape[:2]

    def __len__(self):
        return len(self.frames)

    def frame(self, t: int) -> np.ndarray:
        return self.frames[t - 1]


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    frame_index: int

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape:
            raise ValueError("u and v differ in shape")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError(f"non-finite flow at index {self.frame_index}")


@dataclass
class PoseHypothesisFile:
    joint_count: int
    frames: dict  # frame index -> list[Pose]

    def candidates(self, t: int) -> list:
        return self.frames.get(t, [])


@dataclass
class GroundTruth:
    video_id: str
    class_label: str
    t_start: int
    t_end: int
    boxes: dict = field(default_factory=dict)  # frame -> list of (x, y, w, h)

    def __post_init__(self):
        if self.t_start > self.t_end:
            raise ValueError("t_start > t_end")

    def box(self, t: int, actor: int = 0):
        b = self.boxes.get(t)
        return tuple(b[actor]) if b and len(b) > actor else None


@dataclass
class Sequence:
    stream: VideoStream
    flows: list  # flows[0] is flow 1 (frame 1 -> 2)
    poses: PoseHypothesisFile
    groundtruth: GroundTruth | None = None
    manifest: dict = field(default_factory=dict)

    def flow(self, t: int) -> FlowField | None:
        return self.flows[t - 1] if 1 <= t <= len(self.flows) else None

    def truncated(self, n: int) -> "Sequence":
        """The sequence as it looks when only frames 1..n have arrived."""
        n = max(0, min(n, len(self.stream)))
        poses = PoseHypothesisFile(self.poses.joint_count,
                                   {t: p for t, p in self.poses.frames.items() if t <= n})
        stream = VideoStream(self.stream.id, self.stream.frames[:n], self.stream.frame_rate)
        return Sequence(stream, self.flows[:max(0, n - 1)], poses, self.groundtruth, dict(self.manifest))


# -- flows ------------------------------------------------------------------

def write_flow(path, flow: FlowField) -> None:
    h, w = flow.u.shape
    with open(path, "w") as fh:
        fh.write(json.dumps({"frame_index": flow.frame_index, "height": h, "width": w}) + "\n")
        for r in range(h):
            fh.write(json.dumps({"u": flow.u[r].tolist(), "v": flow.v[r].tolist()}) + "\n")


def read_flow(path) -> FlowField:
    with open(path) as fh:
        head = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    if len(rows) != head["height"]:
        raise ValueError(f"{path}: expected {head['height']} rows, got {len(rows)}")
    u = np.array([r["u"] for r in rows], dtype=np.float64)
    v = np.array([r["v"] for r in rows], dtype=np.float64)
    if u.shape != (head["height"], head["width"]):
        raise ValueError(f"{path}: bad flow shape {u.shape}")
    return FlowField(u, v, head["frame_index"])


# -- poses ------------------------------------------------------------------

def _pose_to_json(p: Pose) -> dict:
    return {"joints": np.asarray(p.joints).tolist(),
            "occluded": [bool(o) for o in p.occluded],
            "score": float(p.score), "body_config": p.body_config}


def write_poses(path, poses: PoseHypothesisFile, frame_count: int) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"joint_count": poses.joint_count}) + "\n")
        for t in range(1, frame_count + 1):
            fh.write(json.dumps({"frame": t, "poses": [_pose_to_json(p) for p in poses.candidates(t)]}) + "\n")


def read_poses(path, height=None, width=None) -> PoseHypothesisFile:
    with open(path) as fh:
        head = json.loads(fh.readline())
        jc = int(head["joint_count"])
        frames = {}
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            t = int(rec["frame"])
            lst = []
            for d in rec["poses"]:
                joints = np.asarray(d["joints"], dtype=np.float64).reshape(-1, 2)
                occ = np.asarray(d.get("occluded", [False] * len(joints)), dtype=bool)
                if len(joints) != jc:
                    raise ValueError(f"frame {t}: pose with {len(joints)} joints, expected {jc}")
                if height is not None:
                    vis = joints[~occ]
                    bad = (vis[:, 0] < 0) | (vis[:, 0] > width - 1) | (vis[:, 1] < 0) | (vis[:, 1] > height - 1)
                    if bad.any():
                        raise ValueError(f"frame {t}: visible joint outside the frame")
                lst.append(Pose(joints=joints, occluded=occ, score=float(d["score"]),
                                frame_index=t, body_config=d.get("body_config", "full")))
            if not lst:
                log.warning("frame %d has no pose hypotheses", t)
            frames[t] = lst
    return PoseHypothesisFile(jc, frames)


# -- ground truth -----------------------------------------------------------

def write_groundtruth(path, gt: GroundTruth) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"video_id": gt.video_id, "class_label": gt.class_label,
                             "t_start": gt.t_start, "t_end": gt.t_end}) + "\n")
        for t in sorted(gt.boxes):
            fh.write(json.dumps({"frame": t, "boxes": [list(map(float, b)) for b in gt.boxes[t]]}) + "\n")


def read_groundtruth(path, height=None, width=None) -> GroundTruth:
    with open(path) as fh:
        head = json.loads(fh.readline())
        boxes = {}
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                bl = [tuple(float(x) for x in b) for b in rec["boxes"]]
                if height is not None:
                    for x, y, w, h in bl:
                        if x < 0 or y < 0 or x + w > width or y + h > height or w <= 0 or h <= 0:
                            raise ValueError(f"frame {rec['frame']}: box outside the frame")
                boxes[int(rec["frame"])] = bl
    return GroundTruth(head["video_id"], head["class_label"], int(head["t_start"]),
                       int(head["t_end"]), boxes)


# -- sequences --------------------------------------------------------------

def write_sequence(directory, seq: Sequence) -> Path:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    (d / "flows").mkdir(exist_ok=True)
    n = len(seq.stream)
    h, w = seq.stream.shape
    frames, flows = {}, {}
    for t in range(1, n + 1):
        rel = f"frames/{t:06d}.png"
        Image.fromarray(np.asarray(seq.stream.frame(t), dtype=np.uint8)).save(d / rel)
        frames[t] = rel
    for f in seq.flows:
        rel = f"flows/{f.frame_index:06d}.jsonl"
        write_flow(d / rel, f)
        flows[f.frame_index] = rel
    write_poses(d / "poses.jsonl", seq.poses, n)
    manifest = {
        "format": MANIFEST_FORMAT, "video_id": seq.stream.id,
        "height": h, "width": w, "frame_count": n,
        "frame_rate": float(seq.stream.frame_rate),
        "flow_convention": FLOW_CONVENTION, "joint_count": seq.poses.joint_count,
        "frames": frames, "flows": flows, "poses": "poses.jsonl",
    }
    if seq.groundtruth is not None:
        write_groundtruth(d / "groundtruth.jsonl", seq.groundtruth)
        manifest["groundtruth"] = "groundtruth.jsonl"
    (d / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
    return d / "manifest.yaml"


def read_manifest(path) -> tuple[dict, Path]:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.yaml"
    if not p.exists():
        raise FileNotFoundError(f"no manifest at {p}")
    m = yaml.safe_load(p.read_text())
    for key in ("height", "width", "frame_count", "joint_count", "frames", "poses"):
        if key not in m:
            raise ValueError(f"manifest {p} lacks {key!r}")
    if m.get("flow_convention", FLOW_CONVENTION) != FLOW_CONVENTION:
        raise ValueError(f"unsupported flow convention {m['flow_convention']!r}")
    return m, p.parent


def _check_contiguous(indexed: dict, count: int, what: str):
    keys = {int(k) for k in indexed}
    for t in range(1, count + 1):
        if t not in keys:
            raise ValueError(f"manifest is missing {what} {t}")
    extra = sorted(k for k in keys if k < 1 or k > count)
    if extra:
        raise ValueError(f"manifest lists {what} outside 1..{count}: {extra}")


def load_sequence(path, max_frames: int | None = None) -> Sequence:
    """Load a sequence directory (or manifest path) and validate it.

    ``max_frames`` truncates the stream to its first frames, as if the
    remaining input had not arrived yet.
    """
    m, root = read_manifest(path)
    h, w, n = int(m["height"]), int(m["width"]), int(m["frame_count"])
    frames_idx = {int(k): v for k, v in m["frames"].items()}
    flows_idx = {int(k): v for k, v in (m.get("flows") or {}).items()}
    _check_contiguous(frames_idx, n, "frame")
    _check_contiguous(flows_idx, n - 1, "flow")
    if max_frames is not None:
        n = min(n, max_frames)
    frames = []
    for t in range(1, n + 1):
        img = np.asarray(Image.open(root / frames_idx[t]).convert("RGB"))
        if img.shape[:2] != (h, w):
            raise ValueError(f"frame {t} is {img.shape[:2]}, manifest says {(h, w)}")
        frames.append(img)
    flows = []
    for t in range(1, n):
        f = read_flow(root / flows_idx[t])
        if f.u.shape != (h, w):
            raise ValueError(f"flow {t} is {f.u.shape}, manifest says {(h, w)}")
        if f.frame_index != t:
            raise ValueError(f"flow file {flows_idx[t]} carries index {f.frame_index}, expected {t}")
        flows.append(f)
    poses = read_poses(root / m["poses"], h, w)
    if poses.joint_count != int(m["joint_count"]):
        raise ValueError("pose file joint count disagrees with manifest")
    poses.frames = {t: p for t, p in poses.frames.items() if t <= n}
    for t in range(1, n + 1):
        if t not in poses.frames:
            log.warning("frame %d has no pose hypotheses", t)
            poses.frames[t] = []
    gt = None
    if m.get("groundtruth"):
        gt = read_groundtruth(root / m["groundtruth"], h, w)
    stream = VideoStream(str(m.get("video_id", root.name)), frames, float(m.get("frame_rate", 25.0)))
    return Sequence(stream, flows, poses, gt, m)


# -- tracks -----------------------------------------------------------------

@dataclass
class TrackRecord:
    frame: int
    box: tuple | None
    segment: list
    confidences: list
    flags: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"frame": self.frame,
                "box": None if self.box is None else [float(x) for x in self.box],
                "segment": [int(s) for s in self.segment],
                "confidences": [float(c) for c in self.confidences],
                "flags": list(self.flags)}

    @classmethod
    def from_json(cls, d: dict) -> "TrackRecord":
        box = None if d["box"] is None else tuple(d["box"])
        return cls(int(d["frame"]), box, list(d["segment"]), list(d["confidences"]), list(d.get("flags", [])))


class TrackWriter:
    """Append-only, one-record-per-frame writer.

    Records are flushed as soon as they are written, so an interrupted run
    leaves a valid prefix.  Frames must strictly increase: a frame that has
    been emitted can never be written again.
    """

    def __init__(self, path, classes, video_id="", extra_header=None):
        self.path = Path(path)
        self.classes = list(classes)
        self.last_frame = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")
        head = {"format": TRACK_FORMAT, "video_id": video_id, "classes": self.classes}
        head.update(extra_header or {})
        self._fh.write(json.dumps(head) + "\n")
        self._fh.flush()

    def write(self, rec: TrackRecord) -> None:
        if rec.frame <= self.last_frame:
            raise ValueError(f"frame {rec.frame} already emitted (last emitted {self.last_frame})")
        if len(rec.confidences) != len(self.classes):
            raise ValueError("confidence vector length differs from class count")
        self._fh.write(json.dumps(rec.to_json()) + "\n")
        self._fh.flush()
        self.last_frame = rec.frame

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class Track:
    header: dict
    records: list

    @property
    def classes(self):
        return self.header["classes"]

    @property
    def video_id(self):
        return self.header.get("video_id", "")


def write_track(states, confidences, path, classes, video_id="", extra_header=None) -> None:
    """Write a finished state history in one go.

    ``states`` are objects exposing ``frame_index``, ``box``, ``segment``
    and ``flags`` (see ``crf.LocalizationState``).
    """
    if len(states) != len(confidences):
        raise ValueError("need one confidence vector per state")
    with TrackWriter(path, classes, video_id, extra_header) as w:
        for st, conf in zip(states, confidences):
            w.write(TrackRecord(st.frame_index, st.box, list(st.segment), list(conf), list(st.flags)))


def load_track(path) -> Track:
    with open(path) as fh:
        head = json.loads(fh.readline())
        if head.get("format") != TRACK_FORMAT:
            raise ValueError(f"{path} is not a track file")
        recs = []
        for line in fh:
            if not line.strip():
                continue
            try:
                recs.append(TrackRecord.from_json(json.loads(line)))
            except json.JSONDecodeError:
                break  # torn final line of an interrupted run
    return Track(head, recs)

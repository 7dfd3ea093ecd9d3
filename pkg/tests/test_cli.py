import json

import pytest
import yaml

from streamloc.cli import main
from streamloc.media import TrackRecord, TrackWriter, load_track, read_groundtruth, read_manifest


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.yaml"
    spec.write_text(yaml.safe_dump({"count": 4, "frames": 9, "classes": ["rightward", "leftward"]}))
    assert main(["synthesize", "--spec", str(spec), "--out", str(root / "data"), "--seed", "3"]) == 0
    cfg = root / "config.yaml"
    cfg.write_text(yaml.safe_dump({"target_count": 80, "K": 8, "V": 16}))
    assert main(["train", "--data", str(root / "data"), "--config", str(cfg), "--out", str(root / "models")]) == 0
    return root


def test_synthesize_writes_labels(workspace):
    labels = yaml.safe_load((workspace / "data" / "labels.yaml").read_text())
    assert labels == {"scene000": "rightward", "scene001": "leftward", "scene002": "rightward",
                      "scene003": "leftward"}
    assert (workspace / "models" / "model.json").exists()


def test_localize_with_frame_limit(workspace):
    out = workspace / "short.jsonl"
    rc = main(["localize", "--data", str(workspace / "data" / "scene000"), "--models", str(workspace / "models"),
               "--config", str(workspace / "models" / "config.yaml"), "--out", str(out), "--max-frames", "5"])
    assert rc == 0
    tr = load_track(out)
    assert [r.frame for r in tr.records] == [1, 2, 3, 4, 5]
    assert len(out.read_text().splitlines()) == 6  # header + records


def test_evaluate_perfect_tracks(workspace, tmp_path):
    tracks = tmp_path / "tracks"
    tracks.mkdir()
    for vid in ("scene000", "scene001", "scene002", "scene003"):
        m, base = read_manifest(workspace / "data" / vid)
        gt = read_groundtruth(base / m["groundtruth"], m["height"], m["width"])
        conf = [1.0, 0.0] if gt.class_label == "leftward" else [0.0, 1.0]
        with TrackWriter(tracks / f"{vid}.jsonl", ["leftward", "rightward"], vid) as w:
            for t in range(gt.t_start, gt.t_end + 1):
                w.write(TrackRecord(t, gt.box(t), [], conf, []))
    rc = main(["evaluate", "--tracks", str(tracks / "*.jsonl"), "--gt", str(workspace / "data"),
               "--out", str(tmp_path / "eval")])
    assert rc == 0
    summary = json.loads((tmp_path / "eval" / "summary.json").read_text())
    assert summary["auc"] == 1.0
    assert summary["mean_tube_iou"] == 1.0


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["localize", "--data", "x", "--out", "y", "--bogus"]) == 2


def test_module_errors_exit_1(tmp_path, capsys):
    assert main(["localize", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "t.jsonl")]) == 1
    assert "streamloc localize" in capsys.readouterr().err
    assert main(["evaluate", "--tracks", str(tmp_path / "*.jsonl"), "--gt", str(tmp_path),
                 "--out", str(tmp_path)]) == 1


def test_demo_accept_subset_is_deterministic(capsys):
    assert main(["demo-accept", "--criteria", "2,7,9"]) == 0
    first = capsys.readouterr().out
    assert main(["demo-accept", "--criteria", "2,7,9"]) == 0
    second = capsys.readouterr().out
    strip = lambda s: [line.rsplit("(", 1)[0] for line in s.splitlines()]  # noqa: E731 - drop timings
    assert strip(first) == strip(second)
    assert "3/3 criteria passed" in first

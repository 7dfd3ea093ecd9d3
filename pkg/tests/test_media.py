import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from streamloc.media import (FlowField, GroundTruth, Track, TrackRecord, TrackWriter, VideoStream,
                             load_sequence, load_track, write_sequence, write_track)
from streamloc.synthetic import SceneSpec, synthesize_scene


def _same_sequence(a, b):
    assert a.stream.id == b.stream.id
    assert len(a.stream) == len(b.stream)
    for fa, fb in zip(a.stream.frames, b.stream.frames):
        assert np.array_equal(fa, fb)
    assert len(a.flows) == len(b.flows)
    for x, y in zip(a.flows, b.flows):
        assert x.frame_index == y.frame_index
        assert np.array_equal(x.u, y.u) and np.array_equal(x.v, y.v)
    assert a.poses.joint_count == b.poses.joint_count
    for t in range(1, len(a.stream) + 1):
        pa, pb = a.poses.candidates(t), b.poses.candidates(t)
        assert len(pa) == len(pb)
        for p, q in zip(pa, pb):
            assert np.array_equal(p.joints, q.joints)
            assert np.array_equal(p.occluded, q.occluded)
            assert p.score == q.score and p.frame_index == q.frame_index
    ga, gb = a.groundtruth, b.groundtruth
    assert (ga.video_id, ga.class_label, ga.t_start, ga.t_end) == (gb.video_id, gb.class_label, gb.t_start, gb.t_end)
    assert {t: [tuple(x) for x in v] for t, v in ga.boxes.items()} == {t: [tuple(x) for x in v] for t, v in gb.boxes.items()}


def test_generated_scene_round_trips(tmp_path, small_scene):
    write_sequence(tmp_path / "s", small_scene)
    _same_sequence(small_scene, load_sequence(tmp_path / "s"))


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000), noise=st.floats(0, 5), distractors=st.integers(0, 3))
def test_round_trip_on_arbitrary_scenes(tmp_path_factory, seed, noise, distractors):
    seq = synthesize_scene(SceneSpec(frames=4, height=40, width=48, actor_size=(8, 12),
                                     pose_noise=noise, distractors=distractors), seed=seed)
    d = tmp_path_factory.mktemp("rt")
    write_sequence(d, seq)
    _same_sequence(seq, load_sequence(d))


def _blank_sequence(n, h=6, w=8):
    from streamloc.media import PoseHypothesisFile, Sequence
    frames = [np.full((h, w, 3), t, np.uint8) for t in range(n)]
    flows = [FlowField(np.zeros((h, w)), np.zeros((h, w)), t) for t in range(1, n)]
    return Sequence(VideoStream("blank", frames), flows, PoseHypothesisFile(2, {}))


def test_forty_frames_have_flows_one_to_thirtynine(tmp_path):
    write_sequence(tmp_path, _blank_sequence(40))
    seq = load_sequence(tmp_path)
    assert len(seq.stream) == 40
    assert [f.frame_index for f in seq.flows] == list(range(1, 40))
    assert seq.flow(39).frame_index == 39 and seq.flow(40) is None
    assert seq.groundtruth is None
    assert all(seq.poses.candidates(t) == [] for t in range(1, 41))


def test_missing_frame_is_named(tmp_path):
    write_sequence(tmp_path, _blank_sequence(9))
    m = yaml.safe_load((tmp_path / "manifest.yaml").read_text())
    del m["frames"][7]
    (tmp_path / "manifest.yaml").write_text(yaml.safe_dump(m))
    with pytest.raises(ValueError, match="frame 7"):
        load_sequence(tmp_path)


def test_dimension_mismatch_is_an_error(tmp_path):
    write_sequence(tmp_path, _blank_sequence(3))
    m = yaml.safe_load((tmp_path / "manifest.yaml").read_text())
    m["width"] = 9
    (tmp_path / "manifest.yaml").write_text(yaml.safe_dump(m))
    with pytest.raises(ValueError):
        load_sequence(tmp_path)


def test_unequal_frames_rejected():
    with pytest.raises(ValueError):
        VideoStream("x", [np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5, 3), np.uint8)])


def test_nonfinite_flow_rejected():
    with pytest.raises(ValueError):
        FlowField(np.array([[np.nan]]), np.zeros((1, 1)), 1)


def test_ground_truth_extent_checked():
    with pytest.raises(ValueError):
        GroundTruth("v", "a", 5, 4)


def test_max_frames_truncates(tmp_path, small_scene):
    write_sequence(tmp_path, small_scene)
    seq = load_sequence(tmp_path, max_frames=4)
    assert len(seq.stream) == 4 and len(seq.flows) == 3
    assert max(seq.poses.frames) == 4


def test_truncated_matches_loaded_prefix(tmp_path, small_scene):
    write_sequence(tmp_path, small_scene)
    _same_sequence(small_scene.truncated(6), load_sequence(tmp_path, max_frames=6))


# -- tracks ----------------------------------------------------------------------------

def _records(n, k, rng):
    return [TrackRecord(t, tuple(float(v) for v in rng.integers(0, 50, 4)), sorted(rng.choice(30, 5, replace=False).tolist()),
                        rng.normal(size=k).tolist(), ["confidence_pending"] if t < 3 else []) for t in range(1, n + 1)]


def test_ten_frames_three_classes(tmp_path, rng):
    recs = _records(10, 3, rng)
    with TrackWriter(tmp_path / "t.jsonl", ["a", "b", "c"], "vid") as w:
        for r in recs:
            w.write(r)
    tr = load_track(tmp_path / "t.jsonl")
    assert len(tr.records) == 10
    assert all(len(r.confidences) == 3 for r in tr.records)
    assert tr.classes == ["a", "b", "c"] and tr.video_id == "vid"


def test_track_round_trip(tmp_path, rng):
    recs = _records(12, 4, rng)
    with TrackWriter(tmp_path / "t.jsonl", list("abcd")) as w:
        for r in recs:
            w.write(r)
    assert load_track(tmp_path / "t.jsonl").records == recs


def test_null_box_round_trip(tmp_path):
    rec = TrackRecord(1, None, [], [0.5], ["no_localization"])
    with TrackWriter(tmp_path / "t.jsonl", ["a"]) as w:
        w.write(rec)
    assert load_track(tmp_path / "t.jsonl").records == [rec]


def test_reemission_is_an_error(tmp_path, rng):
    recs = _records(6, 2, rng)
    w = TrackWriter(tmp_path / "t.jsonl", ["a", "b"])
    for r in recs:
        w.write(r)
    with pytest.raises(ValueError):
        w.write(recs[4])
    w.close()
    assert [r.frame for r in load_track(tmp_path / "t.jsonl").records] == list(range(1, 7))


def test_confidence_length_checked(tmp_path):
    with TrackWriter(tmp_path / "t.jsonl", ["a", "b"]) as w, pytest.raises(ValueError):
        w.write(TrackRecord(1, None, [], [1.0], []))


def test_torn_last_line_leaves_valid_prefix(tmp_path, rng):
    recs = _records(5, 2, rng)
    p = tmp_path / "t.jsonl"
    with TrackWriter(p, ["a", "b"]) as w:
        for r in recs:
            w.write(r)
    with open(p, "a") as fh:
        fh.write(json.dumps(TrackRecord(6, None, [], [0, 0], []).to_json())[:10])
    assert load_track(p).records == recs


def test_write_track_from_states(tmp_path):
    from collections import deque

    from streamloc.crf import LocalizationState
    states = [LocalizationState(t, deque([(1.0, 2.0, 3.0, 4.0)]), 1.0, (1, 1, 1, 1), [1, 2]) for t in (1, 2)]
    write_track(states, [[0.1, 0.9], [0.2, 0.8]], tmp_path / "t.jsonl", ["a", "b"])
    tr = load_track(tmp_path / "t.jsonl")
    assert [r.frame for r in tr.records] == [1, 2]
    assert tr.records[1].confidences == [0.2, 0.8]
    with pytest.raises(ValueError):
        write_track(states, [[0.1, 0.9]], tmp_path / "u.jsonl", ["a", "b"])


def test_track_header_is_a_track():
    assert Track({"classes": ["x"], "video_id": "v"}, []).classes == ["x"]

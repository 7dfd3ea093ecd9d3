import numpy as np
import pytest

from streamloc import pipeline
from streamloc.config import PipelineConfig
from streamloc.crf import TEMPORAL
from streamloc.media import load_track
from streamloc.pipeline import interval_bounds, iterate_online, run_online, run_train
from streamloc.predictor import save_bank
from streamloc.synthetic import SceneSpec, synthesize_scene

FAST = dict(target_count=80, K=8, V=16)


@pytest.fixture(scope="module")
def train_set():
    return [synthesize_scene(SceneSpec.for_class(c, frames=12, video_id=f"tr{i}"), seed=50 + i)
            for i, c in enumerate(["rightward", "leftward"] * 2)]


@pytest.fixture(scope="module")
def bank(train_set):
    return run_train(train_set, None, PipelineConfig(**FAST))


def test_noiseless_scene_is_localized():
    seq = synthesize_scene(SceneSpec(pose_noise=0.0, distractors=0), seed=0)
    recs = run_online(seq, PipelineConfig())
    dev = [np.abs(np.subtract(r.box, seq.groundtruth.box(r.frame))).max() if r.box else np.inf for r in recs]
    assert np.mean(np.array(dev) <= 2) >= 0.95


def test_zero_history_has_no_temporal_edges(monkeypatch, small_scene):
    kinds = []
    real = pipeline.build_graph

    def spy(*a, **kw):
        g = real(*a, **kw)
        kinds.append(g.kinds.copy())
        return g
    monkeypatch.setattr(pipeline, "build_graph", spy)
    recs = run_online(small_scene, PipelineConfig(delta=0, **FAST))
    assert len(recs) == len(small_scene.stream)
    assert kinds and all(not np.any(k == TEMPORAL) for k in kinds)


def test_history_is_bounded(small_scene):
    c = PipelineConfig(delta=3, **FAST)
    loc = pipeline.OnlineLocalizer(c, None, small_scene.stream.shape)
    for t in range(1, len(small_scene.stream) + 1):
        loc.step(t, small_scene.stream.frame(t), small_scene.poses.candidates(t), small_scene.flow(t - 1))
        assert len(loc.window) <= c.delta + 1
        assert loc.model.window.maxlen == c.delta
    assert loc.max_history == c.delta + 1


def test_track_files_are_bitwise_identical(tmp_path, small_scene, bank):
    c = PipelineConfig(**FAST)
    run_online(small_scene, c, bank, out=tmp_path / "a.jsonl")
    run_online(small_scene, c, bank, out=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    tr = load_track(tmp_path / "a.jsonl")
    assert len(tr.records) == len(small_scene.stream)
    assert tr.header["classes"] == bank.classes
    assert tr.header["config"] == c.to_dict()


def test_records_are_causal(small_scene, bank):
    c = PipelineConfig(**FAST)
    full = list(iterate_online(small_scene, c, bank))
    for cut in (2, 6):
        part = list(iterate_online(small_scene.truncated(cut), c, bank))
        assert [r.to_json() for r in part] == [r.to_json() for r in full[:cut]]


def test_pending_until_first_interval(small_scene, bank):
    recs = run_online(small_scene, PipelineConfig(**FAST), bank)
    first = bank.omega
    assert all("confidence_pending" in r.flags for r in recs[:first - 1])
    assert all("confidence_pending" not in r.flags for r in recs[first - 1:])
    assert all(len(r.confidences) == len(bank.classes) for r in recs)


def test_interval_bounds():
    assert interval_bounds(30, 3) == [10, 20, 30]
    assert interval_bounds(10, 3)[-1] == 10
    for n in range(3, 40):
        ends = interval_bounds(n, 3)
        lengths = np.diff([0] + ends)
        assert lengths.sum() == n and lengths.max() - lengths.min() <= 1


def test_omega_is_mean_interval_length(train_set, bank):
    assert bank.omega == 4  # 12 frames, 3 intervals
    assert bank.classes == ["leftward", "rightward"]


def test_retrain_gives_identical_model(tmp_path, train_set, bank):
    save_bank(bank, tmp_path / "a.json")
    save_bank(run_train(train_set, None, PipelineConfig(**FAST)), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_training_needs_two_videos_per_class(train_set):
    with pytest.raises(ValueError, match="fewer than 2"):
        run_train(train_set[:3], None, PipelineConfig(**FAST))


def test_config_round_trip(tmp_path):
    c = PipelineConfig(delta=2, beta={"col": 2.0, "hof": 1.0, "mu": 1.0, "mb": 0.5, "edge": 1.0}, mode="dp_svm")
    c.save(tmp_path / "c.yaml")
    assert PipelineConfig.load(tmp_path / "c.yaml") == c


@pytest.mark.parametrize("bad", [{"deltaa": 1}, {"delta": -1}, {"mode": "svm"}, {"K": 0}, {"C": 0}])
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        PipelineConfig.from_dict(bad)

import math

import numpy as np
import pytest
from cvxopt import matrix, solvers
from hypothesis import given, settings
from hypothesis import strategies as st

from streamloc.acceptance import brute_force_dp, full_constraint_qp, random_ssvm_instance
from streamloc.predictor import (NEG, BinarySVM, ClassifierBank, Codebook, DPState, OnlinePredictor, augment,
                                 build_codebook, class_score, dp_confidence, encode_segment, label_set, load_bank,
                                 loss_delta, psi, save_bank, sigmoid, ssvm_confidence, ssvm_primal,
                                 svm_primal, train_binary_svm, train_dp_svm, train_ssvm)


# -- codebook and encoding -----------------------------------------------------------

def test_single_bin_mass():
    cb = Codebook(np.array([[0.0], [1.0], [2.0], [3.0]]))
    desc = np.array([[2.1], [1.9], [2.0]])
    feat = encode_segment([(desc, np.array([[1.0, 1.0]] * 3))], [(0, 0, 5, 5)], cb)
    assert feat.histogram.tolist() == [0, 0, 1, 0]
    assert not feat.empty


def test_empty_tube_flagged():
    cb = Codebook(np.eye(3))
    feat = encode_segment([(np.eye(3), np.array([[50.0, 50.0]] * 3))], [(0, 0, 5, 5)], cb)
    assert feat.empty and not feat.histogram.any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_quantizer_matches_linear_scan(seed):
    rng = np.random.default_rng(seed)
    cb = Codebook(rng.normal(size=(int(rng.integers(2, 9)), 5)))
    desc = rng.normal(size=(30, 5))
    ref = []
    for d in desc:
        best, bi = np.inf, -1
        for i, c in enumerate(cb.centers):
            dist = sum((a - b) ** 2 for a, b in zip(d, c))
            if dist < best:
                best, bi = dist, i
        ref.append(bi)
    assert cb.quantize(desc).tolist() == ref
    h = cb.histogram(desc)
    assert h.sum() == 30


def test_codebook_needs_two_centres():
    with pytest.raises(ValueError):
        Codebook(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        build_codebook(np.zeros((5, 3)), 4)


def test_codebook_reduced_on_few_points(rng):
    cb = build_codebook(np.repeat(rng.normal(size=(3, 2)), 4, axis=0), V=10)
    assert cb.V == 3


# -- binary SVM ----------------------------------------------------------------------

def test_symmetric_separable_pair():
    svm = train_binary_svm(np.array([[1.0], [-1.0]]), np.array([1, -1]), C=1e6, kernel="linear")
    assert svm.w[0] == pytest.approx(1.0, abs=1e-6)
    assert svm.bias == pytest.approx(0.0, abs=1e-6)
    assert np.allclose(svm.decision(np.array([[1.0], [-1.0]])), [1, -1], atol=1e-6)


def test_duplicated_data_same_solution(rng):
    x = rng.normal(size=(8, 3))
    y = np.where(x[:, 0] > 0, 1, -1)
    a = train_binary_svm(x, y, 1.0, "linear")
    b = train_binary_svm(x, y, 1.0, "linear")
    assert np.array_equal(a.coef, b.coef)


def _primal_qp(x, y, C):
    """min 1/2 |(w, b)|^2 + C sum xi  s.t. y_i (w.x_i + b) >= 1 - xi, xi >= 0."""
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    P = np.zeros((d + 1 + n, d + 1 + n))
    P[:d + 1, :d + 1] = np.eye(d + 1)
    P[d + 1:, d + 1:] = 1e-12 * np.eye(n)
    q = np.r_[np.zeros(d + 1), np.full(n, C)]
    G = np.vstack([np.hstack([-y[:, None] * xa, -np.eye(n)]), np.hstack([np.zeros((n, d + 1)), -np.eye(n)])])
    h = np.r_[-np.ones(n), np.zeros(n)]
    old = solvers.options.copy()
    solvers.options.update({"show_progress": False, "abstol": 1e-12, "reltol": 1e-12, "feastol": 1e-12})
    try:
        sol = solvers.qp(matrix(P), matrix(q), matrix(G), matrix(h))
    finally:
        solvers.options.clear()
        solvers.options.update(old)
    z = np.array(sol["x"]).ravel()
    wb, xi = z[:d + 1], np.maximum(z[d + 1:], 0)
    return 0.5 * wb @ wb + C * xi.sum()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), C=st.sampled_from([0.1, 1.0, 10.0]))
def test_svm_objective_matches_qp(seed, C):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(10, 3))
    w = rng.normal(size=3)
    y = np.where(x @ w > 0, 1.0, -1.0)
    if len(set(y)) < 2:
        y[0] = -y[0]
    svm = train_binary_svm(x, y, C, "linear")
    assert svm_primal(svm, x, y, C) == pytest.approx(_primal_qp(x, y, C), abs=1e-4)


def test_histogram_intersection_kernel_separates(rng):
    pos = rng.dirichlet(np.r_[np.full(4, 5.0), np.full(4, 0.5)], size=6)
    neg = rng.dirichlet(np.r_[np.full(4, 0.5), np.full(4, 5.0)], size=6)
    x = np.vstack([pos, neg])
    y = np.r_[np.ones(6), -np.ones(6)]
    svm = train_binary_svm(x, y, 10.0, "histogram_intersection")
    assert np.all(np.sign(svm.decision(x)) == y)
    with pytest.raises(ValueError):
        svm.w


def test_dp_svm_needs_both_signs():
    x = np.eye(4)
    with pytest.raises(ValueError, match="segment 2"):
        train_dp_svm(x, [1, 1, 2, 2], ["a", "b", "a", "a"], ["a", "b"], 2)


def test_dp_svm_bank_shapes(rng):
    x = rng.dirichlet(np.ones(5), size=8)
    bank = train_dp_svm(x, [1, 2] * 4, ["a", "a", "b", "b"] * 2, ["a", "b"], 2)
    s = bank.segment_scores("a", x[0])
    assert s.shape == (2,) and np.all((s > 0) & (s < 1))


# -- DP confidence -------------------------------------------------------------------

def test_sigmoid_at_zero():
    assert sigmoid(0.0) == 0.5


def test_product_chain():
    conf = dp_confidence([[0.8], [0.9]])
    assert conf[-1] == pytest.approx(0.72)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), T=st.integers(1, 6), M=st.integers(1, 4))
def test_dp_matches_alignment_enumeration(seed, T, M):
    S = np.random.default_rng(seed).uniform(size=(T, M))
    got = dp_confidence(S)
    assert np.abs(got - brute_force_dp(S)).max() <= 1e-12
    assert np.all((got >= 0) & (got <= 1))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_dp_monotone_in_scores(seed):
    rng = np.random.default_rng(seed)
    S = rng.uniform(size=(4, 3))
    lower = S.copy()
    i, j = rng.integers(4), rng.integers(3)
    lower[i, j] *= rng.uniform()
    assert np.all(dp_confidence(lower) <= dp_confidence(S) + 1e-15)


def test_dp_state_resets_after_low_run():
    st_ = DPState(2, floor=0.01, patience=3)
    for _ in range(3):
        st_.push([0.005, 0.005])
    assert st_.F.tolist() == [1.0, 0.0, 0.0]
    assert st_.push([0.9, 0.5]) == pytest.approx(0.9)


# -- structural SVM ------------------------------------------------------------------

def test_loss_values():
    assert loss_delta(3, 1, 4) == 2
    assert loss_delta(2, NEG, 4, 0.5) == 4.5
    assert loss_delta(NEG, 2, 4, 0.5) == 0.5
    assert loss_delta(NEG, NEG, 4, 0.5) == 0.5


@settings(max_examples=50)
@given(M=st.integers(1, 6), eps=st.floats(0.01, 3), data=st.data())
def test_loss_properties(M, eps, data):
    yi = data.draw(st.sampled_from(label_set(M)))
    y = data.draw(st.sampled_from(label_set(M)))
    d = loss_delta(yi, y, M, eps)
    if yi > 0 and y == yi:
        assert d == 0
    elif yi > 0 and y > 0:
        assert d >= 1
    elif y != yi:
        assert d >= eps


def test_psi_sign_and_scaled():
    x = np.array([1.0, 2.0])
    assert psi(x, NEG, 3).tolist() == [-1, -2]
    assert psi(x, 2, 3).tolist() == [1, 2]
    assert np.allclose(psi(x, 2, 4, "scaled"), [0.5, 1.0])


def test_separable_sign_consistency():
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    res = train_ssvm(X, [1, NEG], M=2, C=1e3, eps=0.5)
    assert class_score(res.w, X[0]) > 0 > class_score(res.w, X[1])
    assert res.converged


def test_first_round_holds_most_violated():
    rng = np.random.default_rng(5)
    X, Y, M = random_ssvm_instance(rng)
    res = train_ssvm(X, Y, M, C=1.0, eps=0.5)
    for i, yi in enumerate(Y):
        hs = [loss_delta(yi, y, M, 0.5) if y != yi else -np.inf for y in label_set(M)]
        assert res.first_round_set[i] == [label_set(M)[int(np.argmax(hs))]]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), C=st.sampled_from([0.1, 1.0, 10.0]))
def test_ssvm_matches_full_constraint_qp(seed, C):
    X, Y, M = random_ssvm_instance(np.random.default_rng(seed))
    res = train_ssvm(X, Y, M, C, 0.5, tol=1e-8, max_rounds=200)
    ref, _ = full_constraint_qp(X, Y, M, C, 0.5)
    assert res.objective == pytest.approx(ref, abs=1e-4)
    assert res.objective == pytest.approx(ssvm_primal(res.w, X, Y, M, C, 0.5), abs=1e-12)
    assert all(b <= a + 1e-12 for a, b in zip(res.best_upper, res.best_upper[1:]))
    assert all(b >= a - 1e-7 for a, b in zip(res.lower_bounds, res.lower_bounds[1:]))
    assert all(lo <= up + 1e-7 for lo, up in zip(res.lower_bounds, res.upper_bounds))


def test_round_limit_warns():
    rng = np.random.default_rng(2)
    X, Y, M = random_ssvm_instance(rng)
    with pytest.warns(UserWarning):
        res = train_ssvm(X, Y, 3, C=10.0, eps=0.5, max_rounds=1)
    assert not res.converged and res.rounds == 1


def test_ssvm_needs_both_signs():
    with pytest.raises(ValueError):
        train_ssvm(np.eye(2), [1, 2], 2)


def test_confidence_aligned():
    x = np.array([0.3, 0.4])
    w = augment(x)[0]
    y, s = ssvm_confidence(w, x, M=2)
    assert y == 1 and s == pytest.approx(float(augment(x)[0] @ augment(x)[0]))


def test_confidence_tie_goes_negative():
    assert ssvm_confidence(np.zeros(3), np.array([1.0, 2.0]), M=3) == (NEG, 0.0)


@settings(max_examples=50)
@given(seed=st.integers(0, 2 ** 31), M=st.integers(1, 4), variant=st.sampled_from(["sign", "scaled"]))
def test_confidence_matches_label_enumeration(seed, M, variant):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=4)
    w = rng.normal(size=5)
    xa = augment(x)[0]
    scores = [(float(w @ psi(xa, y, M, variant)), -k) for k, y in enumerate(label_set(M))]
    k = -max(scores)[1]
    y, s = ssvm_confidence(w, x, M, variant)
    assert y == label_set(M)[k]
    assert s == pytest.approx(max(scores)[0])


# -- bank and streaming --------------------------------------------------------------

def _bank(rng, mode):
    V = 6
    x = rng.dirichlet(np.ones(V), size=8)
    labels = ["a", "a", "b", "b"] * 2
    dp = train_dp_svm(x, [1, 2] * 4, labels, ["a", "b"], 2)
    ssvm = {c: train_ssvm(x, [1 if l == c else NEG for l in labels], 2).w for c in ("a", "b")}
    return ClassifierBank(mode, ["a", "b"], 2, 5, 1.0, 0.5, Codebook(rng.normal(size=(V, 3))), dp=dp, ssvm=ssvm)


def test_bank_round_trip(tmp_path, rng):
    bank = _bank(rng, "s_svm")
    save_bank(bank, tmp_path / "m.json")
    back = load_bank(tmp_path / "m.json")
    assert back.classes == bank.classes and back.M == 2 and back.omega == 5
    assert np.array_equal(back.codebook.centers, bank.codebook.centers)
    for c in bank.classes:
        assert np.array_equal(back.ssvm[c], bank.ssvm[c])
        for a, b in zip(back.dp.models[c], bank.dp.models[c]):
            assert np.array_equal(a.coef, b.coef) and np.array_equal(a.support, b.support)


def test_bank_rejects_bad_parameters(rng):
    with pytest.raises(ValueError):
        ClassifierBank("s_svm", ["a"], 0, 5, 1.0, 0.5, Codebook(np.eye(2)))


def test_load_rejects_other_files(tmp_path):
    (tmp_path / "x.json").write_text("{}")
    with pytest.raises(ValueError):
        load_bank(tmp_path / "x.json")


@pytest.mark.parametrize("mode", ["s_svm", "dp_svm"])
def test_online_predictor_emits_one_score_per_class(rng, mode):
    pred = OnlinePredictor(_bank(rng, mode))
    for _ in range(3):
        out = pred.push(rng.integers(0, 5, size=6))
        assert len(out) == 2 and all(math.isfinite(v) for v in out)
    if mode == "dp_svm":
        assert all(0 <= v <= 1 for v in out)

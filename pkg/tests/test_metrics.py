import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dancegen.compose import compose_scene
from dancegen.errors import ContractError, UndefinedOKSError
from dancegen.metrics import (
    OKS_THRESHOLDS,
    PixelEmbedder,
    RandomProjectionEmbedder,
    default_embedders,
    evaluate,
    harmonic_mean,
    keypoint_error,
    map_from_table,
    map_over_thresholds,
    oks,
    similarity_to_reference,
    toy_detector,
    write_report,
)
from dancegen.pose import DEFAULT_K, NUM_KEYPOINTS, OKSParams, PoseSequence, PoseSkeleton, template_pose


def pose_with(points, canvas=(64, 64), pid=0):
    kp = np.zeros((NUM_KEYPOINTS, 3))
    for i, (x, y) in points.items():
        kp[i] = (x, y, 2)
    return PoseSkeleton(kp, pid, canvas)


def test_thresholds():
    np.testing.assert_allclose(OKS_THRESHOLDS, [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95])


def test_neck_constant_is_shoulder_mean():
    assert DEFAULT_K[1] == pytest.approx(0.5 * (DEFAULT_K[2] + DEFAULT_K[5]))


def test_oks_identity_and_single_keypoint():
    gt = template_pose()
    assert oks(gt, gt.copy()) == 1.0
    s, k = 4.0, DEFAULT_K[0]
    params = OKSParams(object_scale_rule=s)
    g = pose_with({0: (10.0, 10.0)})
    d = pose_with({0: (10.0 + s * k * math.sqrt(2), 10.0)})
    assert oks(g, d, params) == pytest.approx(math.exp(-1), abs=1e-9)


def test_oks_three_keypoints_term_by_term():
    g = pose_with({0: (10, 10), 3: (20, 15), 9: (30, 40)})
    d = pose_with({0: (11, 10), 3: (20, 18), 9: (27, 44)})
    bbox_w, bbox_h = 20, 30
    s = math.sqrt(bbox_w * bbox_h) * 0.53
    terms = [math.exp(-(dd**2) / (2 * s * s * DEFAULT_K[i] ** 2)) for i, dd in ((0, 1.0), (3, 3.0), (9, 5.0))]
    assert oks(g, d) == pytest.approx(sum(terms) / 3, rel=1e-12)


def test_oks_missing_detections_score_zero():
    g = pose_with({0: (10, 10), 3: (20, 15)})
    d = pose_with({0: (10, 10)})
    assert oks(g, d) == pytest.approx(0.5)


def test_oks_undefined_without_visible_truth():
    with pytest.raises(UndefinedOKSError):
        oks(pose_with({}), pose_with({0: (1, 1)}))


@given(st.lists(st.floats(0, 20), min_size=18, max_size=18), st.integers(0, 17), st.floats(0.1, 5))
def test_oks_bounded_and_monotone(shifts, which, extra):
    gt = template_pose(center=(32, 32), canvas=(64, 64))
    det = gt.copy()
    det.keypoints[:, 0] += np.array(shifts)
    value = oks(gt, det)
    assert 0.0 < value <= 1.0
    worse = det.copy()
    worse.keypoints[which, 0] += extra
    assert oks(gt, worse) <= value + 1e-15


@given(st.floats(0.5, 4.0))
def test_oks_similarity_invariance(c):
    gt = template_pose(center=(30, 30), canvas=(64, 64))
    det = gt.copy()
    det.keypoints[:, :2] += np.random.default_rng(0).normal(size=(18, 2))
    scaled = [p.copy(keypoints=np.column_stack([p.xy * c, p.keypoints[:, 2]]), canvas=(640, 640)) for p in (gt, det)]
    assert oks(*scaled) == pytest.approx(oks(gt, det), rel=1e-9)


def test_map_examples():
    assert map_from_table(np.full((4, 2), 0.7)) == pytest.approx(0.5)
    assert map_from_table(np.full((4, 2), 0.49)) == 0.0
    seq = PoseSequence([[template_pose()]] * 3)
    assert map_over_thresholds(seq, seq) == 1.0
    with pytest.raises(ContractError):
        map_over_thresholds(seq, PoseSequence([[template_pose()]] * 2))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.integers(0, 11), st.floats(0, 1))
def test_map_is_monotone(values, i, bump):
    i %= len(values)
    better = list(values)
    better[i] = min(1.0, better[i] + bump)
    assert map_from_table(better) >= map_from_table(values)


def test_similarity_examples():
    ref = np.random.default_rng(0).random((32, 32, 3))
    emb = PixelEmbedder()
    assert similarity_to_reference([ref], ref, emb) == pytest.approx(1.0)
    with pytest.raises(ContractError):
        similarity_to_reference([], ref, emb)

    class Stub:
        name = "stub"

        def embed(self, image):
            v = float(np.asarray(image).ravel()[0])
            return np.array([v, math.sqrt(1 - v * v)])

    frames = [np.full((2, 2, 3), 0.8), np.full((2, 2, 3), 0.6)]
    assert similarity_to_reference(frames, np.full((2, 2, 3), 1.0), Stub()) == pytest.approx(0.7)
    assert similarity_to_reference(frames[::-1], np.full((2, 2, 3), 1.0), Stub()) == pytest.approx(0.7)

    class Orthogonal:
        name = "orth"

        def embed(self, image):
            return np.array([1.0, 0.0]) if np.mean(image) > 0.5 else np.array([0.0, 1.0])

    assert similarity_to_reference([np.zeros((2, 2, 3))], np.ones((2, 2, 3)), Orthogonal()) == 0.0


@pytest.mark.parametrize("emb", [PixelEmbedder(), RandomProjectionEmbedder()])
def test_embedders_unit_norm(emb):
    for seed in range(3):
        v = emb.embed(np.random.default_rng(seed).random((32, 32, 3)))
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6)


def test_harmonic_mean_examples():
    assert round(harmonic_mean(0.83, 0.91), 2) == 0.87
    assert harmonic_mean(0.4, 0.4) == pytest.approx(0.4)
    assert harmonic_mean(0.0, 0.7) == 0.0 and harmonic_mean(0.0, 0.0) == 0.0
    with pytest.raises(ContractError):
        harmonic_mean(-0.1, 0.5)


@given(st.floats(0, 1), st.floats(0, 1))
def test_harmonic_mean_between_inputs(a, b):
    # min <= H <= max (and H <= arithmetic mean), with equality iff a == b
    h = harmonic_mean(a, b)
    assert min(a, b) - 1e-12 <= h <= max(a, b) + 1e-12
    assert h <= (a + b) / 2 + 1e-12
    if a == b:
        assert h == pytest.approx(a)
    elif min(a, b) > 0:
        assert min(a, b) < h < max(a, b)


def _rendered_sequence(world, n=3):
    rng = np.random.default_rng(1)
    spec, _, _ = world.random_scene(rng, num_persons=2)
    scene = compose_scene(spec)
    return scene, PoseSequence([list(scene.poses)] * n)


def test_evaluate_perfect_frames(world):
    scene, seq = _rendered_sequence(world)
    report = evaluate([scene.image] * 3, scene.image, seq, toy_detector, default_embedders())
    assert report.map == 1.0
    assert report.dino == pytest.approx(1.0) and report.clip_i == pytest.approx(1.0)
    assert report.h == pytest.approx(harmonic_mean(report.dino, report.map), abs=1e-9)
    assert report.keypoint_error < 0.5


def test_evaluate_blank_frames(world):
    scene, seq = _rendered_sequence(world, n=2)
    blank = np.zeros_like(scene.image)
    report = evaluate([blank, blank], scene.image, seq, toy_detector, default_embedders())
    assert report.map == 0.0
    emb = default_embedders()["dino"]
    assert report.dino == pytest.approx(float(emb.embed(blank) @ emb.embed(scene.image)))


def test_evaluate_surfaces_undefined_oks_per_frame(world):
    scene, seq = _rendered_sequence(world, n=2)
    hidden = [p.copy() for p in seq.frames[1]]
    for p in hidden:
        p.keypoints[:, 2] = 0
    gt = PoseSequence([seq.frames[0], hidden])
    report = evaluate([scene.image] * 2, scene.image, gt, toy_detector, default_embedders())
    assert 1 in report.frame_errors and report.per_frame_oks[1] == [None, None]
    assert report.map == 1.0


def test_evaluate_frame_count_mismatch(world):
    scene, seq = _rendered_sequence(world)
    with pytest.raises(ContractError):
        evaluate([scene.image], scene.image, seq, toy_detector, default_embedders())


def test_keypoint_error_ignores_undetected():
    g = pose_with({0: (1, 1), 1: (5, 5)})
    d = pose_with({0: (4, 5)})
    assert keypoint_error([[g]], [[d]]) == pytest.approx(5.0)


def test_report_file(world, tmp_path):
    scene, seq = _rendered_sequence(world)
    report = evaluate([scene.image] * 3, scene.image, seq, toy_detector, default_embedders())
    doc = json.loads(write_report(tmp_path / "r.json", report, {"a": 1}).read_text())
    assert {"clip_i", "dino", "map", "h", "per_frame_oks", "config_digest"} <= set(doc)
    assert doc["h"] == pytest.approx(harmonic_mean(doc["dino"], doc["map"]), abs=1e-9)

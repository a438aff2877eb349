import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dancegen.compose import compose_scene
from dancegen.errors import ContractError, FormatError
from dancegen.pose import (
    LIMBS,
    NUM_KEYPOINTS,
    PoseSequence,
    PoseSkeleton,
    SimilarityTransform,
    articulate,
    compose_poses,
    coverage,
    detect_toy_keypoints,
    keypoint_radius,
    load_pose_sequence,
    random_pose,
    rasterize_pose,
    save_pose_sequence,
    template_pose,
    transform_pose,
)


def single_keypoint_pose(x, y, k=0, canvas=(16, 16)):
    kp = np.zeros((NUM_KEYPOINTS, 3))
    kp[k] = (x, y, 2)
    return PoseSkeleton(kp, 0, canvas)


def test_skeleton_validation():
    with pytest.raises(ContractError):
        PoseSkeleton(np.zeros((17, 3)))
    bad = np.zeros((18, 3))
    bad[0, 2] = 3
    with pytest.raises(ContractError):
        PoseSkeleton(bad)


def test_sequence_ids_must_be_consistent():
    a, b = template_pose(person_id=0), template_pose(person_id=1)
    PoseSequence([[a, b], [a, b]])
    with pytest.raises(ContractError):
        PoseSequence([[a, b], [b, a]])


# --- transforms ------------------------------------------------------------


def test_identity_and_scaling():
    p = template_pose()
    np.testing.assert_array_equal(transform_pose(p, SimilarityTransform()).keypoints, p.keypoints)
    small = template_pose(center=(8, 8), scale=0.5, canvas=(64, 64))
    doubled = transform_pose(small, SimilarityTransform(scale=2.0))
    np.testing.assert_allclose(doubled.xy, 2 * small.xy, atol=1e-12)


def test_quarter_turn_about_centre():
    p = template_pose(angles={"right_arm": (0.4, 0.2)})
    xf = SimilarityTransform(rotation=math.pi / 2, pivot=(15.5, 15.5))
    got = transform_pose(p, xf).xy
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    expected = (p.xy - 15.5) @ rot.T + 15.5
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_leaving_canvas_clears_visibility():
    p = template_pose()
    moved = transform_pose(p, SimilarityTransform(translation=(20.0, 0.0)))
    assert not moved.visible[moved.xy[:, 0] > 31].any()
    assert moved.visible.sum() < p.visible.sum()


similarity = st.builds(
    SimilarityTransform,
    scale=st.floats(0.9, 1.1),
    rotation=st.floats(-0.2, 0.2),
    translation=st.tuples(st.floats(-2, 2), st.floats(-2, 2)),
    pivot=st.tuples(st.floats(10, 22), st.floats(10, 22)),
)


@given(similarity)
def test_inverse_round_trip(xf):
    p = template_pose(center=(16, 16), scale=0.6)
    there = transform_pose(p, xf)
    assert there.visible.all()
    np.testing.assert_allclose(transform_pose(there, xf.inverse()).xy, p.xy, atol=1e-9)


@given(similarity, similarity)
def test_then_composes(a, b):
    pts = np.random.default_rng(0).normal(size=(5, 2)) * 5
    np.testing.assert_allclose(a.then(b).apply(pts), b.apply(a.apply(pts)), atol=1e-9)


def test_articulate_preserves_bone_lengths():
    p = template_pose()
    q = articulate(p, {"left_arm": (0.5, -0.3), "right_leg": (0.2, 0.1)})
    for i, j in LIMBS:
        assert np.linalg.norm(q.xy[i] - q.xy[j]) == pytest.approx(np.linalg.norm(p.xy[i] - p.xy[j]), abs=1e-9)


# --- composition -----------------------------------------------------------


def test_compose_poses():
    a = template_pose(person_id=0)
    assert compose_poses([a])[0].person_id == 0
    b = template_pose(center=(20, 16), person_id=0)
    c = template_pose(center=(10, 16), person_id=4)
    out = compose_poses([a, b, c])
    assert len({p.person_id for p in out}) == 3
    before = sorted(map(tuple, np.concatenate([p.keypoints for p in (a, b, c)])))
    after = sorted(map(tuple, np.concatenate([p.keypoints for p in out])))
    assert len(after) == 54 and before == after
    with pytest.raises(ContractError):
        compose_poses([a, template_pose(canvas=(16, 16), scale=0.3, center=(8, 8))])


# --- rasterization ---------------------------------------------------------


def test_rasterize_examples():
    assert not rasterize_pose([], (16, 16)).any()
    m = rasterize_pose([single_keypoint_pose(5, 7)], (16, 16))
    assert m.sum() > 0 and m.min() >= 0 and m.max() <= 1
    assert keypoint_radius((16, 16)) == 2.0 and keypoint_radius((32, 32)) == 4.0


def test_limb_footprint_matches_brute_force():
    kp = np.zeros((NUM_KEYPOINTS, 3))
    kp[1] = (4.0, 3.0, 2)  # neck
    kp[2] = (11.0, 9.0, 2)  # right shoulder, limb (1, 2)
    pose = PoseSkeleton(kp, 0, (16, 16))
    r = keypoint_radius((16, 16))
    touched = set()
    a, b = kp[1, :2], kp[2, :2]
    for y in range(16):
        for x in range(16):
            p = np.array([x, y], float)
            u = np.clip((p - a) @ (b - a) / ((b - a) @ (b - a)), 0, 1)
            d_seg = np.linalg.norm(p - (a + u * (b - a)))
            d_key = min(np.linalg.norm(p - a), np.linalg.norm(p - b))
            if coverage(d_seg, r / 4) > 0 or coverage(d_key, r) > 0:
                touched.add((y, x))
    m = rasterize_pose([pose], (16, 16)).max(axis=0)
    assert set(zip(*np.nonzero(m))) == touched


@settings(max_examples=25)
@given(st.integers(-3, 3), st.integers(-3, 3))
def test_rasterize_translation_equivariance(dx, dy):
    p = template_pose(center=(16, 16), scale=0.7)
    shifted = transform_pose(p, SimilarityTransform(translation=(dx, dy)))
    assert shifted.visible.all()
    a = rasterize_pose([p], (32, 32))
    b = rasterize_pose([shifted], (32, 32))
    np.testing.assert_allclose(np.roll(a, (dy, dx), axis=(1, 2))[:, 6:-6, 6:-6], b[:, 6:-6, 6:-6], atol=1e-12)


# --- detection -------------------------------------------------------------


def test_detect_contract_and_blank():
    with pytest.raises(ContractError):
        detect_toy_keypoints(np.zeros((8, 8, 3)), 0)
    blank = detect_toy_keypoints(np.full((32, 32, 3), 0.5), 2)
    assert all(not p.visible.any() for p in blank)


def test_render_then_detect_round_trip(world):
    rng = np.random.default_rng(0)
    errors = []
    for _ in range(100):
        slot = int(rng.integers(world.num_appearances))
        pose = random_pose(rng, world.canvas, person_id=slot, scale_range=world.scale_range)
        image = compose_scene(world.scene(0, [pose])).image
        (det,) = detect_toy_keypoints(image, 1, slots=[slot])
        both = pose.visible & det.visible
        errors.extend(np.linalg.norm(pose.xy[both] - det.xy[both], axis=1))
    assert np.mean(errors) <= 1.0


def test_two_persons_matched_by_colour_key(world):
    rng = np.random.default_rng(5)
    spec, _, slots = world.random_scene(rng, num_persons=2)
    scene = compose_scene(spec)
    det = detect_toy_keypoints(scene.image, 2, slots=list(reversed(slots)))
    by_id = {p.person_id: p for p in det}
    for gt in scene.poses:
        d = by_id[gt.person_id]
        both = gt.visible & d.visible
        assert both.sum() >= 12
        assert np.mean(np.linalg.norm(gt.xy[both] - d.xy[both], axis=1)) < 1.0


# --- files -----------------------------------------------------------------


def test_pose_file_round_trip(tmp_path):
    seq = PoseSequence([[template_pose(person_id=0), template_pose(center=(20, 16), person_id=1)]] * 2, fps=8.0)
    save_pose_sequence(tmp_path / "p.json", seq)
    doc = json.loads((tmp_path / "p.json").read_text())
    assert set(doc) == {"fps", "canvas", "frames"} and len(doc["frames"][0][0]["keypoints"]) == 18
    back = load_pose_sequence(tmp_path / "p.json")
    assert back.fps == 8.0 and len(back) == 2
    np.testing.assert_allclose(back.frames[1][1].keypoints, seq.frames[1][1].keypoints)
    (tmp_path / "bad.json").write_text('{"fps": 1, "frames": []}')
    with pytest.raises(FormatError):
        load_pose_sequence(tmp_path / "bad.json")

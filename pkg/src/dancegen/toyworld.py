"""A desk-scale scene family: blob persons with colour-keyed markers on muted backgrounds.

Everything a toy experiment needs is generated here from integer seeds: person
appearances, backgrounds, prompt embeddings and training datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .compose import ComposedScene, PersonSpec, SceneSpec, compose_scene
from .pose import (
    MAX_PERSONS,
    MUTED_RANGE,
    PoseSkeleton,
    SimilarityTransform,
    coverage,
    marker_colors,
    random_pose,
    rasterize_pose,
    _segment_distance,
)

MARKER_RADIUS = 1.2
_NECK_TO_PELVIS = 7.0


@dataclass(frozen=True)
class Appearance:
    slot: int  # marker palette slot, also the detector's person id
    shirt: tuple[float, float, float]
    pants: tuple[float, float, float]
    skin: tuple[float, float, float]


def _muted(rng) -> tuple[float, float, float]:
    return tuple(float(v) for v in rng.uniform(*MUTED_RANGE, size=3))


def make_appearance(slot: int, seed: int) -> Appearance:
    rng = np.random.default_rng([seed, slot, 11])
    return Appearance(slot, _muted(rng), _muted(rng), _muted(rng))


def make_background(seed: int, canvas: tuple[int, int] = (32, 32)) -> np.ndarray:
    """Smooth muted background: a two-colour gradient, a ground band and a soft disc."""
    rng = np.random.default_rng([seed, 23])
    w, h = canvas
    yy, xx = np.mgrid[0:h, 0:w] / np.array([max(h - 1, 1), max(w - 1, 1)])[:, None, None]
    top, bottom = np.array(_muted(rng)), np.array(_muted(rng))
    angle = rng.uniform(0, 2 * math.pi)
    ramp = 0.5 + 0.5 * (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) * 1.4
    img = top + np.clip(ramp, 0, 1)[..., None] * (bottom - top)
    horizon = rng.uniform(0.55, 0.8)
    band = np.clip((yy - horizon) * h, 0.0, 1.0)[..., None]
    img = img * (1 - band) + band * np.array(_muted(rng))
    cx, cy, r = rng.uniform(0.15, 0.85), rng.uniform(0.1, 0.5), rng.uniform(0.08, 0.18)
    disc = coverage(np.hypot((xx - cx) * w, (yy - cy) * h), r * w)[..., None]
    img = img * (1 - disc) + disc * np.array(_muted(rng))
    return np.clip(img, *MUTED_RANGE)


def _paint(rgb, alpha, color, cov):
    cov = cov[..., None]
    rgb *= 1.0 - cov
    rgb += cov * np.asarray(color)
    np.maximum(alpha, cov[..., 0], out=alpha)


def render_person(pose: PoseSkeleton, appearance: Appearance) -> tuple[np.ndarray, np.ndarray]:
    """Render a person at ``pose``; returns ``(rgb, mask)`` on the pose canvas."""
    w, h = pose.canvas
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    xy = pose.xy
    scale = np.linalg.norm(xy[1] - 0.5 * (xy[8] + xy[11])) / _NECK_TO_PELVIS
    rgb = np.zeros((h, w, 3))
    alpha = np.zeros((h, w))

    def capsule(i, j, radius, color):
        _paint(rgb, alpha, color, coverage(_segment_distance(px, py, xy[i], xy[j]), radius * scale))

    mid_hip = 0.5 * (xy[8] + xy[11])
    for a, b in ((8, 9), (9, 10), (11, 12), (12, 13)):
        capsule(a, b, 1.6, appearance.pants)
    capsule(8, 11, 1.8, appearance.pants)
    _paint(rgb, alpha, appearance.shirt, coverage(_segment_distance(px, py, xy[1], mid_hip), 3.2 * scale))
    capsule(2, 5, 1.6, appearance.shirt)
    for a, b in ((2, 3), (3, 4), (5, 6), (6, 7)):
        capsule(a, b, 1.5, appearance.shirt)
    head = xy[[0, 14, 15, 16, 17]].mean(axis=0)
    _paint(rgb, alpha, appearance.skin, coverage(np.hypot(px - head[0], py - head[1]), 4.4 * scale))
    keys = marker_colors(appearance.slot)
    for k in np.flatnonzero(pose.visible):
        _paint(rgb, alpha, keys[k], coverage(np.hypot(px - xy[k, 0], py - xy[k, 1]), MARKER_RADIUS))
    mask = (alpha >= 0.5).astype(np.float64)
    return np.clip(rgb, 0.0, 1.0) * mask[..., None], mask


def person_spec(pose: PoseSkeleton, appearance: Appearance, placement: SimilarityTransform | None = None) -> PersonSpec:
    fg, mask = render_person(pose, appearance)
    return PersonSpec(fg, mask, pose.copy(person_id=appearance.slot), placement or SimilarityTransform())


@dataclass
class ToyWorld:
    """Seeded pool of backgrounds, appearances and prompt codes."""

    seed: int = 0
    canvas: tuple[int, int] = (32, 32)
    num_backgrounds: int = 3
    num_appearances: int = 3
    embedding_dim: int = 16
    scale_range: tuple[float, float] = (0.75, 0.95)

    def __post_init__(self):
        if self.num_appearances > MAX_PERSONS:
            raise ValueError(f"at most {MAX_PERSONS} distinct appearances are supported")
        rng = np.random.default_rng([self.seed, 5])
        self.backgrounds = [make_background(self.seed * 100 + i, self.canvas) for i in range(self.num_backgrounds)]
        self.appearances = [make_appearance(i, self.seed) for i in range(self.num_appearances)]
        self._bg_codes = rng.normal(size=(self.num_backgrounds, self.embedding_dim))
        self._person_codes = rng.normal(size=(self.num_appearances, self.embedding_dim))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "canvas": list(self.canvas),
            "num_backgrounds": self.num_backgrounds,
            "num_appearances": self.num_appearances,
            "embedding_dim": self.embedding_dim,
            "scale_range": list(self.scale_range),
        }

    def prompt_embedding(self, background: int, slots) -> np.ndarray:
        """Stand-in text embedding of "persons <slots> on background <background>"."""
        code = self._bg_codes[background].copy()
        if len(slots):
            code += self._person_codes[list(slots)].mean(axis=0)
        return code / np.sqrt(2.0)

    def empty_embedding(self) -> np.ndarray:
        return np.zeros(self.embedding_dim)

    def scene(self, background: int, poses: list[PoseSkeleton]) -> SceneSpec:
        """Scene with person ``poses[i].person_id`` drawn from appearance slot ``person_id``."""
        persons = [person_spec(p, self.appearances[int(p.person_id)]) for p in poses]
        return SceneSpec(self.backgrounds[background].copy(), persons, self.canvas)

    def random_scene(self, rng, num_persons: int | None = None, background: int | None = None):
        """Random scene; returns ``(SceneSpec, background index, slots)``."""
        if background is None:
            background = int(rng.integers(self.num_backgrounds))
        if num_persons is None:
            num_persons = int(rng.integers(1, min(2, self.num_appearances) + 1))
        slots = rng.permutation(self.num_appearances)[:num_persons].tolist()
        w = self.canvas[0]
        lanes = [(w * i / num_persons - 2.0, w * (i + 1) / num_persons + 1.0) for i in range(num_persons)]
        poses = [
            random_pose(rng, self.canvas, person_id=s, scale_range=self.scale_range, x_bounds=lane)
            for s, lane in zip(slots, lanes)
        ]
        return self.scene(background, poses), background, slots

    def training_set(self, size: int, seed: int, control_resolution: tuple[int, int] | None = None):
        """Return ``(images, embeddings, controls)`` arrays for ``size`` random scenes."""
        rng = np.random.default_rng([self.seed, seed, 17])
        res = control_resolution or self.canvas
        images, embs, controls = [], [], []
        for _ in range(size):
            spec, bg, slots = self.random_scene(rng)
            composed = compose_scene(spec)
            images.append(composed.image)
            embs.append(self.prompt_embedding(bg, slots))
            controls.append(rasterize_pose(composed.poses, res))
        return np.stack(images), np.stack(embs), np.stack(controls)


def scene_poses(scene: ComposedScene) -> list[PoseSkeleton]:
    return [p.copy() for p in scene.poses]


def dance_sequence(poses: list[PoseSkeleton], num_frames: int, seed: int = 0, fps: float = 8.0, period: float = 8.0):
    """Driving poses: every person swings arms and legs and sways sideways.

    Frame 0 is not the reference pose itself; each person starts at a random
    phase. Keypoints that leave the canvas become unlabeled.
    """
    from .pose import PoseSequence, articulate, transform_pose

    if num_frames < 1:
        raise ValueError("num_frames must be positive")
    rng = np.random.default_rng([seed, 31])
    params = []
    for _ in poses:
        params.append(
            {
                "phase": rng.uniform(0, 2 * math.pi),
                "arm": rng.uniform(0.3, 0.8, size=2) * rng.choice([-1, 1], size=2),
                "leg": rng.uniform(0.1, 0.3, size=2) * rng.choice([-1, 1], size=2),
                "sway": rng.uniform(1.0, 2.5),
            }
        )
    frames = []
    for f in range(num_frames):
        frame = []
        for pose, prm in zip(poses, params):
            s = math.sin(2 * math.pi * f / period + prm["phase"])
            angles = {
                "right_arm": (prm["arm"][0] * s, 0.5 * prm["arm"][0] * s),
                "left_arm": (prm["arm"][1] * s, 0.5 * prm["arm"][1] * s),
                "right_leg": (prm["leg"][0] * s, 0.0),
                "left_leg": (prm["leg"][1] * s, 0.0),
            }
            moved = articulate(pose, angles)
            shift = SimilarityTransform(translation=(prm["sway"] * s, 0.0))
            frame.append(transform_pose(moved, shift))
        frames.append(frame)
    return PoseSequence(frames, fps)

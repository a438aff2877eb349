"""Body-18 skeletons, similarity transforms, control-map rasterization and toy detection.

Coordinates are pixels with a top-left origin; pixel ``(row, col)`` has its centre
at ``(x=col, y=row)``. A keypoint is in-canvas when ``0 <= x <= w-1`` and
``0 <= y <= h-1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, FormatError

NUM_KEYPOINTS = 18
KEYPOINT_NAMES = (
    "nose", "neck",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "right_eye", "left_eye", "right_ear", "left_ear",
)  # fmt: skip
LIMBS = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)  # fmt: skip

# control-map channel of each keypoint / limb
KEYPOINT_GROUP = (0, 1, 2, 2, 2, 3, 3, 3, 1, 4, 4, 1, 5, 5, 0, 0, 0, 0)
LIMB_GROUP = (1, 1, 2, 2, 3, 3, 1, 4, 4, 1, 5, 5, 0, 0, 0, 0, 0)
NUM_GROUPS = 6
LIMB_VALUE = 0.3

# COCO-17 sigmas; k = 2 * sigma. The neck takes the mean of the shoulders.
_COCO_SIGMA = {
    "nose": 0.026, "right_eye": 0.025, "left_eye": 0.025, "right_ear": 0.035, "left_ear": 0.035,
    "right_shoulder": 0.079, "left_shoulder": 0.079, "right_elbow": 0.072, "left_elbow": 0.072,
    "right_wrist": 0.062, "left_wrist": 0.062, "right_hip": 0.107, "left_hip": 0.107,
    "right_knee": 0.087, "left_knee": 0.087, "right_ankle": 0.089, "left_ankle": 0.089,
}  # fmt: skip
_COCO_SIGMA["neck"] = 0.5 * (_COCO_SIGMA["right_shoulder"] + _COCO_SIGMA["left_shoulder"])
DEFAULT_K = np.array([2.0 * _COCO_SIGMA[name] for name in KEYPOINT_NAMES])


def _keypoint_codes() -> np.ndarray:
    codes = np.zeros(NUM_KEYPOINTS)
    rank = [0] * NUM_GROUPS
    for i, g in enumerate(KEYPOINT_GROUP):
        codes[i] = 1.0 - 0.15 * rank[g]
        rank[g] += 1
    return codes


KEYPOINT_CODE = _keypoint_codes()


@dataclass
class PoseSkeleton:
    keypoints: np.ndarray  # (18, 3): x, y, visibility in {0, 1, 2}
    person_id: int | str = 0
    canvas: tuple[int, int] = (32, 32)  # (width, height)

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=np.float64)
        if kp.shape != (NUM_KEYPOINTS, 3):
            raise ContractError(f"expected ({NUM_KEYPOINTS}, 3) keypoints, got {kp.shape}")
        if not np.all(np.isin(kp[:, 2], (0, 1, 2))):
            raise ContractError("visibility flags must be 0, 1 or 2")
        self.keypoints = kp
        self.canvas = (int(self.canvas[0]), int(self.canvas[1]))

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]

    @property
    def visible(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0

    def in_canvas(self) -> np.ndarray:
        return _inside(self.xy, self.canvas)

    def copy(self, **changes) -> "PoseSkeleton":
        changes.setdefault("keypoints", self.keypoints.copy())
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {"id": self.person_id, "keypoints": [[float(x), float(y), int(v)] for x, y, v in self.keypoints]}


@dataclass
class PoseSequence:
    frames: list[list[PoseSkeleton]]
    fps: float | None = None

    def __post_init__(self):
        if self.frames:
            ids = [p.person_id for p in self.frames[0]]
            for i, frame in enumerate(self.frames):
                if [p.person_id for p in frame] != ids:
                    raise ContractError(f"frame {i} has inconsistent person ids")

    def __len__(self):
        return len(self.frames)

    @property
    def canvas(self) -> tuple[int, int] | None:
        for frame in self.frames:
            if frame:
                return frame[0].canvas
        return None


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float = 1.0
    rotation: float = 0.0  # radians, counter-clockwise in image coordinates (y down)
    translation: tuple[float, float] = (0.0, 0.0)
    pivot: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ContractError("similarity scale must be positive")

    def matrix(self) -> np.ndarray:
        """2x3 affine matrix mapping source points to destination points."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        lin = self.scale * np.array([[c, -s], [s, c]])
        pivot = np.asarray(self.pivot, dtype=np.float64)
        offset = pivot + np.asarray(self.translation, dtype=np.float64) - lin @ pivot
        return np.column_stack([lin, offset])

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        m = self.matrix()
        return points @ m[:, :2].T + m[:, 2]

    def inverse(self) -> "SimilarityTransform":
        new_pivot = (self.pivot[0] + self.translation[0], self.pivot[1] + self.translation[1])
        return SimilarityTransform(
            1.0 / self.scale, -self.rotation, (-self.translation[0], -self.translation[1]), new_pivot
        )

    def then(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Composite transform: apply ``self`` first, then ``other``."""
        a, b = self.matrix(), other.matrix()
        lin = b[:, :2] @ a[:, :2]
        off = b[:, :2] @ a[:, 2] + b[:, 2]
        scale = math.sqrt(abs(np.linalg.det(lin)))
        rot = math.atan2(lin[1, 0], lin[0, 0])
        return SimilarityTransform(scale, rot, (float(off[0]), float(off[1])), (0.0, 0.0))

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation": self.rotation,
            "translation": list(self.translation),
            "pivot": list(self.pivot),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimilarityTransform":
        return cls(
            float(data.get("scale", 1.0)),
            float(data.get("rotation", 0.0)),
            tuple(data.get("translation", (0.0, 0.0))),
            tuple(data.get("pivot", (0.0, 0.0))),
        )


@dataclass
class OKSParams:
    per_keypoint_k: np.ndarray = field(default_factory=lambda: DEFAULT_K.copy())
    object_scale_rule: str | float = "keypoint-bbox"
    min_scale: float = 1.0

    def __post_init__(self):
        self.per_keypoint_k = np.asarray(self.per_keypoint_k, dtype=np.float64)
        if self.per_keypoint_k.shape != (NUM_KEYPOINTS,) or not np.all(self.per_keypoint_k > 0):
            raise ContractError("per_keypoint_k must hold 18 positive constants")

    def object_scale(self, gt: PoseSkeleton) -> float:
        """``sqrt(area of the visible-keypoint bounding box) * 0.53``, or a fixed value."""
        if not isinstance(self.object_scale_rule, str):
            return float(self.object_scale_rule)
        if self.object_scale_rule != "keypoint-bbox":
            raise ContractError(f"unknown object scale rule {self.object_scale_rule!r}")
        pts = gt.xy[gt.visible]
        if len(pts) == 0:
            return self.min_scale
        w, h = pts.max(axis=0) - pts.min(axis=0)
        return max(math.sqrt(w * h) * 0.53, self.min_scale)


def _inside(xy: np.ndarray, canvas: tuple[int, int]) -> np.ndarray:
    w, h = canvas
    return (xy[:, 0] >= 0) & (xy[:, 0] <= w - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1)


def transform_pose(pose: PoseSkeleton, xf: SimilarityTransform) -> PoseSkeleton:
    """Apply ``xf`` to every keypoint; visible keypoints that leave the canvas become v=0."""
    kp = pose.keypoints.copy()
    kp[:, :2] = xf.apply(pose.xy)
    outside = ~_inside(kp[:, :2], pose.canvas)
    kp[outside, 2] = 0
    return pose.copy(keypoints=kp)


def compose_poses(poses: Sequence[PoseSkeleton]) -> list[PoseSkeleton]:
    """Merge single-person poses onto one canvas, relabelling clashing person ids."""
    poses = list(poses)
    if not poses:
        return []
    canvas = poses[0].canvas
    for p in poses:
        if p.canvas != canvas:
            raise ContractError(f"canvas mismatch: {p.canvas} vs {canvas}")
    used: set = set()
    out = []
    for p in poses:
        pid = p.person_id
        if pid in used:
            pid = 0
            while pid in used:
                pid += 1
        used.add(pid)
        out.append(p.copy(person_id=pid))
    return out


# --- rasterization ---------------------------------------------------------


def keypoint_radius(resolution: tuple[int, int]) -> float:
    """Control-map disc radius: 2 px at 16x16, scaled with the smaller side."""
    return 2.0 * min(resolution) / 16.0


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(px - a[0], py - a[1])
    u = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + u * ab[0]), py - (a[1] + u * ab[1]))


def coverage(distance, radius: float):
    """Anti-aliased coverage of a shape of given radius from a distance field."""
    return np.clip(radius + 0.5 - distance, 0.0, 1.0)


def rasterize_pose(poses: Sequence[PoseSkeleton], resolution: tuple[int, int]) -> np.ndarray:
    """Render skeletons to a ``(6, h, w)`` control map in [0, 1].

    Channels are limb groups (head, torso, right arm, left arm, right leg,
    left leg). Limbs are drawn at value 0.3 with half-width ``r/4``; keypoint
    discs of radius ``r`` carry a per-keypoint code so keypoints sharing a
    channel stay distinguishable. Overlaps take the maximum.
    """
    w, h = int(resolution[0]), int(resolution[1])
    if w <= 0 or h <= 0:
        raise ContractError("resolution must be positive")
    out = np.zeros((NUM_GROUPS, h, w))
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    r = keypoint_radius((w, h))
    for pose in poses:
        sx = w / pose.canvas[0]
        sy = h / pose.canvas[1]
        xy = pose.xy * np.array([sx, sy])
        vis = pose.visible
        for (i, j), g in zip(LIMBS, LIMB_GROUP):
            if vis[i] and vis[j]:
                d = _segment_distance(px, py, xy[i], xy[j])
                np.maximum(out[g], LIMB_VALUE * coverage(d, r / 4.0), out=out[g])
        for i in np.flatnonzero(vis):
            d = np.hypot(px - xy[i, 0], py - xy[i, 1])
            g = KEYPOINT_GROUP[i]
            np.maximum(out[g], KEYPOINT_CODE[i] * coverage(d, r), out=out[g])
    return out


# --- toy marker palette and detection -------------------------------------


def _build_palette() -> np.ndarray:
    levels = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
    grid = np.array(np.meshgrid(levels, levels, levels, indexing="ij")).reshape(3, -1).T
    extreme = np.any((grid == 0.0) | (grid == 1.0), axis=1)
    colors = grid[extreme]
    # spread consecutive entries apart so one person's keys span the cube
    order = np.random.default_rng(7).permutation(len(colors))
    return colors[order]


MARKER_PALETTE = _build_palette()
MAX_PERSONS = len(MARKER_PALETTE) // NUM_KEYPOINTS
MUTED_RANGE = (0.35, 0.65)


def marker_colors(slot: int) -> np.ndarray:
    """The 18 RGB key colours of palette slot ``slot``."""
    if not 0 <= slot < MAX_PERSONS:
        raise ContractError(f"palette slot {slot} outside [0, {MAX_PERSONS})")
    return MARKER_PALETTE[slot * NUM_KEYPOINTS : (slot + 1) * NUM_KEYPOINTS]


def _box3(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1)
    return sum(p[i : i + a.shape[0], j : j + a.shape[1]] for i in range(3) for j in range(3))


def detect_toy_keypoints(
    image,
    expected_persons: int,
    *,
    tolerance: float = 0.18,
    window: int = 3,
    min_mass: float = 0.6,
    slots=None,
) -> list[PoseSkeleton]:
    """Locate the colour-keyed marker discs of toy persons in an ``(h, w, 3)`` image.

    Person ``s`` is reported with ``person_id = s`` (its palette slot). A marker
    is found at the weighted centroid of key-coloured pixels around the
    strongest response; markers whose mass falls below ``min_mass`` get v=0.
    ``slots`` names the palette slots to look for (default ``0..expected_persons-1``).
    """
    if expected_persons <= 0:
        raise ContractError("expected_persons must be positive")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"expected an (h, w, 3) image, got {img.shape}")
    h, w, _ = img.shape
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    slots = list(range(expected_persons)) if slots is None else [int(s) for s in slots]
    if len(slots) != expected_persons:
        raise ContractError("slots must name exactly expected_persons palette slots")
    out = []
    for slot in slots:
        keys = marker_colors(slot)
        kp = np.zeros((NUM_KEYPOINTS, 3))
        for k, key in enumerate(keys):
            dist = np.linalg.norm(img - key, axis=2)
            wgt = np.clip(1.0 - dist / tolerance, 0.0, 1.0)
            if wgt.sum() < min_mass:
                continue
            r0, c0 = np.unravel_index(np.argmax(_box3(wgt)), wgt.shape)
            local = wgt * ((np.abs(py - r0) <= window) & (np.abs(px - c0) <= window))
            mass = local.sum()
            if mass < min_mass:
                continue
            kp[k] = ((local * px).sum() / mass, (local * py).sum() / mass, 2)
        out.append(PoseSkeleton(kp, person_id=slot, canvas=(w, h)))
    return out


# --- toy pose generator ----------------------------------------------------

# body-18 template for a person ~22 px tall, centred on the pelvis midpoint
TEMPLATE_OFFSETS = np.array([
    [0.0, -8.5], [0.0, -5.0],
    [-3.5, -4.5], [-5.5, -0.5], [-6.5, 3.5],
    [3.5, -4.5], [5.5, -0.5], [6.5, 3.5],
    [-2.2, 2.0], [-2.7, 6.5], [-3.0, 11.0],
    [2.2, 2.0], [2.7, 6.5], [3.0, 11.0],
    [-2.2, -10.8], [2.2, -10.8], [-4.2, -8.2], [4.2, -8.2],
])  # fmt: skip

# (joint, children rotated about it) for articulation
_CHAINS = {
    "right_arm": ((2, (3, 4)), (3, (4,))),
    "left_arm": ((5, (6, 7)), (6, (7,))),
    "right_leg": ((8, (9, 10)), (9, (10,))),
    "left_leg": ((11, (12, 13)), (12, (13,))),
}
ARTICULATION_LIMITS = {"right_arm": (0.9, 0.8), "left_arm": (0.9, 0.8), "right_leg": (0.35, 0.4), "left_leg": (0.35, 0.4)}


def template_pose(
    center: tuple[float, float] = (16.0, 16.0),
    scale: float = 1.0,
    person_id: int = 0,
    canvas: tuple[int, int] = (32, 32),
    angles: dict | None = None,
) -> PoseSkeleton:
    """Articulated template skeleton; ``angles`` maps chain name -> (root, mid) radians."""
    pts = TEMPLATE_OFFSETS.copy()
    for name, chain_angles in (angles or {}).items():
        for (joint, children), theta in zip(_CHAINS[name], chain_angles):
            c, s = math.cos(theta), math.sin(theta)
            rot = np.array([[c, -s], [s, c]])
            idx = list(children)
            pts[idx] = (pts[idx] - pts[joint]) @ rot.T + pts[joint]
    pts = pts * scale + np.asarray(center, dtype=np.float64)
    kp = np.column_stack([pts, np.full(NUM_KEYPOINTS, 2.0)])
    pose = PoseSkeleton(kp, person_id=person_id, canvas=canvas)
    kp[~pose.in_canvas(), 2] = 0
    return pose


def articulate(pose: PoseSkeleton, angles: dict) -> PoseSkeleton:
    """Rotate limb chains of an existing skeleton about their joints (radians)."""
    pts = pose.xy.copy()
    for name, chain_angles in angles.items():
        for (joint, children), theta in zip(_CHAINS[name], chain_angles):
            c, s = math.cos(theta), math.sin(theta)
            rot = np.array([[c, -s], [s, c]])
            idx = list(children)
            pts[idx] = (pts[idx] - pts[joint]) @ rot.T + pts[joint]
    kp = np.column_stack([pts, pose.keypoints[:, 2]])
    out = pose.copy(keypoints=kp)
    out.keypoints[~out.in_canvas(), 2] = 0
    return out


def random_angles(rng: np.random.Generator, amount: float = 1.0) -> dict:
    return {
        name: tuple(float(rng.uniform(-lim, lim) * amount) for lim in limits)
        for name, limits in ARTICULATION_LIMITS.items()
    }


def random_pose(
    rng: np.random.Generator,
    canvas: tuple[int, int] = (32, 32),
    person_id: int = 0,
    scale_range: tuple[float, float] = (0.8, 1.1),
    max_rotation: float = math.radians(15),
    margin: float = 1.5,
    x_bounds: tuple[float, float] | None = None,
) -> PoseSkeleton:
    """A random articulated pose whose keypoints all lie inside the canvas.

    ``x_bounds`` optionally restricts the horizontal extent of the keypoints.
    """
    w, h = canvas
    x_lo, x_hi = x_bounds if x_bounds is not None else (0.0, w - 1.0)
    for _ in range(1000):
        scale = rng.uniform(*scale_range)
        pose = template_pose((0.0, 0.0), scale, person_id, canvas, random_angles(rng))
        rot = SimilarityTransform(1.0, rng.uniform(-max_rotation, max_rotation))
        xy = rot.apply(pose.xy)
        lo = np.array([x_lo, 0.0]) - xy.min(axis=0) + margin
        hi = np.array([x_hi, h - 1]) - xy.max(axis=0) - margin
        if np.all(hi >= lo):
            shift = rng.uniform(lo, hi)
            kp = np.column_stack([xy + shift, np.full(NUM_KEYPOINTS, 2.0)])
            return PoseSkeleton(kp, person_id=person_id, canvas=canvas)
    raise ContractError("could not place a random pose inside the canvas")


# --- pose files ------------------------------------------------------------


def save_pose_sequence(path, seq: PoseSequence) -> None:
    canvas = seq.canvas or (0, 0)
    doc = {
        "fps": seq.fps,
        "canvas": list(canvas),
        "frames": [[p.to_dict() for p in frame] for frame in seq.frames],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_pose_sequence(path) -> PoseSequence:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        canvas = tuple(int(v) for v in doc["canvas"])
        frames = [
            [PoseSkeleton(np.array(p["keypoints"], dtype=np.float64), p["id"], canvas) for p in frame]
            for frame in doc["frames"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed pose file ({exc})") from exc
    return PoseSequence(frames, doc.get("fps"))

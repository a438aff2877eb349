"""Scene composition and compositional augmentation.

Images are float arrays of shape ``(h, w, 3)`` in [0, 1]; masks are ``(h, w)``
arrays with values in {0, 1}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, FormatError, PlacementError
from .pose import PoseSkeleton, SimilarityTransform, load_pose_sequence, transform_pose


@dataclass
class PersonSpec:
    foreground: np.ndarray
    mask: np.ndarray
    base_pose: PoseSkeleton
    placement: SimilarityTransform = field(default_factory=SimilarityTransform)

    def __post_init__(self):
        self.foreground = np.asarray(self.foreground, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.foreground.shape[:2] != self.mask.shape or self.foreground.ndim != 3:
            raise ContractError(
                f"foreground {self.foreground.shape} and mask {self.mask.shape} shapes do not match"
            )
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ContractError("mask values must be 0 or 1")


@dataclass
class SceneSpec:
    background: np.ndarray
    persons: list[PersonSpec]
    canvas: tuple[int, int] | None = None  # (w, h); defaults to the background size

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        h, w = self.background.shape[:2]
        if self.canvas is None:
            self.canvas = (w, h)
        if tuple(self.canvas) != (w, h):
            raise ContractError(f"canvas {self.canvas} does not match background {(w, h)}")


@dataclass
class ComposedScene:
    image: np.ndarray
    poses: list[PoseSkeleton]
    background_mask: np.ndarray
    person_masks: list[np.ndarray]  # visible (occlusion-resolved) region of each person


@dataclass(frozen=True)
class AugmentationRanges:
    scale: tuple[float, float] = (0.8, 1.2)
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    margin: float = 0.0
    max_attempts: int = 100

    def __post_init__(self):
        lo, hi = self.scale
        if not 0 < lo <= hi:
            raise ContractError("scale range must satisfy 0 < lo <= hi")
        if self.rotation_deg[0] > self.rotation_deg[1]:
            raise ContractError("rotation range is reversed")
        if self.max_attempts < 1:
            raise ContractError("max_attempts must be >= 1")


def warp(image: np.ndarray, xf: SimilarityTransform, order: int = 1) -> np.ndarray:
    """Resample ``image`` so that source point ``p`` lands at ``xf(p)``."""
    inv = xf.inverse().matrix()
    # ndimage works in (row, col) = (y, x) index order
    mat = inv[::-1, 1::-1]
    off = inv[::-1, 2]
    if image.ndim == 2:
        return ndimage.affine_transform(image, mat, off, order=order, mode="constant", cval=0.0)
    return np.stack(
        [ndimage.affine_transform(image[..., c], mat, off, order=order, mode="constant") for c in range(image.shape[2])],
        axis=-1,
    )


def _is_identity(xf: SimilarityTransform) -> bool:
    return xf.scale == 1.0 and xf.rotation == 0.0 and tuple(xf.translation) == (0.0, 0.0)


def place_person(person: PersonSpec, placement: SimilarityTransform | None = None):
    """Return ``(foreground, mask, pose)`` after applying the placement."""
    xf = person.placement if placement is None else placement
    if _is_identity(xf):
        return person.foreground.copy(), person.mask.copy(), person.base_pose.copy()
    fg = np.clip(warp(person.foreground, xf, order=0), 0.0, 1.0)
    mask = (warp(person.mask, xf, order=0) >= 0.5).astype(np.float64)
    return fg, mask, transform_pose(person.base_pose, xf)


def compose_scene(spec: SceneSpec, placements: list[SimilarityTransform] | None = None) -> ComposedScene:
    """Paste each placed person over the background in list order (later on top)."""
    image = spec.background.copy()
    h, w = image.shape[:2]
    owner = np.full((h, w), -1, dtype=np.int64)
    poses = []
    for i, person in enumerate(spec.persons):
        if person.foreground.shape[:2] != (h, w):
            raise ContractError(f"person {i}: foreground shape {person.foreground.shape} != canvas {(h, w)}")
        xf = None if placements is None else placements[i]
        fg, mask, pose = place_person(person, xf)
        if person.base_pose.visible.any() and not pose.visible.any():
            raise PlacementError(f"person {i}: placement pushes every keypoint off-canvas")
        sel = mask > 0
        image[sel] = fg[sel]
        owner[sel] = i
        poses.append(pose)
    person_masks = [(owner == i).astype(np.float64) for i in range(len(spec.persons))]
    background_mask = (owner < 0).astype(np.float64)
    return ComposedScene(image, poses, background_mask, person_masks)


def _random_delta(rng, pose: PoseSkeleton, canvas, ranges: AugmentationRanges):
    vis = pose.visible
    if not vis.any():
        raise PlacementError("person has no visible keypoints to place")
    pivot = pose.xy[vis].mean(axis=0)
    w, h = canvas
    for _ in range(ranges.max_attempts):
        s = rng.uniform(*ranges.scale)
        rot = math.radians(rng.uniform(*ranges.rotation_deg))
        moved = SimilarityTransform(s, rot, (0.0, 0.0), tuple(pivot)).apply(pose.xy[vis])
        lo = -moved.min(axis=0) + ranges.margin
        hi = np.array([w - 1.0, h - 1.0]) - moved.max(axis=0) - ranges.margin
        if np.all(hi >= lo):
            tx, ty = rng.uniform(lo, hi)
            return SimilarityTransform(s, rot, (float(tx), float(ty)), (float(pivot[0]), float(pivot[1])))
    raise PlacementError(f"no in-canvas placement found after {ranges.max_attempts} attempts")


def generate_augmentations(
    spec: SceneSpec, count: int, seed: int, ranges: AugmentationRanges | None = None
) -> list[ComposedScene]:
    """Re-compose the scene ``count`` times with every person randomly re-placed.

    Each person gets a fresh scale/rotation about its keypoint centroid and a
    translation drawn uniformly from the offsets keeping its visible keypoints
    in-canvas, all relative to its reference placement. The background is fixed.
    """
    if count < 0:
        raise ContractError("augmentation count must be non-negative")
    ranges = ranges or AugmentationRanges()
    rng = np.random.default_rng(seed)
    ref_poses = [transform_pose(p.base_pose, p.placement) for p in spec.persons]
    scenes = []
    for _ in range(count):
        placements = []
        for person, ref_pose in zip(spec.persons, ref_poses):
            delta = _random_delta(rng, ref_pose, spec.canvas, ranges)
            placements.append(person.placement.then(delta))
        scenes.append(compose_scene(spec, placements))
    return scenes


# --- image and manifest files ---------------------------------------------


def save_image(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(path)


def load_image(path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def save_mask(path, mask: np.ndarray) -> None:
    save_image(path, np.asarray(mask, dtype=np.float64))


def load_mask(path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.float64)


def load_scene_manifest(path) -> SceneSpec:
    """Read a JSON scene manifest; relative paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read scene manifest {path}: {exc}") from exc
    try:
        background = load_image(root / doc["background"])
        persons = []
        for entry in doc["persons"]:
            pose = load_pose_sequence(root / entry["pose"]).frames[0][0]
            persons.append(
                PersonSpec(
                    load_image(root / entry["image"]),
                    load_mask(root / entry["mask"]),
                    pose,
                    SimilarityTransform.from_dict(entry.get("placement", {})),
                )
            )
    except KeyError as exc:
        raise FormatError(f"{path}: missing manifest field {exc}") from exc
    canvas = tuple(doc.get("canvas", (background.shape[1], background.shape[0])))
    return SceneSpec(background, persons, canvas)


def write_scene_manifest(directory, spec: SceneSpec) -> Path:
    """Write background, per-person images/masks/poses and a manifest to ``directory``."""
    from .pose import PoseSequence, save_pose_sequence

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_image(directory / "background.png", spec.background)
    entries = []
    for i, p in enumerate(spec.persons):
        save_image(directory / f"person{i}.png", p.foreground)
        save_mask(directory / f"person{i}_mask.png", p.mask)
        save_pose_sequence(directory / f"person{i}_pose.json", PoseSequence([[p.base_pose]]))
        entries.append(
            {
                "image": f"person{i}.png",
                "mask": f"person{i}_mask.png",
                "pose": f"person{i}_pose.json",
                "placement": p.placement.to_dict(),
            }
        )
    doc = {"canvas": list(spec.canvas), "background": "background.png", "persons": entries}
    out = directory / "scene.json"
    out.write_text(json.dumps(doc, indent=1))
    return out

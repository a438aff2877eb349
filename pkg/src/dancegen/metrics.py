"""Evaluation: OKS, threshold-averaged pose precision, embedding similarity and their harmonic mean."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.ndimage import zoom

from .serialization import config_digest, write_json
from .errors import ContractError, DanceGenError, UndefinedOKSError
from .pose import NUM_KEYPOINTS, OKSParams, PoseSequence, PoseSkeleton, detect_toy_keypoints

OKS_THRESHOLDS = np.round(0.50 + 0.05 * np.arange(10), 2)


class Embedder(Protocol):
    name: str

    def embed(self, image) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ContractError("cannot normalize a zero embedding")
    return v / n


class PixelEmbedder:
    """Centred, downsampled pixels; sensitive to identity, colour and layout."""

    def __init__(self, size: int = 16, name: str = "pixel"):
        self.size = size
        self.name = name

    def embed(self, image) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape[:2]
        small = zoom(img, (self.size / h, self.size / w, 1), order=1)
        v = small.reshape(-1) - 0.5
        if not np.any(v):
            v = v + 1e-12
        return _unit(v)


class RandomProjectionEmbedder:
    """Fixed-seed Gaussian projection of centred pixels followed by a tanh."""

    def __init__(self, dim: int = 64, seed: int = 0, name: str = "random-projection"):
        self.dim = dim
        self.seed = seed
        self.name = name
        self._proj: dict[int, np.ndarray] = {}

    def embed(self, image) -> np.ndarray:
        v = np.asarray(image, dtype=np.float64).reshape(-1) - 0.5
        P = self._proj.get(v.size)
        if P is None:
            P = np.random.default_rng([self.seed, v.size]).normal(size=(v.size, self.dim)) / math.sqrt(v.size)
            self._proj[v.size] = P
        return _unit(np.tanh(4.0 * v @ P) + 1e-12)


def oks(gt: PoseSkeleton, det: PoseSkeleton, params: OKSParams | None = None) -> float:
    """Object keypoint similarity over the keypoints visible in ``gt``.

    Keypoints missing from ``det`` (v=0) score zero.
    """
    params = params or OKSParams()
    if gt.keypoints.shape != (NUM_KEYPOINTS, 3) or det.keypoints.shape != (NUM_KEYPOINTS, 3):
        raise ContractError("both skeletons must have 18 keypoints")
    vis = gt.visible
    if not vis.any():
        raise UndefinedOKSError(f"person {gt.person_id} has no visible ground-truth keypoints")
    s = params.object_scale(gt)
    k = params.per_keypoint_k
    d2 = np.sum((gt.xy - det.xy) ** 2, axis=1)
    e = np.exp(-d2 / (2.0 * s * s * k * k))
    e[~det.visible] = 0.0
    return float(e[vis].sum() / vis.sum())


def _sequence(x) -> PoseSequence:
    return x if isinstance(x, PoseSequence) else PoseSequence(list(x))


def oks_table(gt, det, params: OKSParams | None = None) -> np.ndarray:
    """``(frames, persons)`` OKS matrix with detections matched to ground truth by person id."""
    gt, det = _sequence(gt), _sequence(det)
    if len(gt) != len(det):
        raise ContractError(f"{len(gt)} ground-truth frames but {len(det)} detected frames")
    rows = []
    for i, (g_frame, d_frame) in enumerate(zip(gt.frames, det.frames)):
        by_id = {p.person_id: p for p in d_frame}
        row = []
        for g in g_frame:
            d = by_id.get(g.person_id)
            if d is None:
                row.append(0.0)
                continue
            try:
                row.append(oks(g, d, params))
            except DanceGenError as exc:
                raise type(exc)(f"frame {i}: {exc}") from exc
        rows.append(row)
    return np.array(rows, dtype=np.float64)


def map_from_table(table) -> float:
    values = np.asarray(table, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ContractError("no (frame, person) pairs to score")
    return float(np.mean([np.mean(values >= tau) for tau in OKS_THRESHOLDS]))


def map_over_thresholds(gt, det, params: OKSParams | None = None) -> float:
    """Mean over thresholds 0.50..0.95 of the fraction of pairs whose OKS clears the threshold."""
    return map_from_table(oks_table(gt, det, params))


def similarity_to_reference(frames, reference, embedder: Embedder) -> float:
    frames = list(frames)
    if not frames:
        raise ContractError("no frames to compare")
    ref = embedder.embed(reference)
    return float(np.mean([float(embedder.embed(f) @ ref) for f in frames]))


def harmonic_mean(dino: float, map_: float) -> float:
    if dino < 0 or map_ < 0:
        raise ContractError("harmonic mean inputs must be non-negative")
    if dino + map_ == 0:
        return 0.0
    return 2.0 * dino * map_ / (dino + map_)


@dataclass
class EvalReport:
    clip_i: float
    dino: float
    map: float
    h: float
    per_frame_oks: list[list[float | None]]
    frame_errors: dict[int, str] = field(default_factory=dict)
    keypoint_error: float | None = None  # mean pixel distance of detected keypoints
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "clip_i": self.clip_i,
            "dino": self.dino,
            "map": self.map,
            "h": self.h,
            "keypoint_error": self.keypoint_error,
            "per_frame_oks": self.per_frame_oks,
            "frame_errors": {str(k): v for k, v in self.frame_errors.items()},
            **self.extra,
        }


def keypoint_error(gt_frames, det_frames) -> float | None:
    """Mean distance over keypoints visible in both ground truth and detection."""
    dists = []
    for g_frame, d_frame in zip(gt_frames, det_frames):
        by_id = {p.person_id: p for p in d_frame}
        for g in g_frame:
            d = by_id.get(g.person_id)
            if d is None:
                continue
            both = g.visible & d.visible
            dists.extend(np.linalg.norm(g.xy[both] - d.xy[both], axis=1))
    return float(np.mean(dists)) if dists else None


def evaluate(
    frames,
    reference,
    gt_poses,
    detector: Callable[[np.ndarray, list[int]], list[PoseSkeleton]],
    embedders: dict[str, Embedder],
    params: OKSParams | None = None,
) -> EvalReport:
    """Detect poses in ``frames`` and score them against ``gt_poses`` and ``reference``.

    ``detector(image, person_ids)`` returns the detected skeletons of the
    persons the ground truth expects. ``embedders`` maps ``"clip_i"`` and ``"dino"`` to embedders. A frame whose OKS
    is undefined is recorded in ``frame_errors`` with ``None`` entries and left
    out of the precision average.
    """
    frames = list(frames)
    gt = _sequence(gt_poses)
    if len(frames) != len(gt):
        raise ContractError(f"{len(frames)} frames but {len(gt)} ground-truth poses")
    missing = {"clip_i", "dino"} - set(embedders)
    if missing:
        raise ContractError(f"missing embedders: {sorted(missing)}")
    det_frames = [detector(f, [p.person_id for p in g]) for f, g in zip(frames, gt.frames)]
    table: list[list[float | None]] = []
    errors: dict[int, str] = {}
    scored = []
    for i, (g, d) in enumerate(zip(gt.frames, det_frames)):
        try:
            row = oks_table([g], [d], params)[0].tolist()
            scored.extend(row)
        except UndefinedOKSError as exc:
            errors[i] = str(exc)
            row = [None] * len(g)
        table.append(row)
    map_ = map_from_table(scored) if scored else 0.0
    clip_i = similarity_to_reference(frames, reference, embedders["clip_i"])
    dino = similarity_to_reference(frames, reference, embedders["dino"])
    return EvalReport(
        clip_i=clip_i,
        dino=dino,
        map=map_,
        h=harmonic_mean(max(dino, 0.0), map_),
        per_frame_oks=table,
        frame_errors=errors,
        keypoint_error=keypoint_error(gt.frames, det_frames),
    )


def toy_detector(image, person_ids) -> list[PoseSkeleton]:
    """Marker detector for toy frames; person ``i`` wears the markers of appearance slot ``i``."""
    ids = [int(i) for i in person_ids]
    return detect_toy_keypoints(image, len(ids), slots=ids)


def default_embedders() -> dict[str, Embedder]:
    return {"clip_i": RandomProjectionEmbedder(name="clip_i-toy"), "dino": PixelEmbedder(name="dino-toy")}


def write_report(path, report: EvalReport, config: dict) -> Path:
    """JSON report with the four metrics, the per-frame OKS table and a config digest."""
    return write_json(path, {**report.to_dict(), "config_digest": config_digest(config)})

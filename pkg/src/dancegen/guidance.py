"""Consistency-guided sampling: background and keypoint costs, keypoint assignment, frame loop."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compose import save_image
from .diffusion import GuidanceConfig, NoiseSchedule, cfg_epsilon, guided_reverse_step, tweedie_estimate
from .errors import ContractError, DanceGenError, NumericalError
from .inversion import TimestepEmbeddings, _check_compatible
from .pose import PoseSkeleton, rasterize_pose
from .serialization import config_digest, write_json


def default_patch_radius(canvas: tuple[int, int]) -> int:
    """One pixel per 16 pixels of the shorter canvas side."""
    return max(1, round(min(canvas) / 16))


@dataclass
class ConsistencyTarget:
    reference_image: np.ndarray  # (H, W, 3)
    background_mask: np.ndarray  # (H, W), 1 on background
    keypoint_patch_radius: int
    reference_poses: list[PoseSkeleton]

    def __post_init__(self):
        self.reference_image = np.asarray(self.reference_image, dtype=np.float64)
        self.background_mask = (np.asarray(self.background_mask) > 0.5).astype(np.float64)
        if self.background_mask.shape != self.reference_image.shape[:2]:
            raise ContractError(
                f"background mask {self.background_mask.shape} does not match image {self.reference_image.shape[:2]}"
            )
        if self.keypoint_patch_radius < 0:
            raise ContractError("keypoint patch radius must be non-negative")

    @classmethod
    def from_scene(cls, scene, patch_radius: int | None = None) -> "ConsistencyTarget":
        h, w = scene.image.shape[:2]
        r = default_patch_radius((w, h)) if patch_radius is None else patch_radius
        return cls(scene.image, scene.background_mask, r, list(scene.poses))


@dataclass
class FrameJob:
    target_poses: list[list[PoseSkeleton]]  # one list of persons per frame
    start_latent: np.ndarray
    embeddings: TimestepEmbeddings
    config: GuidanceConfig = field(default_factory=GuidanceConfig)

    def __post_init__(self):
        if not self.target_poses:
            raise ContractError("a frame job needs at least one frame")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape {a.shape} vs {b.shape}")


def background_cost(estimate, target: ConsistencyTarget) -> float:
    estimate = np.asarray(estimate, dtype=np.float64)
    _same_shape(estimate, target.reference_image, "background_cost")
    d = (target.reference_image - estimate) * target.background_mask[..., None]
    return float(np.sum(d * d))


def assign_keypoint_values(target: ConsistencyTarget, target_poses: list[PoseSkeleton]):
    """Copy reference patches around each keypoint to the matching target keypoint.

    Returns ``(assigned, mask)``; ``assigned`` is zero off the mask. Persons are
    written in list order so later persons win where patches overlap.
    """
    ref = target.reference_image
    h, w = ref.shape[:2]
    r = target.keypoint_patch_radius
    by_id = {p.person_id: p for p in target.reference_poses}
    assigned = np.zeros_like(ref)
    mask = np.zeros((h, w))
    for pose in target_poses:
        if pose.person_id not in by_id:
            raise ContractError(f"person id {pose.person_id} is not in the reference")
        src = by_id[pose.person_id]
        both = src.visible & pose.visible
        for k in np.flatnonzero(both):
            sx, sy = np.rint(src.xy[k]).astype(int)
            tx, ty = np.rint(pose.xy[k]).astype(int)
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if 0 <= sy + dy < h and 0 <= sx + dx < w and 0 <= ty + dy < h and 0 <= tx + dx < w:
                        assigned[ty + dy, tx + dx] = ref[sy + dy, sx + dx]
                        mask[ty + dy, tx + dx] = 1.0
    return assigned, mask


def keypoint_cost(estimate, assigned, m_kp) -> float:
    estimate = np.asarray(estimate, dtype=np.float64)
    assigned = np.asarray(assigned, dtype=np.float64)
    m_kp = np.asarray(m_kp, dtype=np.float64)
    _same_shape(estimate, assigned, "keypoint_cost")
    if m_kp.shape != estimate.shape[:2]:
        raise ContractError(f"keypoint_cost: mask {m_kp.shape} vs image {estimate.shape[:2]}")
    d = (assigned - estimate) * m_kp[..., None]
    return float(np.sum(d * d))


@dataclass
class FrameCost:
    """Weighted consistency cost for one target frame, with its image-space gradient."""

    target: ConsistencyTarget
    assigned: np.ndarray
    keypoint_mask: np.ndarray
    background_weight: float
    keypoint_weight: float

    @classmethod
    def build(cls, target: ConsistencyTarget, target_poses, config: GuidanceConfig) -> "FrameCost":
        assigned, m_kp = assign_keypoint_values(target, target_poses)
        return cls(target, assigned, m_kp, config.background_weight, config.keypoint_weight)

    def terms(self, image) -> tuple[float, float]:
        return background_cost(image, self.target), keypoint_cost(image, self.assigned, self.keypoint_mask)

    def value(self, image) -> float:
        bg, kp = self.terms(image)
        return self.background_weight * bg + self.keypoint_weight * kp

    def gradient(self, image) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        g = 2.0 * self.background_weight * self.target.background_mask[..., None] * (image - self.target.reference_image)
        g += 2.0 * self.keypoint_weight * self.keypoint_mask[..., None] * (image - self.assigned)
        return g

    @property
    def active(self) -> bool:
        return (self.background_weight > 0 and self.target.background_mask.any()) or (
            self.keypoint_weight > 0 and self.keypoint_mask.any()
        )


def _cfg_eps(backend, z, t, null, cond, control, w):
    return cfg_epsilon(backend.predict(z, t, cond, control), backend.predict(z, t, null, control), w)


def guidance_gradient(z, t, eps, null, cond, control, cost: FrameCost, backend, autoencoder, schedule, config):
    """``(L, dL/dz_t)`` through the Tweedie estimate, the decoder and the cost.

    With ``config.guidance_gradient == "fixed-eps"`` the noise prediction is a
    constant; ``"full"`` also back-propagates through both CFG branches.
    """
    x0 = tweedie_estimate(z, eps, schedule, t)
    image = autoencoder.decode(x0)
    L = cost.value(image)
    if not np.isfinite(L):
        raise NumericalError(f"non-finite consistency cost at t={t}")
    g_x0 = autoencoder.decode_vjp(x0, cost.gradient(image))
    ab = schedule.alpha_bar(t)
    grad = g_x0 / np.sqrt(ab)
    if config.guidance_gradient == "full":
        k = -np.sqrt(1.0 - ab) / np.sqrt(ab)
        w = config.guidance_scale
        gz_c, _ = backend.vjp(z, t, cond, control, k * w * g_x0)
        gz_u, _ = backend.vjp(z, t, null, control, k * (1.0 - w) * g_x0)
        grad = grad + gz_c + gz_u
    return L, grad


def generate_frame(
    start_latent,
    embeddings: TimestepEmbeddings,
    control,
    target: ConsistencyTarget,
    target_poses,
    backend,
    autoencoder,
    schedule: NoiseSchedule,
    config: GuidanceConfig | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Sample one frame from ``start_latent`` under ``control`` with consistency guidance.

    Guidance is skipped at a timestep when both weights are zero or the cost is
    below ``config.loss_floor``. ``trace`` (if given) receives ``(t, L)`` pairs.
    """
    config = config or GuidanceConfig()
    _check_compatible(backend, schedule)
    if embeddings.num_steps != schedule.num_steps:
        raise ContractError(f"embeddings cover {embeddings.num_steps} steps, schedule has {schedule.num_steps}")
    cost = FrameCost.build(target, target_poses, config)
    guided = cost.active
    if guided:
        backend.require_gradients()
    z = np.asarray(start_latent, dtype=np.float64)
    w = config.guidance_scale
    for t in range(schedule.num_steps, 0, -1):
        null, cond = embeddings.unconditional[t - 1], embeddings.conditional[t - 1]
        eps = _cfg_eps(backend, z, t, null, cond, control, w)
        L, grad = 0.0, np.zeros_like(z)
        if guided:
            L, grad = guidance_gradient(z, t, eps, null, cond, control, cost, backend, autoencoder, schedule, config)
            if trace is not None:
                trace.append((t, L))
            if L < config.loss_floor:
                grad = np.zeros_like(z)
        z = guided_reverse_step(z, eps, grad, L, schedule, t, config)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"latent became non-finite at t={t}")
    return autoencoder.decode(z)


def generate_video(
    job: FrameJob, target: ConsistencyTarget, backend, autoencoder, schedule: NoiseSchedule, workers: int = 1
) -> list:
    """Generate every frame of ``job`` from the shared start latent and embeddings.

    Frames are independent, so ``workers > 1`` runs them on a thread pool; the
    output order always follows ``job.target_poses``.
    """
    h, w = backend.latent_shape[-2:]

    def one(i, poses):
        try:
            control = rasterize_pose(poses, (w, h))
            return generate_frame(
                job.start_latent, job.embeddings, control, target, poses, backend, autoencoder, schedule, job.config
            )
        except DanceGenError as exc:
            raise type(exc)(f"frame {i}: {exc}") from exc

    if workers <= 1:
        return [one(i, p) for i, p in enumerate(job.target_poses)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(job.target_poses)), job.target_poses))


def write_video(directory, frames, fps: float, config: dict) -> Path:
    """Write ``frame_0000.png`` ... plus ``video.json`` (frame count, fps, config digest)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(frames):
        name = f"frame_{i:04d}.png"
        save_image(directory / name, frame)
        names.append(name)
    manifest = {
        "num_frames": len(frames),
        "fps": fps,
        "frames": names,
        "config_digest": config_digest(config),
        "config": config,
    }
    return write_json(directory / "video.json", manifest)

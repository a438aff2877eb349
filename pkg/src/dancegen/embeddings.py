"""Generalizable per-timestep text embeddings learned from augmented scenes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compose import ComposedScene
from .diffusion import GuidanceConfig, NoiseSchedule, ddim_coefficients
from .errors import ContractError, DanceGenError
from .inversion import InversionTrajectory, StepLoss, TimestepEmbeddings, make_optimizer, pose_aware_invert
from .pose import rasterize_pose


@dataclass
class GeneralizationBatch:
    reference: InversionTrajectory
    augmented: list[InversionTrajectory]

    def __post_init__(self):
        T = self.reference.num_steps
        shape = np.shape(self.reference.control)
        for i, tr in enumerate(self.augmented):
            if tr.num_steps != T:
                raise ContractError(f"augmented trajectory {i} has {tr.num_steps} steps, expected {T}")
            if np.shape(tr.control) != shape:
                raise ContractError(f"augmented trajectory {i} has a different control-map shape")

    @property
    def shared_start(self) -> np.ndarray:
        return self.reference.latents[-1]


def control_for(scene: ComposedScene, latent_shape) -> np.ndarray:
    """Control map of a scene at latent resolution (``latent_shape = (C, h, w)``)."""
    return rasterize_pose(scene.poses, (latent_shape[-1], latent_shape[-2]))


def invert_augmented(scenes, c, backend, autoencoder, schedule: NoiseSchedule) -> list[InversionTrajectory]:
    """Pose-aware inversion of every augmented scene under its own control map."""
    out = []
    for i, scene in enumerate(scenes):
        try:
            control = control_for(scene, backend.latent_shape)
            out.append(pose_aware_invert(scene.image, c, control, backend, autoencoder, schedule))
        except DanceGenError as exc:
            raise type(exc)(f"augmented scene {i}: {exc}") from exc
    return out


class JointObjective:
    """Reference plus weighted generalization pivot distances at one timestep.

    Branch 0 is the reference; branches ``1..M`` are augmentations, weighted
    ``lambda1 / M`` each. All branches share the same ``(null, cond)`` pair.
    """

    def __init__(self, backend, z_hat, controls, targets, t, schedule, guidance_scale, generalization_weight):
        self.a, self.b = ddim_coefficients(schedule, t, t - 1)
        self.w = guidance_scale
        self.z_hat = z_hat
        self.targets = targets
        M = len(targets) - 1
        self.weights = np.array([1.0] + [generalization_weight / M] * M) if M else np.array([1.0])
        self.bound = backend.bind(z_hat, t, controls)

    def residuals(self, null, cond):
        eps_c = self.bound.predict(cond)
        eps_u = self.bound.predict(null)
        pred = self.a * self.z_hat + self.b * (self.w * eps_c + (1.0 - self.w) * eps_u)
        return pred - self.targets

    def terms(self, r) -> np.ndarray:
        """Per-branch squared pivot distance, averaged over latent elements."""
        return np.mean(r.reshape(len(r), -1) ** 2, axis=1)

    def value(self, r) -> float:
        return float(self.weights @ self.terms(r))

    def split(self, r) -> tuple[float, float]:
        """``(L_ref, L_gen)`` with ``L_gen`` already multiplied by its weight."""
        terms = self.terms(r)
        return float(terms[0]), float(self.weights[1:] @ terms[1:])

    def gradients(self, null, cond, r):
        cot = 2.0 * self.b * self.weights.reshape((-1,) + (1,) * (r.ndim - 1)) * r / r[0].size
        g_cond = self.bound.embedding_vjp(cond, self.w * cot)
        g_null = self.bound.embedding_vjp(null, (1.0 - self.w) * cot)
        return g_null, g_cond


def optimize_generalizable(
    batch: GeneralizationBatch,
    c_init,
    backend,
    schedule: NoiseSchedule,
    config: GuidanceConfig | None = None,
    null_init: TimestepEmbeddings | None = None,
) -> TimestepEmbeddings:
    """Jointly optimize ``(null_t, cond_t)`` over the reference and augmented pivots.

    Every branch's running latent starts at the reference endpoint ``z_T^r``;
    each branch is pulled toward its own inversion pivots. The unconditional
    embedding starts from ``null_init`` (per timestep) when given, otherwise it
    is warm-started across timesteps from the empty embedding. The conditional
    embedding is warm-started from ``c_init`` or reset to it each timestep when
    ``config.cond_init == "prompt"``.
    """
    config = config or GuidanceConfig()
    backend.require_gradients()
    trajs = [batch.reference] + list(batch.augmented)
    T = batch.reference.num_steps
    if T != schedule.num_steps:
        raise ContractError("trajectory length does not match the schedule")
    c_init = np.asarray(c_init, dtype=np.float64)
    controls = np.stack([tr.control for tr in trajs])
    z_hat = np.stack([batch.shared_start] * len(trajs))
    null = backend.empty_embedding()
    cond = c_init.copy()
    uncond_out = np.zeros((T, c_init.size))
    cond_out = np.zeros((T, c_init.size))
    history = []
    for t in range(T, 0, -1):
        targets = np.stack([tr.latents[t - 1] for tr in trajs])
        obj = JointObjective(
            backend, z_hat, controls, targets, t, schedule, config.guidance_scale, config.generalization_weight
        )
        if null_init is not None:
            null = null_init.unconditional[t - 1].copy()
        if config.cond_init == "prompt":
            cond = c_init.copy()
        opt_null = make_optimizer(config.gen_optimizer, config.gen_lr)
        opt_cond = make_optimizer(config.gen_optimizer, config.gen_lr)
        r = obj.residuals(null, cond)
        losses = [obj.value(r)]
        for _ in range(config.gen_iters):
            g_null, g_cond = obj.gradients(null, cond, r)
            null = opt_null.step(null, g_null)
            cond = opt_cond.step(cond, g_cond)
            r = obj.residuals(null, cond)
            losses.append(obj.value(r))
        ref, gen = obj.split(r)
        history.append(StepLoss(t, losses[0], losses[-1], losses, {"ref": ref, "gen": gen}))
        uncond_out[t - 1] = null
        cond_out[t - 1] = cond
        z_hat = r + targets
    return TimestepEmbeddings(uncond_out, cond_out, "generalizable", history)

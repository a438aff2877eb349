"""Pose-aware DDIM inversion and per-timestep null-text optimization."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import GuidanceConfig, NoiseSchedule, cfg_epsilon, ddim_coefficients, ddim_invert_step
from .errors import ContractError, FormatError

MODES = ("null-only", "generalizable")


@dataclass
class InversionTrajectory:
    latents: list[np.ndarray]  # z_0 .. z_T
    control: np.ndarray | None
    text_embedding: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.latents) - 1

    @property
    def start(self) -> np.ndarray:
        return self.latents[-1]


@dataclass
class StepLoss:
    t: int
    start: float
    end: float
    iterations: list[float] = field(default_factory=list)
    terms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"t": self.t, "start": self.start, "end": self.end, **self.terms}


@dataclass
class TimestepEmbeddings:
    unconditional: np.ndarray  # (T, E); row t-1 belongs to sampler index t
    conditional: np.ndarray  # (T, E)
    mode: str = "null-only"
    history: list[StepLoss] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.unconditional = np.asarray(self.unconditional, dtype=np.float64)
        self.conditional = np.asarray(self.conditional, dtype=np.float64)
        if self.unconditional.shape != self.conditional.shape or self.unconditional.ndim != 2:
            raise ContractError("unconditional and conditional embeddings must both be (T, E)")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        if not (np.all(np.isfinite(self.unconditional)) and np.all(np.isfinite(self.conditional))):
            raise ContractError("embeddings must be finite")

    @property
    def num_steps(self) -> int:
        return self.unconditional.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.unconditional.shape[1]

    @classmethod
    def constant(cls, null, cond, num_steps: int, mode: str = "null-only") -> "TimestepEmbeddings":
        return cls(np.tile(null, (num_steps, 1)), np.tile(cond, (num_steps, 1)), mode)


def _check_compatible(backend, schedule: NoiseSchedule) -> None:
    own = getattr(backend, "schedule", None)
    if own is not None and not own.same_as(schedule):
        raise ContractError("backend was built for a different noise schedule")


def pose_aware_invert(
    x0, c, control, backend, autoencoder, schedule: NoiseSchedule, fixed_point_iters: int = 0
) -> InversionTrajectory:
    """Map an image to its noisy-latent trajectory with control-conditioned DDIM inversion.

    The move from level ``t`` to ``t+1`` uses the conditional prediction made at
    the destination level, ``eps(z_t, t+1, c, control)``, so the clean level is
    never queried. No classifier-free guidance is applied.

    ``fixed_point_iters > 0`` re-evaluates the prediction at the proposed
    ``z_{t+1}`` that many times, which converges to the exact inverse of the
    DDIM sampling step. Plain inversion (the default) leaves a discretization
    gap but keeps the endpoint noise-like on learned backends; refinement
    closes the gap at the cost of an over-dispersed endpoint.
    """
    if fixed_point_iters < 0:
        raise ContractError("fixed_point_iters must be >= 0")
    _check_compatible(backend, schedule)
    z = autoencoder.encode(x0)
    if tuple(z.shape) != tuple(backend.latent_shape):
        raise ContractError(f"latent shape {z.shape} does not match backend {backend.latent_shape}")
    c = np.asarray(c, dtype=np.float64)
    latents = [z]
    for t in range(schedule.num_steps):
        z = latents[-1]
        nxt = ddim_invert_step(z, backend.predict(z, t + 1, c, control), schedule, t)
        for _ in range(fixed_point_iters):
            nxt = ddim_invert_step(z, backend.predict(nxt, t + 1, c, control), schedule, t)
        latents.append(nxt)
    return InversionTrajectory(latents, control, c)


def cfg_step(backend, z, t, null, cond, control, schedule, guidance_scale):
    """Classifier-free DDIM step ``z_t -> z_{t-1}``."""
    a, b = ddim_coefficients(schedule, t, t - 1)
    eps_c = backend.predict(z, t, cond, control)
    eps_u = backend.predict(z, t, null, control)
    return a * z + b * cfg_epsilon(eps_c, eps_u, guidance_scale)


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.k = 0

    def step(self, x, g):
        if self.m is None:
            self.m, self.v = np.zeros_like(g), np.zeros_like(g)
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.k)
        vhat = self.v / (1 - self.b2**self.k)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _GD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, x, g):
        return x - self.lr * g


def make_optimizer(kind: str, lr: float):
    return _Adam(lr) if kind == "adam" else _GD(lr)


def optimize_null_text(
    traj: InversionTrajectory, backend, schedule: NoiseSchedule, config: GuidanceConfig | None = None
) -> TimestepEmbeddings:
    """Optimize one unconditional embedding per timestep so guided DDIM retraces ``traj``.

    For ``t = T..1`` the unconditional embedding (warm-started from the previous
    timestep, initially the backend's empty embedding) is moved for
    ``null_iters`` iterations to minimize ``||z_{t-1}^r - step(z_hat_t)||^2``
    (taken per latent element, so learning rates do not depend on resolution);
    the running latent ``z_hat`` then advances with the optimized embedding.
    The per-timestep losses land in ``history``.
    """
    config = config or GuidanceConfig()
    backend.require_gradients()
    _check_compatible(backend, schedule)
    T = traj.num_steps
    if T != schedule.num_steps:
        raise ContractError("trajectory length does not match the schedule")
    w = config.guidance_scale
    c = traj.text_embedding
    null = backend.empty_embedding()
    uncond = np.zeros((T, null.size))
    history = []
    z_hat = traj.latents[T]
    for t in range(T, 0, -1):
        target = traj.latents[t - 1]
        a, b = ddim_coefficients(schedule, t, t - 1)
        bound = backend.bind(z_hat, t, traj.control)
        base = a * z_hat + b * w * bound.predict(c)

        def residual(e):
            return base + b * (1.0 - w) * bound.predict(e) - target

        opt = make_optimizer(config.optimizer, config.null_lr)
        r = residual(null)
        losses = [float(np.mean(r * r))]
        for _ in range(config.null_iters):
            grad = bound.embedding_vjp(null, 2.0 * b * (1.0 - w) * r / r.size)
            null = opt.step(null, grad)
            r = residual(null)
            losses.append(float(np.mean(r * r)))
        uncond[t - 1] = null
        history.append(StepLoss(t, losses[0], losses[-1], losses))
        z_hat = r + target
    return TimestepEmbeddings(uncond, np.tile(c, (T, 1)), "null-only", history)


def sample_loop(z_T, embeddings: TimestepEmbeddings, control, backend, schedule: NoiseSchedule, guidance_scale: float):
    """Guided DDIM sampling from ``z_T`` with per-timestep embeddings; returns ``z_0``."""
    T = schedule.num_steps
    if embeddings.num_steps != T:
        raise ContractError(f"embeddings cover {embeddings.num_steps} steps, schedule has {T}")
    z = np.asarray(z_T, dtype=np.float64)
    for t in range(T, 0, -1):
        z = cfg_step(
            backend, z, t, embeddings.unconditional[t - 1], embeddings.conditional[t - 1],
            control, schedule, guidance_scale,
        )  # fmt: skip
    return z


def reconstruct(z_T, embeddings: TimestepEmbeddings, control, backend, autoencoder, schedule: NoiseSchedule, config: GuidanceConfig | None = None):
    """Decode the guided DDIM sample obtained from ``z_T``."""
    config = config or GuidanceConfig()
    _check_compatible(backend, schedule)
    z0 = sample_loop(z_T, embeddings, control, backend, schedule, config.guidance_scale)
    return autoencoder.decode(z0)


# --- embeddings file -------------------------------------------------------

EMBEDDINGS_MAGIC = b"DGEMBED\x00"
EMBEDDINGS_VERSION = 1
EMBEDDINGS_HEADER = struct.Struct("<8sIIII")


def embeddings_file_size(num_steps: int, embedding_dim: int) -> int:
    return EMBEDDINGS_HEADER.size + 2 * num_steps * embedding_dim * 4


def save_embeddings(path, emb: TimestepEmbeddings) -> None:
    """Header (magic, version, T, E, mode) then T unconditional and T conditional float32 rows."""
    header = EMBEDDINGS_HEADER.pack(
        EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION, emb.num_steps, emb.embedding_dim, MODES.index(emb.mode)
    )
    body = np.concatenate([emb.unconditional.reshape(-1), emb.conditional.reshape(-1)]).astype("<f4")
    Path(path).write_bytes(header + body.tobytes())


def load_embeddings(path) -> TimestepEmbeddings:
    data = Path(path).read_bytes()
    if len(data) < EMBEDDINGS_HEADER.size:
        raise FormatError(f"{path}: truncated embeddings file")
    magic, version, T, E, mode = EMBEDDINGS_HEADER.unpack_from(data)
    if magic != EMBEDDINGS_MAGIC:
        raise FormatError(f"{path}: not an embeddings file")
    if version != EMBEDDINGS_VERSION:
        raise FormatError(f"{path}: unsupported embeddings version {version}")
    if len(data) != embeddings_file_size(T, E):
        raise FormatError(f"{path}: size {len(data)} does not match T={T}, E={E}")
    if mode >= len(MODES):
        raise FormatError(f"{path}: unknown mode flag {mode}")
    vals = np.frombuffer(data, dtype="<f4", offset=EMBEDDINGS_HEADER.size).astype(np.float64)
    return TimestepEmbeddings(vals[: T * E].reshape(T, E), vals[T * E :].reshape(T, E), MODES[mode])

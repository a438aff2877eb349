"""Deterministic diffusion arithmetic.

Index convention: sampler indices run ``t = 1..T``; ``cumulative_alpha[0] == 1``
stands for clean data. ``cumulative_alpha`` is the running product of the
per-step alphas, so the DDIM steps below use the cumulative value everywhere and
the DDPM-mean step uses the per-step ratio ``alpha_t = abar_t / abar_{t-1}``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, GuidanceError, RangeError, SingularityError

TRAINING_STEPS = 1000
PROFILES = ("scaled-linear-1000-subsampled", "linear-toy")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    num_steps: int
    per_step_alpha: np.ndarray  # length T; entry t-1 belongs to sampler index t
    cumulative_alpha: np.ndarray  # length T+1; entry 0 is the clean level
    timestep_map: np.ndarray  # length T; training timestep of sampler index t
    profile: str = "custom"

    def __post_init__(self):
        T = int(self.num_steps)
        if T < 1:
            raise ConfigurationError("num_steps must be >= 1")
        if self.per_step_alpha.shape != (T,) or self.cumulative_alpha.shape != (T + 1,):
            raise ConfigurationError("schedule arrays have inconsistent lengths")
        if not np.all(self.cumulative_alpha > 0) or not np.all(self.per_step_alpha > 0):
            raise ConfigurationError("schedule coefficients must be strictly positive")

    def alpha_bar(self, t: int) -> float:
        return float(self.cumulative_alpha[t])

    def alpha(self, t: int) -> float:
        """Per-step ratio abar_t / abar_{t-1} for sampler index t >= 1."""
        return float(self.per_step_alpha[t - 1])

    def same_as(self, other: "NoiseSchedule") -> bool:
        return self.num_steps == other.num_steps and np.array_equal(
            self.cumulative_alpha, other.cumulative_alpha
        )

    def describe(self) -> dict:
        return {"profile": self.profile, "num_steps": int(self.num_steps)}


def _training_betas(profile: str) -> np.ndarray:
    if profile == "scaled-linear-1000-subsampled":
        return np.linspace(0.00085**0.5, 0.012**0.5, TRAINING_STEPS, dtype=np.float64) ** 2
    if profile == "linear-toy":
        return np.linspace(1e-4, 0.02, TRAINING_STEPS, dtype=np.float64)
    raise ConfigurationError(f"unknown schedule profile {profile!r}; expected one of {PROFILES}")


def make_schedule(num_steps: int, profile: str = "scaled-linear-1000-subsampled") -> NoiseSchedule:
    """Build a ``num_steps``-step sampler schedule over a 1000-step training grid.

    Sampler indices are spaced so that index ``T`` always lands on the last
    training timestep (fully noised); ``T = 1000`` reproduces the full grid.
    """
    betas = _training_betas(profile)
    num_steps = int(num_steps)
    if num_steps < 1:
        raise ConfigurationError("num_steps must be >= 1")
    if num_steps > TRAINING_STEPS:
        raise RangeError(f"num_steps={num_steps} exceeds the {TRAINING_STEPS}-step training grid")
    abar_train = np.cumprod(1.0 - betas)
    ratio = TRAINING_STEPS / num_steps
    timesteps = np.round(np.arange(1, num_steps + 1) * ratio).astype(np.int64) - 1
    cumulative = np.concatenate([[1.0], abar_train[timesteps]])
    per_step = cumulative[1:] / cumulative[:-1]
    return NoiseSchedule(num_steps, per_step, cumulative, timesteps, profile)


@dataclass
class GuidanceConfig:
    """Optimization and sampling hyper-parameters.

    Defaults are the published operating point; the trailing fields select
    implementation variants and are not part of that operating point.
    """

    guidance_scale: float = 7.5
    base_step_size: float = 10.0
    generalization_weight: float = 1.0
    background_weight: float = 100.0
    keypoint_weight: float = 2000.0
    num_augmented: int = 16
    null_lr: float = 0.01
    null_iters: int = 50
    gen_lr: float = 0.1
    gen_iters: int = 100
    num_steps: int = 50
    optimizer: str = "adam"  # null-text stage: "adam" | "gd"
    gen_optimizer: str = "gd"  # generalizable stage: "gd" | "adam"
    cond_init: str = "warm-start"  # "warm-start" | "prompt"
    guidance_gradient: str = "full"  # "full" | "fixed-eps"
    reverse_step: str = "ddim"  # "ddim" | "ddpm-mean"
    loss_floor: float = 1e-8
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        checks = {
            "guidance_scale": self.guidance_scale >= 0,
            "base_step_size": self.base_step_size > 0,
            "generalization_weight": self.generalization_weight >= 0,
            "background_weight": self.background_weight >= 0,
            "keypoint_weight": self.keypoint_weight >= 0,
            "num_augmented": self.num_augmented >= 0,
            "null_lr": self.null_lr > 0,
            "null_iters": self.null_iters >= 0,
            "gen_lr": self.gen_lr > 0,
            "gen_iters": self.gen_iters >= 0,
            "num_steps": self.num_steps >= 1,
            "optimizer": self.optimizer in ("gd", "adam"),
            "gen_optimizer": self.gen_optimizer in ("gd", "adam"),
            "cond_init": self.cond_init in ("warm-start", "prompt"),
            "guidance_gradient": self.guidance_gradient in ("fixed-eps", "full"),
            "reverse_step": self.reverse_step in ("ddim", "ddpm-mean"),
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ConfigurationError(f"invalid guidance config field(s): {', '.join(bad)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GuidanceConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown guidance config keys: {sorted(unknown)}")
        return cls(**data)


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ContractError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def cfg_epsilon(eps_cond, eps_uncond, guidance_scale: float) -> np.ndarray:
    """Classifier-free combination ``w * eps_cond + (1 - w) * eps_uncond``."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    _check_shapes(eps_cond, eps_uncond, "cfg_epsilon")
    return guidance_scale * eps_cond + (1.0 - guidance_scale) * eps_uncond


def ddim_coefficients(schedule: NoiseSchedule, t_from: int, t_to: int) -> tuple[float, float]:
    """Return ``(a, b)`` with ``z_to = a * z_from + b * eps`` for a DDIM move.

    ``b = sqrt(ab_to) * (sqrt(1/ab_to - 1) - sqrt(1/ab_from - 1))``, which keeps the
    move consistent with re-noising the Tweedie estimate at the destination level.
    """
    ab_from = schedule.cumulative_alpha[t_from]
    ab_to = schedule.cumulative_alpha[t_to]
    a = np.sqrt(ab_to / ab_from)
    b = np.sqrt(ab_to) * (np.sqrt(1.0 / ab_to - 1.0) - np.sqrt(1.0 / ab_from - 1.0))
    return float(a), float(b)


def ddim_invert_step(z_t, eps_hat, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """Move a latent from level ``t`` to ``t + 1`` along the DDIM ODE."""
    if not 0 <= t < schedule.num_steps:
        raise RangeError(f"inversion step t={t} outside [0, {schedule.num_steps})")
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_shapes(z_t, eps_hat, "ddim_invert_step")
    a, b = ddim_coefficients(schedule, t, t + 1)
    return a * z_t + b * eps_hat


def ddim_sample_step(z_t, eps_hat, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """Move a latent from level ``t`` to ``t - 1`` along the DDIM ODE."""
    if not 1 <= t <= schedule.num_steps:
        raise RangeError(f"sampling step t={t} outside [1, {schedule.num_steps}]")
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_shapes(z_t, eps_hat, "ddim_sample_step")
    a, b = ddim_coefficients(schedule, t, t - 1)
    return a * z_t + b * eps_hat


def tweedie_estimate(z_t, eps_hat, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """Clean-latent estimate ``z_t / sqrt(abar) - sqrt(1 - abar) / sqrt(abar) * eps``."""
    if not 0 <= t <= schedule.num_steps:
        raise RangeError(f"t={t} outside [0, {schedule.num_steps}]")
    ab = float(schedule.cumulative_alpha[t])
    if ab <= 0.0:
        raise SingularityError(f"cumulative alpha at t={t} is zero")
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_shapes(z_t, eps_hat, "tweedie_estimate")
    return z_t / np.sqrt(ab) - np.sqrt(1.0 - ab) / np.sqrt(ab) * eps_hat


def ddpm_mean_step(z_t, eps_hat, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """Noise-free DDPM posterior mean ``(z - (1 - a_t) / sqrt(1 - abar_t) eps) / sqrt(a_t)``."""
    if not 1 <= t <= schedule.num_steps:
        raise RangeError(f"sampling step t={t} outside [1, {schedule.num_steps}]")
    a_t = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    if ab >= 1.0:
        raise SingularityError(f"cumulative alpha at t={t} is one")
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_shapes(z_t, eps_hat, "ddpm_mean_step")
    return (z_t - (1.0 - a_t) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a_t)


def guided_step_size(cost_value: float, config: GuidanceConfig) -> float:
    return config.base_step_size / cost_value


def guided_reverse_step(
    z_t,
    eps_hat,
    cost_gradient,
    cost_value: float,
    schedule: NoiseSchedule,
    t: int,
    config: GuidanceConfig,
) -> np.ndarray:
    """One reverse step followed by a cost-gradient correction of size ``delta / L``.

    The base move is chosen by ``config.reverse_step``: ``"ddim"`` (the step the
    embeddings were optimized against) or ``"ddpm-mean"``. No noise is injected.
    """
    cost_gradient = np.asarray(cost_gradient, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_shapes(eps_hat, cost_gradient, "guided_reverse_step")
    if config.reverse_step == "ddim":
        z_prev = ddim_sample_step(z_t, eps_hat, schedule, t)
    else:
        z_prev = ddpm_mean_step(z_t, eps_hat, schedule, t)
    if not np.any(cost_gradient):
        return z_prev
    if not cost_value > 0:
        raise GuidanceError(f"cost value {cost_value} must be positive for a nonzero gradient")
    return z_prev - guided_step_size(cost_value, config) * cost_gradient

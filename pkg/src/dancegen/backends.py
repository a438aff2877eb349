"""Denoiser and autoencoder backends.

A denoiser maps ``(z, t, embedding, control)`` to a noise prediction and exposes
vector-Jacobian products with respect to ``z`` and the embedding. ``t`` is a
sampler index on the backend's own schedule. All inputs may carry one leading
batch dimension.
"""

from __future__ import annotations

import json
import struct
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, make_schedule
from .errors import CapabilityError, ConfigurationError, ContractError, FormatError, SingularityError


class DenoiserBackend(ABC):
    """Noise predictor ``eps(z, t, c, control)``.

    ``gradients`` declares how ``vjp`` is obtained: ``"native"`` (analytic),
    ``"finite-difference"`` (central differences, slow) or ``"none"``.
    """

    latent_shape: tuple[int, ...]
    embedding_dim: int
    schedule: NoiseSchedule
    gradients: str = "native"

    @abstractmethod
    def predict(self, z, t: int, embedding, control=None) -> np.ndarray: ...

    def vjp(self, z, t: int, embedding, control, cotangent) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(d<cot, eps>/dz, d<cot, eps>/d embedding)``."""
        if self.gradients == "finite-difference":
            return _fd_vjp(self, z, t, embedding, control, cotangent)
        raise CapabilityError(f"{type(self).__name__} provides no gradient mechanism")

    def empty_embedding(self) -> np.ndarray:
        return np.zeros(self.embedding_dim)

    def bind(self, z, t: int, control=None) -> "BoundDenoiser":
        """Freeze ``(z, t, control)`` for repeated evaluation at varying embeddings."""
        return BoundDenoiser(self, z, t, control)

    def require_gradients(self) -> None:
        if self.gradients not in ("native", "finite-difference"):
            raise CapabilityError(f"{type(self).__name__} provides no gradient mechanism")


class BoundDenoiser:
    def __init__(self, backend: DenoiserBackend, z, t, control):
        self.backend, self.z, self.t, self.control = backend, z, t, control

    def predict(self, embedding) -> np.ndarray:
        return self.backend.predict(self.z, self.t, embedding, self.control)

    def embedding_vjp(self, embedding, cotangent) -> np.ndarray:
        return self.backend.vjp(self.z, self.t, embedding, self.control, cotangent)[1]


def _fd_vjp(backend, z, t, embedding, control, cotangent, h=1e-5):
    z = np.array(z, dtype=np.float64)
    e = np.array(embedding, dtype=np.float64)
    cot = np.asarray(cotangent, dtype=np.float64)

    def grad(x, f):
        g = np.zeros_like(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = np.sum(cot * f())
            flat[i] = old - h
            down = np.sum(cot * f())
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        return g

    gz = grad(z, lambda: backend.predict(z, t, e, control))
    ge = grad(e, lambda: backend.predict(z, t, e, control))
    return gz, ge


# --- analytic Gaussian world ----------------------------------------------


@dataclass(frozen=True)
class GaussianWorldSpec:
    mean: np.ndarray | float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ConfigurationError("Gaussian world variance must be positive")


def _gaussian_gain(ab: float, variance: float) -> float:
    return np.sqrt(ab) * variance / (ab * variance + 1.0 - ab)


def analytic_gaussian_predict(z, t: int, spec: GaussianWorldSpec, schedule: NoiseSchedule) -> np.ndarray:
    """Optimal noise prediction when clean data ~ N(mean, variance * I)."""
    if not 0 <= t <= schedule.num_steps:
        raise ContractError(f"t={t} outside [0, {schedule.num_steps}]")
    ab = schedule.alpha_bar(t)
    if ab >= 1.0:
        raise SingularityError("the noise prediction is undefined at the clean level (abar = 1)")
    z = np.asarray(z, dtype=np.float64)
    mean = np.asarray(spec.mean, dtype=np.float64)
    m_post = mean + _gaussian_gain(ab, spec.variance) * (z - np.sqrt(ab) * mean)
    return (z - np.sqrt(ab) * m_post) / np.sqrt(1.0 - ab)


def gaussian_posterior_mean(z, t: int, spec: GaussianWorldSpec, schedule: NoiseSchedule) -> np.ndarray:
    """E[x0 | z_t] by Gaussian conditioning, written independently of the predictor."""
    ab = schedule.alpha_bar(t)
    v = spec.variance
    mean = np.asarray(spec.mean, dtype=np.float64)
    # joint Gaussian: cov(x0, z) = sqrt(ab) v, var(z) = ab v + (1 - ab)
    cov_xz = np.sqrt(ab) * v
    var_z = ab * v + (1.0 - ab)
    return mean + cov_xz / var_z * (np.asarray(z) - np.sqrt(ab) * mean)


class AnalyticGaussianBackend(DenoiserBackend):
    """Closed-form denoiser; ignores text and control inputs (zero embedding gradient)."""

    def __init__(self, spec: GaussianWorldSpec, schedule: NoiseSchedule, latent_shape=(1,), embedding_dim: int = 4):
        self.spec = spec
        self.schedule = schedule
        self.latent_shape = tuple(latent_shape)
        self.embedding_dim = int(embedding_dim)

    def predict(self, z, t, embedding=None, control=None):
        return analytic_gaussian_predict(z, t, self.spec, self.schedule)

    def vjp(self, z, t, embedding, control, cotangent):
        ab = self.schedule.alpha_bar(t)
        if ab >= 1.0:
            raise SingularityError("the noise prediction is undefined at the clean level (abar = 1)")
        slope = (1.0 - np.sqrt(ab) * _gaussian_gain(ab, self.spec.variance)) / np.sqrt(1.0 - ab)
        cot = np.asarray(cotangent, dtype=np.float64)
        e = np.asarray(embedding if embedding is not None else self.empty_embedding(), dtype=np.float64)
        if cot.ndim > len(self.latent_shape) and e.ndim == 1:
            e = np.broadcast_to(e, cot.shape[:1] + e.shape)
        return slope * cot, np.zeros_like(e)


# --- autoencoders ----------------------------------------------------------


class IdentityAutoencoder:
    """``(h, w, 3)`` image <-> ``(3, h, w)`` latent without loss."""

    def __init__(self, image_shape=(32, 32, 3)):
        self.image_shape = tuple(image_shape)
        h, w, c = self.image_shape
        self.latent_shape = (c, h, w)

    def encode(self, image) -> np.ndarray:
        x = _check_image(image, self.image_shape)
        return np.ascontiguousarray(np.moveaxis(x, -1, -3))

    def decode(self, z) -> np.ndarray:
        return np.ascontiguousarray(np.moveaxis(np.asarray(z, dtype=np.float64), -3, -1))

    def decode_vjp(self, z, cotangent) -> np.ndarray:
        return np.ascontiguousarray(np.moveaxis(np.asarray(cotangent, dtype=np.float64), -1, -3))

    def describe(self) -> dict:
        return {"kind": "identity", "image_shape": list(self.image_shape)}


class PooledAutoencoder:
    """Average-pool encoder with nearest-neighbour decoder (factor ``k``)."""

    def __init__(self, image_shape=(32, 32, 3), factor: int = 2):
        h, w, c = image_shape
        if h % factor or w % factor:
            raise ConfigurationError("image size must be divisible by the pooling factor")
        self.image_shape = tuple(image_shape)
        self.factor = int(factor)
        self.latent_shape = (c, h // factor, w // factor)

    def encode(self, image) -> np.ndarray:
        x = _check_image(image, self.image_shape)
        k = self.factor
        h, w, c = self.image_shape
        pooled = x.reshape(*x.shape[:-3], h // k, k, w // k, k, c).mean(axis=(-4, -2))
        return np.ascontiguousarray(np.moveaxis(pooled, -1, -3))

    def decode(self, z) -> np.ndarray:
        k = self.factor
        img = np.moveaxis(np.asarray(z, dtype=np.float64), -3, -1)
        return np.repeat(np.repeat(img, k, axis=-3), k, axis=-2)

    def decode_vjp(self, z, cotangent) -> np.ndarray:
        k = self.factor
        g = np.asarray(cotangent, dtype=np.float64)
        h, w, c = self.image_shape
        summed = g.reshape(*g.shape[:-3], h // k, k, w // k, k, c).sum(axis=(-4, -2))
        return np.ascontiguousarray(np.moveaxis(summed, -1, -3))

    def describe(self) -> dict:
        return {"kind": "pooled", "image_shape": list(self.image_shape), "factor": self.factor}


def _check_image(image, shape) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.shape[-3:] != tuple(shape):
        raise ContractError(f"image shape {x.shape} does not end with {tuple(shape)}")
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise ContractError("pixel values must lie in [0, 1]")
    return x


_default_autoencoder = IdentityAutoencoder()


def toy_encode(image) -> np.ndarray:
    return _default_autoencoder.encode(image)


def toy_decode(z) -> np.ndarray:
    return _default_autoencoder.decode(z)


def make_autoencoder(desc: dict):
    if desc.get("kind", "identity") == "identity":
        return IdentityAutoencoder(tuple(desc["image_shape"]))
    if desc["kind"] == "pooled":
        return PooledAutoencoder(tuple(desc["image_shape"]), int(desc.get("factor", 2)))
    raise ConfigurationError(f"unknown autoencoder kind {desc['kind']!r}")


# --- trainable toy denoiser ------------------------------------------------


def _silu(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a))  # overflow-free logistic
    return a * s, s


def _silu_grad(a, s):
    return s * (1.0 + a * (1.0 - s))


def time_features(train_timestep, num_features: int) -> np.ndarray:
    """Sinusoidal features of a training timestep in [0, 1000)."""
    freqs = np.pi * 2.0 ** np.arange(num_features // 2)
    tau = np.asarray(train_timestep, dtype=np.float64) / 1000.0
    ang = np.multiply.outer(tau, freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


PARAM_ORDER = (
    "Wz", "Wp", "Wt", "We", "b1", "W2", "b2", "W3", "b3",
    "V1", "U", "Ut", "c1", "V2", "c2", "mu",
)  # fmt: skip
TRAINABLE = PARAM_ORDER[:-1]


def preconditioning(ab, sigma_data: float):
    """Skip/output/input scalings on the ``z / sqrt(abar)`` scale.

    ``x0 = mu + c_skip (y - mu) + c_out F(c_in (y - mu))`` with ``y = z / sqrt(abar)``
    and noise level ``sigma^2 = (1 - abar) / abar``.
    """
    ab = np.asarray(ab, dtype=np.float64)
    s2 = (1.0 - ab) / ab
    d2 = sigma_data**2
    c_skip = d2 / (s2 + d2)
    c_out = np.sqrt(s2) * sigma_data / np.sqrt(s2 + d2)
    c_in = 1.0 / np.sqrt(s2 + d2)
    return c_skip, c_out, c_in


class ToyDenoiser(DenoiserBackend):
    """Preconditioned clean-latent predictor with a global and a per-pixel pathway.

    The network output ``F`` is the sum of a two-hidden-layer MLP over the whole
    input (latent, control map, time features, plus ``We @ embedding`` in the
    first layer) and a small MLP shared across pixels that sees the control
    channels and latent values at that pixel (plus embedding and time terms).
    ``F`` is mixed with a skip path, ``x0 = mu + c_skip (y - mu) + c_out F``, and
    the noise prediction is ``eps = (z - sqrt(abar) x0) / sqrt(1 - abar)``.
    """

    def __init__(
        self,
        params: dict,
        schedule: NoiseSchedule,
        latent_shape,
        control_shape,
        num_time_features: int,
        sigma_data: float = 0.25,
    ):
        self.params = params
        self.schedule = schedule
        self.latent_shape = tuple(latent_shape)
        self.control_shape = tuple(control_shape)
        if self.latent_shape[1:] != self.control_shape[1:]:
            raise ContractError("control map and latent must share spatial size")
        self.num_time_features = int(num_time_features)
        self.sigma_data = float(sigma_data)
        self.embedding_dim = params["We"].shape[0]
        self.hidden = params["W2"].shape[0]
        self.local_hidden = params["V2"].shape[0]
        self.loss_history: list[float] = []
        self.epoch_losses: list[float] = []
        self.metadata: dict = {}

    @classmethod
    def initialize(
        cls, rng, schedule, latent_shape, control_shape, embedding_dim, hidden, num_time_features,
        x0_mean=None, local_hidden: int = 32, sigma_data: float = 0.25,
    ):  # fmt: skip
        D = int(np.prod(latent_shape))
        P = int(np.prod(control_shape))
        C, G = latent_shape[0], control_shape[0]

        def dense(n_in, n_out, gain=1.0):
            return rng.normal(scale=gain / np.sqrt(n_in), size=(n_in, n_out))

        n_in = D + P + num_time_features + embedding_dim
        params = {
            "Wz": dense(n_in, hidden)[:D],
            "Wp": dense(n_in, hidden)[:P] * 2.0,
            "Wt": dense(num_time_features, hidden) * 0.5,
            "We": dense(embedding_dim, hidden) * 0.5,
            "b1": np.zeros(hidden),
            "W2": dense(hidden, hidden),
            "b2": np.zeros(hidden),
            "W3": dense(hidden, D) * 0.1,
            "b3": np.zeros(D),
            "V1": dense(G + C, local_hidden),
            "U": dense(embedding_dim, local_hidden) * 0.5,
            "Ut": dense(num_time_features, local_hidden) * 0.5,
            "c1": np.zeros(local_hidden),
            "V2": dense(local_hidden, C) * 0.1,
            "c2": np.zeros(C),
            "mu": np.zeros(D) if x0_mean is None else np.asarray(x0_mean, dtype=np.float64).reshape(D),
        }
        return cls(params, schedule, latent_shape, control_shape, num_time_features, sigma_data)

    # -- shapes --
    def _flat(self, z, control):
        z = np.asarray(z, dtype=np.float64)
        batched = z.ndim > len(self.latent_shape)
        zf = z.reshape(-1, int(np.prod(self.latent_shape)))
        if control is None:
            pf = np.zeros((zf.shape[0], int(np.prod(self.control_shape))))
        else:
            pf = np.asarray(control, dtype=np.float64).reshape(-1, int(np.prod(self.control_shape)))
            if pf.shape[0] != zf.shape[0]:
                pf = np.broadcast_to(pf, (zf.shape[0], pf.shape[1]))
        return zf, pf, batched

    def _emb(self, embedding, n):
        e = np.asarray(embedding, dtype=np.float64).reshape(-1, self.embedding_dim)
        if e.shape[0] != n:
            e = np.broadcast_to(e, (n, self.embedding_dim))
        return e

    def _pixels(self, flat, channels):
        n = flat.shape[0]
        return flat.reshape(n, channels, -1).transpose(0, 2, 1)

    def _unpixels(self, pix):
        return pix.transpose(0, 2, 1).reshape(pix.shape[0], -1)

    def _level(self, t):
        ab = self.schedule.alpha_bar(t)
        if ab >= 1.0:
            raise SingularityError("the noise prediction is undefined at the clean level (abar = 1)")
        c_skip, c_out, c_in = preconditioning(ab, self.sigma_data)
        tf = time_features(self.schedule.timestep_map[t - 1], self.num_time_features)
        return {"sa": np.sqrt(ab), "sn": np.sqrt(1.0 - ab), "skip": c_skip, "out": c_out, "in": c_in, "tf": tf}

    # -- forward pieces shared by inference and training --
    def _inputs(self, zf, pf, lv):
        """Scaled network input and the embedding-free pre-activations."""
        p = self.params
        yc = zf / lv["sa"] - p["mu"]
        u = lv["in"] * yc
        base1 = u @ p["Wz"] + pf @ p["Wp"] + (lv["tf"] @ p["Wt"] + p["b1"])
        C, G = self.latent_shape[0], self.control_shape[0]
        pix_in = np.concatenate([self._pixels(pf, G), self._pixels(u, C)], axis=2)
        base_l = pix_in @ p["V1"] + (lv["tf"] @ p["Ut"] + p["c1"])[..., None, :]
        return yc, u, pix_in, base1, base_l

    def _heads(self, a1, bl):
        p = self.params
        h1, s1 = _silu(a1)
        a2 = h1 @ p["W2"] + p["b2"]
        h2, s2 = _silu(a2)
        hl, sl = _silu(bl)
        F = h2 @ p["W3"] + p["b3"] + self._unpixels(hl @ p["V2"] + p["c2"])
        return F, (a1, s1, h1, a2, s2, h2, bl, sl, hl)

    def _heads_vjp(self, cache, gF):
        """Gradients of the heads' input pre-activations given ``dF``."""
        p = self.params
        a1, s1, h1, a2, s2, h2, bl, sl, hl = cache
        g_a2 = (gF @ p["W3"].T) * _silu_grad(a2, s2)
        g_a1 = (g_a2 @ p["W2"].T) * _silu_grad(a1, s1)
        g_pix = self._pixels(gF, self.latent_shape[0])
        g_bl = (g_pix @ p["V2"].T) * _silu_grad(bl, sl)
        return g_a1, g_a2, g_pix, g_bl

    def _x0(self, yc, F, lv):
        return self.params["mu"] + lv["skip"] * yc + lv["out"] * F

    def _forward(self, z, t, embedding, control):
        zf, pf, batched = self._flat(z, control)
        lv = self._level(t)
        e = self._emb(embedding, zf.shape[0])
        yc, u, pix_in, base1, base_l = self._inputs(zf, pf, lv)
        a1 = base1 + e @ self.params["We"]
        bl = base_l + (e @ self.params["U"])[:, None, :]
        F, cache = self._heads(a1, bl)
        return zf, lv, yc, F, cache, batched

    def predict_x0(self, z, t, embedding, control=None):
        zf, lv, yc, F, _, batched = self._forward(z, t, embedding, control)
        x0 = self._x0(yc, F, lv)
        return x0.reshape((-1,) + self.latent_shape) if batched else x0.reshape(self.latent_shape)

    def predict(self, z, t, embedding, control=None):
        zf, lv, yc, F, _, batched = self._forward(z, t, embedding, control)
        eps = (zf - lv["sa"] * self._x0(yc, F, lv)) / lv["sn"]
        return eps.reshape(np.shape(z))

    def vjp(self, z, t, embedding, control, cotangent):
        zf, lv, yc, F, cache, batched = self._forward(z, t, embedding, control)
        p = self.params
        cot = np.asarray(cotangent, dtype=np.float64).reshape(zf.shape)
        g_x0 = -lv["sa"] / lv["sn"] * cot
        g_a1, _, _, g_bl = self._heads_vjp(cache, lv["out"] * g_x0)
        C = self.latent_shape[0]
        g_pix_in = g_bl @ p["V1"].T
        g_u = g_a1 @ p["Wz"].T + self._unpixels(g_pix_in[..., -C:])
        gz = cot / lv["sn"] + (lv["skip"] * g_x0 + lv["in"] * g_u) / lv["sa"]
        ge = g_a1 @ p["We"].T + g_bl.sum(axis=1) @ p["U"].T
        gz = gz.reshape(np.shape(z))
        if np.ndim(embedding) <= 1:
            ge = ge.sum(axis=0)
        return gz, ge

    def bind(self, z, t, control=None):
        return _BoundToy(self, z, t, control)

    # -- training --
    def _loss_and_grads(self, zf, sa, sn, tfeat, pf, e, eps):
        """Mean squared noise error and parameter gradients for a batch at mixed levels."""
        p = self.params
        ab = (sa * sa)[:, 0]
        c_skip, c_out, c_in = (c[:, None] for c in preconditioning(ab, self.sigma_data))
        lv = {"sa": sa, "sn": sn, "skip": c_skip, "out": c_out, "in": c_in}
        yc = zf / sa - p["mu"]
        u = c_in * yc
        C, G = self.latent_shape[0], self.control_shape[0]
        pix_in = np.concatenate([self._pixels(pf, G), self._pixels(u, C)], axis=2)
        a1 = u @ p["Wz"] + pf @ p["Wp"] + tfeat @ p["Wt"] + e @ p["We"] + p["b1"]
        shared = tfeat @ p["Ut"] + e @ p["U"] + p["c1"]
        bl = pix_in @ p["V1"] + shared[:, None, :]
        F, cache = self._heads(a1, bl)
        x0 = self._x0(yc, F, lv)
        pred = (zf - sa * x0) / sn
        diff = pred - eps
        n, d = diff.shape
        loss = float(np.mean(diff**2))
        g_x0 = -sa / sn * (2.0 * diff / (n * d))
        gF = c_out * g_x0
        g_a1, g_a2, g_pix, g_bl = self._heads_vjp(cache, gF)
        _, _, h1, _, _, h2, _, _, hl = cache
        g_shared = g_bl.sum(axis=1)
        grads = {
            "W3": h2.T @ gF,
            "b3": gF.sum(axis=0),
            "W2": h1.T @ g_a2,
            "b2": g_a2.sum(axis=0),
            "Wz": u.T @ g_a1,
            "Wp": pf.T @ g_a1,
            "Wt": tfeat.T @ g_a1,
            "We": e.T @ g_a1,
            "b1": g_a1.sum(axis=0),
            "V2": np.einsum("nqh,nqc->hc", hl, g_pix),
            "c2": g_pix.sum(axis=(0, 1)),
            "V1": np.einsum("nqi,nqh->ih", pix_in, g_bl),
            "U": e.T @ g_shared,
            "Ut": tfeat.T @ g_shared,
            "c1": g_shared.sum(axis=0),
        }
        return loss, grads

    def describe(self) -> dict:
        return {
            "kind": "toy-mlp",
            "latent_shape": list(self.latent_shape),
            "control_shape": list(self.control_shape),
            "embedding_dim": self.embedding_dim,
            "hidden": self.hidden,
            "local_hidden": self.local_hidden,
            "num_time_features": self.num_time_features,
            "sigma_data": self.sigma_data,
            "schedule": self.schedule.describe(),
            "params": [[name, list(self.params[name].shape)] for name in PARAM_ORDER],
            "metadata": self.metadata,
        }


class _BoundToy(BoundDenoiser):
    """Caches everything that does not depend on the embedding."""

    def __init__(self, backend: ToyDenoiser, z, t, control):
        super().__init__(backend, z, t, control)
        zf, pf, self.batched = backend._flat(z, control)
        self.zf = zf
        self.lv = backend._level(t)
        self.yc, _, _, self.base1, self.base_l = backend._inputs(zf, pf, self.lv)

    def _run(self, embedding):
        b = self.backend
        e = b._emb(embedding, self.zf.shape[0])
        a1 = self.base1 + e @ b.params["We"]
        bl = self.base_l + (e @ b.params["U"])[:, None, :]
        return b._heads(a1, bl)

    def predict(self, embedding):
        F, _ = self._run(embedding)
        lv = self.lv
        eps = (self.zf - lv["sa"] * self.backend._x0(self.yc, F, lv)) / lv["sn"]
        return eps.reshape(np.shape(self.z))

    def embedding_vjp(self, embedding, cotangent):
        b = self.backend
        _, cache = self._run(embedding)
        lv = self.lv
        cot = np.asarray(cotangent, dtype=np.float64).reshape(self.zf.shape)
        g_a1, _, _, g_bl = b._heads_vjp(cache, lv["out"] * (-lv["sa"] / lv["sn"]) * cot)
        ge = g_a1 @ b.params["We"].T + g_bl.sum(axis=1) @ b.params["U"].T
        return ge if np.ndim(embedding) > 1 else ge.sum(axis=0)


@dataclass
class TrainingConfig:
    hidden: int = 384
    local_hidden: int = 32
    sigma_data: float = 0.25
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 2e-3
    min_learning_rate: float = 1e-4
    uncond_prob: float = 0.15
    num_time_features: int = 16
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _as_dataset(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 3 and isinstance(dataset[0], np.ndarray):
        images, embs, controls = dataset
    else:
        items = list(dataset)
        if not items:
            raise ConfigurationError("training dataset is empty")
        images = np.stack([np.asarray(i[0], dtype=np.float64) for i in items])
        embs = np.stack([np.asarray(i[1], dtype=np.float64) for i in items])
        controls = np.stack([np.asarray(i[2], dtype=np.float64) for i in items])
    if len(images) == 0:
        raise ConfigurationError("training dataset is empty")
    return np.asarray(images, np.float64), np.asarray(embs, np.float64), np.asarray(controls, np.float64)


def train_toy_denoiser(
    dataset, schedule: NoiseSchedule, config: TrainingConfig | None = None, autoencoder=None, progress=None
) -> ToyDenoiser:
    """Fit a :class:`ToyDenoiser` to ``(image, embedding, control)`` triples.

    Minimizes the mean squared noise-prediction error over uniformly drawn
    sampler indices with Adam and a cosine learning-rate decay. A fraction
    ``uncond_prob`` of samples sees the empty embedding so the unconditional
    branch is meaningful. Parameters are rounded to float32 at the end so a
    checkpoint round trip is lossless. ``progress(step, loss)`` is called once
    per epoch if given.
    """
    config = config or TrainingConfig()
    images, embs, controls = _as_dataset(dataset)
    ae = autoencoder or IdentityAutoencoder(images.shape[1:])
    latents = ae.encode(images)
    n = len(latents)
    rng = np.random.default_rng(config.seed)
    model = ToyDenoiser.initialize(
        rng, schedule, latents.shape[1:], controls.shape[1:], embs.shape[1], config.hidden,
        config.num_time_features, latents.mean(axis=0), config.local_hidden, config.sigma_data,
    )  # fmt: skip
    zf_all = latents.reshape(n, -1)
    pf_all = controls.reshape(n, -1)
    T = schedule.num_steps
    sa_all = np.sqrt(schedule.cumulative_alpha)
    sn_all = np.sqrt(1.0 - schedule.cumulative_alpha)
    tf_all = time_features(schedule.timestep_map, config.num_time_features)

    m = {k: np.zeros_like(model.params[k]) for k in TRAINABLE}
    v = {k: np.zeros_like(model.params[k]) for k in TRAINABLE}
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    steps_per_epoch = max(1, n // config.batch_size)
    epoch_acc = []
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        t = rng.integers(1, T + 1, size=config.batch_size)
        noise = rng.normal(size=(config.batch_size, zf_all.shape[1]))
        sa = sa_all[t][:, None]
        sn = sn_all[t][:, None]
        z = sa * zf_all[idx] + sn * noise
        e = embs[idx] * (rng.random(config.batch_size) >= config.uncond_prob)[:, None]
        loss, grads = model._loss_and_grads(z, sa, sn, tf_all[t - 1], pf_all[idx], e, noise)
        lr = config.min_learning_rate + 0.5 * (config.learning_rate - config.min_learning_rate) * (
            1.0 + np.cos(np.pi * step / max(config.steps - 1, 1))
        )
        for k, g in grads.items():
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            mhat = m[k] / (1 - b1 ** (step + 1))
            vhat = v[k] / (1 - b2 ** (step + 1))
            model.params[k] -= lr * mhat / (np.sqrt(vhat) + eps_adam)
        model.loss_history.append(loss)
        epoch_acc.append(loss)
        if len(epoch_acc) == steps_per_epoch:
            model.epoch_losses.append(float(np.mean(epoch_acc)))
            epoch_acc = []
            if progress is not None:
                progress(step + 1, model.epoch_losses[-1])
    if epoch_acc:
        model.epoch_losses.append(float(np.mean(epoch_acc)))
    for k in model.params:
        model.params[k] = model.params[k].astype(np.float32).astype(np.float64)
    return model


def epsilon_error(backend: DenoiserBackend, latents, embeddings, controls, seed: int = 0) -> float:
    """Mean squared noise-prediction error on a fixed batch at every sampler index."""
    rng = np.random.default_rng(seed)
    latents = np.asarray(latents, dtype=np.float64)
    total = 0.0
    T = backend.schedule.num_steps
    for t in range(1, T + 1):
        ab = backend.schedule.alpha_bar(t)
        noise = rng.normal(size=latents.shape)
        z = np.sqrt(ab) * latents + np.sqrt(1 - ab) * noise
        pred = backend.predict(z, t, embeddings, controls)
        total += float(np.mean((pred - noise) ** 2))
    return total / T


# --- gradient checking -----------------------------------------------------


@dataclass
class GradientProbe:
    """Scalar probe cost ``sum(weights * predict(z, t, embedding, control))``."""

    z: np.ndarray
    t: int
    embedding: np.ndarray
    control: np.ndarray | None = None
    weights: np.ndarray | None = None
    num_coordinates: int = 32
    seed: int = 0

    def cost(self, backend, z=None, embedding=None) -> float:
        z = self.z if z is None else z
        e = self.embedding if embedding is None else embedding
        return float(np.sum(self.weight_array() * backend.predict(z, self.t, e, self.control)))

    def weight_array(self):
        if self.weights is None:
            self.weights = np.random.default_rng(self.seed + 1).normal(size=np.shape(self.z))
        return self.weights


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor * max(1.0, float(np.max(np.abs(a)))))
    return np.abs(a - b) / scale


def check_gradient(backend: DenoiserBackend, probe: GradientProbe, input_selector: str = "latent", step: float = 1e-4) -> float:
    """Max relative error between backend gradients and central finite differences.

    The step is ``step`` times the RMS magnitude of the probed input (at least 1).
    """
    if getattr(backend, "gradients", "none") not in ("native", "finite-difference"):
        raise CapabilityError(f"{type(backend).__name__} provides no gradient mechanism")
    if input_selector not in ("latent", "embedding"):
        raise ContractError("input_selector must be 'latent' or 'embedding'")
    gz, ge = backend.vjp(probe.z, probe.t, probe.embedding, probe.control, probe.weight_array())
    x = np.array(probe.z if input_selector == "latent" else probe.embedding, dtype=np.float64)
    analytic = gz if input_selector == "latent" else ge
    h = step * max(1.0, float(np.sqrt(np.mean(x**2))))
    rng = np.random.default_rng(probe.seed)
    coords = rng.choice(x.size, size=min(probe.num_coordinates, x.size), replace=False)
    fd = np.empty(len(coords))
    flat = x.reshape(-1)
    for j, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + h
        up = probe.cost(backend, **{("z" if input_selector == "latent" else "embedding"): x})
        flat[i] = old - h
        down = probe.cost(backend, **{("z" if input_selector == "latent" else "embedding"): x})
        flat[i] = old
        fd[j] = (up - down) / (2 * h)
    return float(np.max(relative_error(np.asarray(analytic).reshape(-1)[coords], fd)))


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"DGTOYDN\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: ToyDenoiser) -> None:
    """Magic, version, JSON architecture descriptor, parameter count, float32 LE block."""
    desc = json.dumps(model.describe(), sort_keys=True).encode("utf-8")
    block = np.concatenate([model.params[k].reshape(-1) for k in PARAM_ORDER]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<Q", block.size))
        fh.write(block.tobytes())


def load_checkpoint(path) -> ToyDenoiser:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a toy denoiser checkpoint")
    version, dlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    desc = json.loads(data[16 : 16 + dlen].decode("utf-8"))
    (count,) = struct.unpack_from("<Q", data, 16 + dlen)
    start = 24 + dlen
    if len(data) != start + 4 * count:
        raise FormatError(f"{path}: parameter block has the wrong size")
    block = np.frombuffer(data, dtype="<f4", count=count, offset=start).astype(np.float64)
    params, pos = {}, 0
    for name, shape in desc["params"]:
        size = int(np.prod(shape))
        params[name] = block[pos : pos + size].reshape(shape).copy()
        pos += size
    sched = make_schedule(desc["schedule"]["num_steps"], desc["schedule"]["profile"])
    model = ToyDenoiser(
        params, sched, desc["latent_shape"], desc["control_shape"], desc["num_time_features"], desc["sigma_data"]
    )
    model.metadata = desc.get("metadata", {})
    return model

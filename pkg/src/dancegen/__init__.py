"""Pose-guided multi-person image animation with consistency-guided diffusion sampling.

The package bundles a small numpy diffusion stack (noise schedules, DDIM,
an analytic Gaussian denoiser and a trainable toy denoiser), pose and scene
composition utilities, pose-aware inversion with null-text and generalizable
embedding optimization, consistency-guided frame generation and evaluation
metrics.
"""

__version__ = "0.1.0"

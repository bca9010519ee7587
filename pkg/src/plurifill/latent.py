"""Diagonal Gaussian latents, the mask-adaptive prior, and KL divergences.

The prior over hole codes is zero-mean isotropic with variance tied to how
much of the image is missing: variance_scale = n_missing / (H * W).  A fully
visible image therefore pins the code to zero (degenerate, fully
deterministic) and a fully missing one recovers the unit prior.
"""

from dataclasses import dataclass

import torch
from torch import Tensor

# Encoder heads clamp log-variances into this range before building
# distributions; keeps KL and sampling finite under extreme activations.
LOGVAR_RANGE = (-10.0, 10.0)


class LatentError(ValueError):
    pass


@dataclass
class DiagonalGaussian:
    """Factorized Gaussian with per-dimension mean and log-variance.

    Tensors may have any matching shape; leading dims act as batch dims for
    the KL helpers below.
    """

    mean: Tensor
    log_variance: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise LatentError(
                f"mean/log_variance shape mismatch: {tuple(self.mean.shape)} "
                f"vs {tuple(self.log_variance.shape)}"
            )

    @property
    def variance(self) -> Tensor:
        return self.log_variance.exp()

    def detached(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.log_variance.detach())


@dataclass(frozen=True)
class AdaptivePrior:
    """Zero-mean isotropic prior N(0, variance_scale * I) over `dimension`
    latent entries."""

    variance_scale: float
    dimension: int

    def __post_init__(self):
        if not (0.0 < self.variance_scale <= 1.0):
            raise LatentError(
                f"variance_scale must lie in (0, 1], got {self.variance_scale}"
            )
        if self.dimension < 1:
            raise LatentError(f"dimension must be positive, got {self.dimension}")


def adaptive_prior_variance(n_missing: int, height: int, width: int) -> float:
    """Prior variance n / (H * W) for a mask with n missing pixels."""
    if height < 1 or width < 1:
        raise LatentError(f"image dims must be positive, got {height}x{width}")
    if not (0 <= n_missing <= height * width):
        raise LatentError(
            f"n_missing must lie in [0, {height * width}], got {n_missing}"
        )
    return n_missing / (height * width)


def sample(dist: DiagonalGaussian, noise: Tensor) -> Tensor:
    """Reparameterized draw mean + std * noise (differentiable in both
    distribution parameters)."""
    if noise.shape != dist.mean.shape:
        raise LatentError(
            f"noise shape {tuple(noise.shape)} must match latent shape "
            f"{tuple(dist.mean.shape)}"
        )
    return dist.mean + torch.exp(0.5 * dist.log_variance) * noise


def _sum_trailing(x: Tensor, batch_dims: int) -> Tensor:
    if batch_dims == 0:
        return x.sum()
    return x.flatten(start_dim=batch_dims).sum(dim=-1)


def kl_divergence(q: DiagonalGaussian, p: DiagonalGaussian, batch_dims: int = 0) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over all
    non-batch dimensions.  batch_dims leading dimensions are kept."""
    if q.mean.shape != p.mean.shape:
        raise LatentError(
            f"KL needs matching shapes, got {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}"
        )
    term = 0.5 * (
        p.log_variance
        - q.log_variance
        + (q.log_variance.exp() + (q.mean - p.mean) ** 2) / p.log_variance.exp()
        - 1.0
    )
    return _sum_trailing(term, batch_dims)


def kl_to_adaptive_prior(
    q: DiagonalGaussian, prior: AdaptivePrior, batch_dims: int = 0
) -> Tensor:
    """KL(q || N(0, s*I)) with s = prior.variance_scale, summed over the
    per-sample latent entries."""
    per_sample = 1
    for n in q.mean.shape[batch_dims:]:
        per_sample *= n
    if per_sample != prior.dimension:
        raise LatentError(
            f"prior dimension {prior.dimension} does not match latent size {per_sample}"
        )
    s = q.mean.new_tensor(prior.variance_scale)
    term = 0.5 * (
        torch.log(s)
        - q.log_variance
        + (q.log_variance.exp() + q.mean**2) / s
        - 1.0
    )
    return _sum_trailing(term, batch_dims)


def batched_adaptive_kl(q: DiagonalGaussian, variance_scales: Tensor) -> Tensor:
    """Per-sample KL(q_b || N(0, s_b * I)) for a batch of adaptive priors.

    variance_scales: [B] strictly positive, one scale per batch element.
    Returns [B] KLs summed over each sample's latent entries.
    """
    if variance_scales.ndim != 1 or variance_scales.shape[0] != q.mean.shape[0]:
        raise LatentError(
            f"need one variance scale per batch element, got "
            f"{tuple(variance_scales.shape)} for batch {q.mean.shape[0]}"
        )
    if (variance_scales <= 0).any():
        raise LatentError("adaptive variance scales must be strictly positive")
    s = variance_scales.reshape(-1, *([1] * (q.mean.ndim - 1))).to(q.mean.dtype)
    term = 0.5 * (
        torch.log(s) - q.log_variance + (q.log_variance.exp() + q.mean**2) / s - 1.0
    )
    return _sum_trailing(term, 1)


def unit_prior_like(q: DiagonalGaussian) -> DiagonalGaussian:
    return DiagonalGaussian(torch.zeros_like(q.mean), torch.zeros_like(q.log_variance))

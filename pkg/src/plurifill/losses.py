"""Training objectives for both completion models.

Dual-path model: two KL terms (adaptive-prior and posterior-to-conditional),
two appearance terms (full-image l1 on the reconstructive path, hole-only l1
on the generative path), and two adversarial terms (per-sample feature match
against the reconstruction discriminator, LSGAN generator term against the
completion discriminator).  Total = a_kl*(kl_r+kl_g) + a_app*(app_r+app_g)
+ a_ad*(ad_r+ad_g).

Transformer model: unweighted sum of pixel l1, discriminator-feature
perceptual distance, and the LSGAN generator term.
"""

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .latent import AdaptivePrior, DiagonalGaussian, kl_divergence, kl_to_adaptive_prior


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossReport:
    """Named scalar loss terms plus the weights that combined them.

    `total` always satisfies total = sum(weights[k] * terms[k]) with weight
    1.0 for unlisted terms.
    """

    terms: dict
    total: float
    weights: dict = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return float(sum(self.weights.get(k, 1.0) * v for k, v in self.terms.items()))

    @classmethod
    def from_terms(cls, terms: dict, weights: dict = None) -> "LossReport":
        """Build a report whose total is the float64 weighted sum of terms,
        exact regardless of the dtype the graph ran in."""
        report = cls(terms=dict(terms), weights=dict(weights or {}), total=0.0)
        return cls(terms=report.terms, weights=report.weights, total=report.weighted_sum())

    def to_json_dict(self) -> dict:
        return {"terms": dict(self.terms), "weights": dict(self.weights), "total": self.total}


def loss_kl_reconstructive(q: DiagonalGaussian, prior: AdaptivePrior) -> Tensor:
    """KL of the posterior against the mask-adaptive prior, batch mean."""
    return kl_to_adaptive_prior(q, prior, batch_dims=1).mean()


def loss_kl_generative(
    q: DiagonalGaussian,
    conditional_prior: DiagonalGaussian,
    stop_gradient_into_posterior: bool = False,
) -> Tensor:
    """KL(q || p) pulling the visible-conditional prior toward the posterior.

    Gradients flow into both distributions by default; the flag detaches the
    posterior so the term only trains the conditional prior (ablation).
    """
    if stop_gradient_into_posterior:
        q = q.detached()
    return kl_divergence(q, conditional_prior, batch_dims=1).mean()


def loss_appearance_reconstructive(reconstructed: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over the full image."""
    if reconstructed.shape != target.shape:
        raise LossError(
            f"shape mismatch {tuple(reconstructed.shape)} vs {tuple(target.shape)}"
        )
    return (reconstructed - target).abs().mean()


def loss_appearance_generative(generated: Tensor, target: Tensor, visible: Tensor) -> Tensor:
    """Mean absolute error over visible pixels only (hole pixels carry no
    appearance penalty on the generative path)."""
    if generated.shape != target.shape:
        raise LossError(
            f"shape mismatch {tuple(generated.shape)} vs {tuple(target.shape)}"
        )
    if visible.shape[-2:] != generated.shape[-2:]:
        raise LossError("visibility map must share spatial dims with the images")
    m = visible.to(generated.dtype)
    weighted = (m * (generated - target)).abs()
    denom = m.expand_as(generated).sum()
    if denom.item() == 0:
        return weighted.sum() * 0.0
    return weighted.sum() / denom


def loss_feature_match(fake_features: Tensor, real_features: Tensor) -> Tensor:
    """Per-sample Euclidean distance between pooled discriminator features,
    averaged over the batch."""
    if fake_features.shape != real_features.shape:
        raise LossError(
            f"feature shape mismatch {tuple(fake_features.shape)} vs "
            f"{tuple(real_features.shape)}"
        )
    if fake_features.ndim == 1:
        fake_features = fake_features[None]
        real_features = real_features[None]
    return (fake_features - real_features).pow(2).sum(dim=-1).sqrt().mean()


def loss_adversarial_generator(fake_scores: Tensor) -> Tensor:
    """LSGAN generator term mean((D(fake) - 1)^2)."""
    return (fake_scores - 1.0).pow(2).mean()


def loss_discriminator(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """LSGAN discriminator objective
    0.5 * mean((D(real) - 1)^2) + 0.5 * mean(D(fake)^2)."""
    return 0.5 * (real_scores - 1.0).pow(2).mean() + 0.5 * fake_scores.pow(2).mean()


def perceptual_distance(features_a, features_b) -> Tensor:
    """Mean absolute difference across a list of feature maps from a frozen
    trunk, averaged over layers."""
    if len(features_a) != len(features_b) or not features_a:
        raise LossError("perceptual distance needs matching non-empty feature lists")
    terms = []
    for fa, fb in zip(features_a, features_b):
        if fa.shape != fb.shape:
            raise LossError("perceptual feature shapes must match")
        terms.append((fa - fb).abs().mean())
    return torch.stack(terms).mean()


def dual_path_total(
    kl_r: Tensor,
    kl_g: Tensor,
    app_r: Tensor,
    app_g: Tensor,
    ad_r: Tensor,
    ad_g: Tensor,
    alpha_kl: float = 1.0,
    alpha_app: float = 1.0,
    alpha_ad: float = 0.1,
):
    """Weighted six-term objective; returns (total tensor, LossReport)."""
    total = (
        alpha_kl * (kl_r + kl_g)
        + alpha_app * (app_r + app_g)
        + alpha_ad * (ad_r + ad_g)
    )
    terms = {
        "kl_r": kl_r.detach().item(),
        "kl_g": kl_g.detach().item(),
        "app_r": app_r.detach().item(),
        "app_g": app_g.detach().item(),
        "ad_r": ad_r.detach().item(),
        "ad_g": ad_g.detach().item(),
    }
    weights = {
        "kl_r": alpha_kl,
        "kl_g": alpha_kl,
        "app_r": alpha_app,
        "app_g": alpha_app,
        "ad_r": alpha_ad,
        "ad_g": alpha_ad,
    }
    return total, LossReport.from_terms(terms, weights)


def transformer_total(pixel: Tensor, perceptual: Tensor, adversarial: Tensor):
    """Unweighted three-term objective for the transformer pipeline."""
    total = pixel + perceptual + adversarial
    report = LossReport.from_terms(
        {
            "pixel": pixel.detach().item(),
            "perceptual": perceptual.detach().item(),
            "adversarial": adversarial.detach().item(),
        }
    )
    return total, report

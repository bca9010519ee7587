"""Dual-path probabilistic completion model.

One shared representation encoder reads the masked image, one posterior
encoder reads its hidden complement; a single shared generator decodes codes
from either side.  The reconstructive path samples from the posterior and is
tied to a mask-adaptive zero-mean prior; the generative path samples from the
visible-conditional prior head and never sees the complement (the two paths
share every generator/encoder weight, but information from the hidden region
can only reach the generative output through the KL coupling, never through
activations).

A matching fixed-prior CVAE baseline lives here too; it differs only in its
latent plumbing so diversity comparisons are architecture-controlled.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import ShortLongTermAttention, attention_row_dump, contextual_attend
from .latent import (
    LOGVAR_RANGE,
    DiagonalGaussian,
    batched_adaptive_kl,
    sample as sample_latent,
)


class ConfigError(ValueError):
    pass


class ModelNotTrainedError(RuntimeError):
    pass


@dataclass
class DualPipelineConfig:
    """Architecture and loss weights for the dual-path model.

    image_size must be a power of two; sizes below 32 exist for numerical
    test rigs, production checkpoints train at 64 and up.
    """

    image_size: int = 64
    in_channels: int = 3
    base_width: int = 32
    encoder_depth: int = 4
    latent_channels: int = 128
    attention_kind: str = "slta"  # slta | contextual | none
    attention_channels: int = 0  # 0 -> same as feature channels
    disc_width: int = 32
    alpha_kl: float = 1.0
    alpha_app: float = 1.0
    alpha_ad: float = 0.1
    stop_gradient_into_posterior: bool = False

    def __post_init__(self):
        s = self.image_size
        if s < 8 or (s & (s - 1)) != 0:
            raise ConfigError(f"image_size must be a power of two >= 8, got {s}")
        if self.encoder_depth < 2:
            raise ConfigError("encoder_depth must be >= 2")
        if s >> self.encoder_depth < 2:
            raise ConfigError(
                f"latent grid {s >> self.encoder_depth} too small; reduce encoder_depth"
            )
        if self.attention_kind not in ("slta", "contextual", "none"):
            raise ConfigError(f"unknown attention_kind {self.attention_kind!r}")
        if min(self.base_width, self.latent_channels, self.disc_width) < 1:
            raise ConfigError("widths must be positive")

    @property
    def latent_grid(self) -> int:
        return self.image_size >> self.encoder_depth

    @property
    def latent_dimension(self) -> int:
        return self.latent_channels * self.latent_grid**2

    def widths(self):
        return [min(self.base_width << i, self.base_width * 4) for i in range(self.encoder_depth + 1)]


@dataclass
class VisibleFeatures:
    """Multi-scale features of the masked image: the deep latent-grid map,
    the half-resolution skip used by decoder attention, and the
    full-resolution stem features fused into the output head so visible
    content can be rendered at pixel fidelity."""

    deep: Tensor
    skip: Tensor
    stem: Tensor


@dataclass
class DualPipelineOutput:
    reconstructed: Tensor
    generated: Tensor
    posterior: DiagonalGaussian
    conditional_prior: DiagonalGaussian
    prior_scales: Tensor  # [B] adaptive prior variances
    masked_input: Tensor
    complement_input: Tensor


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=True)


class DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(cin, cout, 4, stride=2, padding=1),
            _norm(cout),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            _norm(cout),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.skip = nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(cin, cout, 1))

    def forward(self, x):
        return self.main(x) + self.skip(x)


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            _norm(cout),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            _norm(cout),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.main(x) + self.skip(x)


class RepresentationEncoder(nn.Module):
    """Image (+ visibility channel) to deep and skip features."""

    SKIP_LEVEL = 1  # half resolution

    def __init__(self, cfg: DualPipelineConfig):
        super().__init__()
        widths = cfg.widths()
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels + 1, widths[0], 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.downs = nn.ModuleList(
            DownBlock(widths[i], widths[i + 1]) for i in range(cfg.encoder_depth)
        )

    def forward(self, image: Tensor, visible: Tensor) -> VisibleFeatures:
        stem = self.stem(torch.cat([image, visible], dim=1))
        x = stem
        skip = None
        for i, down in enumerate(self.downs):
            x = down(x)
            if i + 1 == self.SKIP_LEVEL:
                skip = x
        return VisibleFeatures(deep=x, skip=skip, stem=stem)


class GaussianHead(nn.Module):
    """Deep features to a diagonal Gaussian over the latent grid."""

    def __init__(self, cin: int, latent_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cin, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(cin, 2 * latent_channels, 1),
        )
        self.latent_channels = latent_channels

    def forward(self, deep: Tensor) -> DiagonalGaussian:
        out = self.net(deep)
        mean, logvar = out.split(self.latent_channels, dim=1)
        return DiagonalGaussian(mean, logvar.clamp(*LOGVAR_RANGE))


class Generator(nn.Module):
    """Latent grid + visible features to a completed image in [0, 1]."""

    def __init__(self, cfg: DualPipelineConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.in_proj = nn.Sequential(
            nn.Conv2d(cfg.latent_channels + widths[-1], widths[-1], 3, padding=1),
            _norm(widths[-1]),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.ups = nn.ModuleList(
            UpBlock(widths[i + 1], widths[i]) for i in reversed(range(cfg.encoder_depth))
        )
        self.attention_level = 1  # feature resolution image_size / 2
        if cfg.attention_kind == "slta":
            self.attention = ShortLongTermAttention(
                widths[self.attention_level], cfg.attention_channels
            )
        else:
            self.attention = None
        self.head = nn.Conv2d(2 * widths[0], cfg.in_channels, 3, padding=1)

    def forward(
        self,
        z: Tensor,
        feats: VisibleFeatures,
        visible: Tensor,
        return_attention: bool = False,
    ):
        cfg = self.cfg
        x = self.in_proj(torch.cat([z, feats.deep], dim=1))
        fused_map = None
        for i, up in enumerate(self.ups):
            x = up(x)
            level = cfg.encoder_depth - 1 - i  # resolution image_size / 2^level
            if level == self.attention_level:
                vis_scale = visible_at_scale(visible, 2**level)
                if cfg.attention_kind == "slta":
                    x, fused_map = self.attention(
                        x, feats.skip, vis_scale, return_fused=True
                    )
                elif cfg.attention_kind == "contextual":
                    b, c, h, w = x.shape
                    seq = contextual_attend(
                        x.flatten(2).transpose(1, 2),
                        feats.skip.flatten(2).transpose(1, 2),
                        vis_scale.reshape(b, h * w),
                    )
                    x = seq.transpose(1, 2).reshape(b, c, h, w)
        out = torch.sigmoid(self.head(torch.cat([x, feats.stem], dim=1)))
        if return_attention:
            return out, fused_map
        return out


def visible_at_scale(visible: Tensor, factor: int) -> Tensor:
    """Strict visibility at a coarser grid: a cell counts as visible only if
    every covered pixel is visible (blockwise mean exactly 1)."""
    if factor == 1:
        return visible
    pooled = F.avg_pool2d(visible, factor)
    return (pooled == 1.0).to(visible.dtype)


class Discriminator(nn.Module):
    """LSGAN patch discriminator with a pooled feature vector of exactly
    `width` channels."""

    def __init__(self, in_channels: int, width: int, depth: int):
        super().__init__()
        w = width
        widths = [min(w << i, w * 4) for i in range(depth)]
        layers = [
            nn.Conv2d(in_channels, widths[0], 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        for i in range(depth - 1):
            layers += [
                nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        self.trunk = nn.Sequential(*layers)
        self.score_head = nn.Conv2d(widths[-1], 1, 1)
        self.feature_head = nn.Conv2d(widths[-1], width, 1)

    def forward(self, image: Tensor):
        h = self.trunk(image)
        scores = self.score_head(h)
        features = self.feature_head(h).mean(dim=(2, 3))
        return scores, features

    def trunk_features(self, image: Tensor):
        """Post-activation trunk features for perceptual/diversity use.
        Collected after each nonlinearity so inplace ops never alias them."""
        feats = []
        h = image
        for layer in self.trunk:
            h = layer(h)
            if isinstance(layer, nn.LeakyReLU):
                feats.append(h)
        return feats


def _dcgan_init(module: nn.Module):
    if isinstance(module, nn.Conv2d):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class DualPipelineModel(nn.Module):
    KIND = "dual_pipeline"

    def __init__(self, cfg: DualPipelineConfig):
        super().__init__()
        self.cfg = cfg
        self.visible_encoder = RepresentationEncoder(cfg)
        self.complement_encoder = RepresentationEncoder(cfg)
        widths = cfg.widths()
        self.conditional_prior_head = GaussianHead(widths[-1], cfg.latent_channels)
        self.posterior_head = GaussianHead(widths[-1], cfg.latent_channels)
        self.generator = Generator(cfg)
        self.disc_rec = Discriminator(cfg.in_channels, cfg.disc_width, cfg.encoder_depth)
        self.disc_gen = Discriminator(cfg.in_channels, cfg.disc_width, cfg.encoder_depth)
        self.register_buffer("train_steps", torch.zeros((), dtype=torch.long))
        self.apply(_dcgan_init)
        # Attention scale/projection gates must start closed regardless of the
        # global init scheme.
        if self.generator.attention is not None:
            nn.init.zeros_(self.generator.attention.long_proj.weight)
            nn.init.zeros_(self.generator.attention.long_proj.bias)

    # -- encoding ------------------------------------------------------------

    def encode_visible(self, masked_image: Tensor, visible: Tensor):
        feats = self.visible_encoder(masked_image, visible)
        return feats, self.conditional_prior_head(feats.deep)

    def encode_complement(self, complement_image: Tensor, visible: Tensor):
        feats = self.complement_encoder(complement_image, 1.0 - visible)
        return self.posterior_head(feats.deep)

    # -- training forward ------------------------------------------------------

    def dual_forward(
        self, image: Tensor, visible: Tensor, noise_rec: Tensor, noise_gen: Tensor
    ) -> DualPipelineOutput:
        if image.shape[-1] != self.cfg.image_size or image.shape[-2] != self.cfg.image_size:
            raise ConfigError(
                f"expected {self.cfg.image_size}px inputs, got {tuple(image.shape)}"
            )
        masked = image * visible
        complement = image * (1.0 - visible)
        feats, p_cond = self.encode_visible(masked, visible)
        q = self.encode_complement(complement, visible)
        prior_scales = adaptive_scales(visible)
        z_rec = sample_latent(q, noise_rec)
        z_gen = sample_latent(p_cond, noise_gen)
        reconstructed = self.generator(z_rec, feats, visible)
        generated = self.generator(z_gen, feats, visible)
        return DualPipelineOutput(
            reconstructed=reconstructed,
            generated=generated,
            posterior=q,
            conditional_prior=p_cond,
            prior_scales=prior_scales,
            masked_input=masked,
            complement_input=complement,
        )

    def adaptive_kl(self, output: DualPipelineOutput) -> Tensor:
        """Batch-mean KL of the posterior against each sample's adaptive
        prior (degenerate fully-visible samples contribute a mean+variance
        shrinkage penalty through a tiny floor scale)."""
        scales = output.prior_scales.clamp_min(1.0 / (self.cfg.image_size**2))
        return batched_adaptive_kl(output.posterior, scales).mean()

    def discriminate(self, image: Tensor, which: str):
        if which == "d1":
            return self.disc_rec(image)
        if which == "d2":
            return self.disc_gen(image)
        raise ConfigError(f"which must be 'd1' or 'd2', got {which!r}")

    # -- inference -------------------------------------------------------------

    @torch.no_grad()
    def pluralistic_sample(
        self,
        masked_image: Tensor,
        visible: Tensor,
        k: int,
        generator: torch.Generator,
        require_trained: bool = True,
    ):
        """k completions of one masked image, sorted by descending
        completion-discriminator score.  Visible pixels are pasted from the
        input unchanged."""
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        if require_trained and int(self.train_steps) == 0:
            raise ModelNotTrainedError(
                "model has no recorded training steps; pass require_trained=False "
                "to sample from an untrained network"
            )
        if masked_image.ndim != 4 or masked_image.shape[0] != 1:
            raise ConfigError("pluralistic_sample expects a single [1,C,H,W] image")
        feats, p_cond = self.encode_visible(masked_image, visible)
        images = []
        for _ in range(k):
            noise = torch.randn(
                p_cond.mean.shape,
                generator=generator,
                dtype=p_cond.mean.dtype,
                device=p_cond.mean.device,
            )
            z = sample_latent(p_cond, noise)
            out = self.generator(z, feats, visible)
            images.append(visible * masked_image + (1.0 - visible) * out)
        stack = torch.cat(images, dim=0)
        scores, _ = self.disc_gen(stack)
        scores = scores.mean(dim=(1, 2, 3))
        order = torch.argsort(-scores, stable=True)
        return stack[order], scores[order]

    @torch.no_grad()
    def attention_probe(self, masked_image: Tensor, visible: Tensor, query_yx) -> dict:
        """Fused patch-attention row for the query pixel, at the decoder's
        attention resolution."""
        if self.cfg.attention_kind != "slta":
            raise ConfigError("attention probes need attention_kind='slta'")
        h, w = masked_image.shape[-2:]
        y, x = int(query_yx[0]), int(query_yx[1])
        if not (0 <= y < h and 0 <= x < w):
            raise ConfigError(f"query ({y}, {x}) outside image {h}x{w}")
        feats, p_cond = self.encode_visible(masked_image, visible)
        z = p_cond.mean
        _, fused = self.generator(z, feats, visible, return_attention=True)
        factor = 2**self.generator.attention_level
        return attention_row_dump(fused, h // factor, w // factor, (y // factor, x // factor))


def adaptive_scales(visible: Tensor) -> Tensor:
    """Per-sample adaptive prior variances n_missing / (H * W) from a batch
    of visibility maps."""
    b = visible.shape[0]
    total = visible.shape[-1] * visible.shape[-2]
    n_missing = total - visible.reshape(b, -1).sum(dim=1)
    return n_missing / total


class CvaeBaselineModel(nn.Module):
    """Fixed-prior single-path CVAE with the same encoder/generator bones.

    The posterior reads the hidden complement during training and is pulled
    toward N(0, I); test-time samples draw codes from N(0, I) directly.
    """

    KIND = "cvae_baseline"

    def __init__(self, cfg: DualPipelineConfig):
        super().__init__()
        self.cfg = cfg
        self.visible_encoder = RepresentationEncoder(cfg)
        self.complement_encoder = RepresentationEncoder(cfg)
        widths = cfg.widths()
        self.posterior_head = GaussianHead(widths[-1], cfg.latent_channels)
        self.generator = Generator(cfg)
        self.disc = Discriminator(cfg.in_channels, cfg.disc_width, cfg.encoder_depth)
        self.register_buffer("train_steps", torch.zeros((), dtype=torch.long))
        self.apply(_dcgan_init)
        if self.generator.attention is not None:
            nn.init.zeros_(self.generator.attention.long_proj.weight)
            nn.init.zeros_(self.generator.attention.long_proj.bias)

    def forward_train(self, image: Tensor, visible: Tensor, noise: Tensor):
        masked = image * visible
        complement = image * (1.0 - visible)
        feats = self.visible_encoder(masked, visible)
        post_feats = self.complement_encoder(complement, 1.0 - visible)
        q = self.posterior_head(post_feats.deep)
        z = sample_latent(q, noise)
        out = self.generator(z, feats, visible)
        return out, q

    @torch.no_grad()
    def pluralistic_sample(
        self,
        masked_image: Tensor,
        visible: Tensor,
        k: int,
        generator: torch.Generator,
        require_trained: bool = True,
    ):
        if require_trained and int(self.train_steps) == 0:
            raise ModelNotTrainedError("model has no recorded training steps")
        feats = self.visible_encoder(masked_image, visible)
        images = []
        g = self.cfg.latent_grid
        shape = (1, self.cfg.latent_channels, g, g)
        for _ in range(k):
            z = torch.randn(shape, generator=generator, dtype=masked_image.dtype)
            out = self.generator(z, feats, visible)
            images.append(visible * masked_image + (1.0 - visible) * out)
        stack = torch.cat(images, dim=0)
        scores, _ = self.disc(stack)
        scores = scores.mean(dim=(1, 2, 3))
        order = torch.argsort(-scores, stable=True)
        return stack[order], scores[order]

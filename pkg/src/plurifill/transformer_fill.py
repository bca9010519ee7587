"""Transformer-based coarse completion with a restrictive token embedding.

Phase one infers coarse content: a restrictive CNN embeds the masked image
into tokens whose receptive fields are small and non-overlapping, a masked
transformer encoder models all cross-token relations explicitly, and a
stacked upsampling decoder maps the encoded tokens back to an image.  Phase
two recomposes the coarse prediction with the original visible pixels and
refines appearance with a convolutional encoder-decoder carrying an
attention-aware fusion layer.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import (
    AttentionAwareLayer,
    AttentionMap,
    amplify_weights,
    attention_row_dump,
    masked_msa,
)
from .dual_pipeline import ConfigError, Discriminator, UpBlock, _norm, visible_at_scale

__all__ = [
    "TransformerFillConfig",
    "TokenSequence",
    "partial_conv",
    "RestrictiveEmbed",
    "OverlappingConvEmbed",
    "MaskedTransformerEncoder",
    "CoarseDecoder",
    "RefinementNetwork",
    "recompose",
    "TransformerFillModel",
]

PARTIAL_WINDOW = 2  # fixed 2x2 stride-2 filter
WINDOW_AREA = PARTIAL_WINDOW * PARTIAL_WINDOW


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclasses.dataclass(frozen=True)
class TransformerFillConfig:
    """Desk-scale defaults; `full_scale()` restores the 256/16/512 layout."""

    coarse_size: int = 64
    token_grid: int = 8
    embed_channels: int = 128
    encoder_layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    refinement_size: int = 128
    in_channels: int = 3
    refine_width: int = 32
    disc_width: int = 32
    disc_depth: int = 4
    weight_floor: float = 0.02
    single_position_injection: bool = False

    def __post_init__(self):
        if not _is_power_of_two(self.coarse_size):
            raise ConfigError(f"coarse_size must be a power of two, got {self.coarse_size}")
        if not _is_power_of_two(self.token_grid):
            raise ConfigError(f"token_grid must be a power of two, got {self.token_grid}")
        if not _is_power_of_two(self.refinement_size):
            raise ConfigError(
                f"refinement_size must be a power of two, got {self.refinement_size}"
            )
        if self.coarse_size < 2 * self.token_grid:
            raise ConfigError(
                f"patch size {self.coarse_size}/{self.token_grid} below the 2x2 filter"
            )
        if self.refinement_size < self.coarse_size:
            raise ConfigError("refinement_size must be at least coarse_size")
        if self.encoder_layers < 1:
            raise ConfigError("encoder_layers must be >= 1")
        if self.heads < 1 or self.embed_channels % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must divide embed_channels ({self.embed_channels})"
            )
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        if not 0.0 < self.weight_floor < 1.0:
            raise ConfigError("weight_floor must lie in (0, 1)")
        if self.embed_channels >> (self.embed_stages - 1) < 1:
            raise ConfigError("embed_channels too small for the stage count")

    @property
    def patch_size(self) -> int:
        return self.coarse_size // self.token_grid

    @property
    def embed_stages(self) -> int:
        return int(math.log2(self.patch_size))

    @property
    def num_tokens(self) -> int:
        return self.token_grid * self.token_grid

    @classmethod
    def full_scale(cls) -> "TransformerFillConfig":
        return cls(
            coarse_size=256,
            token_grid=16,
            embed_channels=512,
            encoder_layers=8,
            heads=8,
            refinement_size=512,
            refine_width=64,
            disc_width=64,
        )


@dataclasses.dataclass
class TokenSequence:
    """Flattened token grid with per-token visibility weights.

    `visibility_weights` are floor-clamped; `raw_weights` keep the unclamped
    visible fractions (0 for a fully masked patch)."""

    tokens: Tensor  # [B, N, C]
    visibility_weights: Tensor  # [B, N] in [floor, 1]
    grid_shape: tuple[int, int]
    raw_weights: Tensor  # [B, N] in [0, 1]
    position_embedding: Optional[Tensor] = None  # [N, C] when attached


def partial_conv(
    features: Tensor,
    float_mask: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor]:
    """2x2 stride-2 partial convolution with a float mask update.

    x' = W(x * m) / sum(m_p) + b over windows with sum(m_p) > 0, else 0;
    m' = sum(m_p) / 4.  Fractional masks are allowed: a partly visible
    window contributes proportionally and its output is renormalized by
    the visible mass."""
    if features.ndim != 4 or float_mask.ndim != 4 or float_mask.shape[1] != 1:
        raise ValueError("expected features [B,C,H,W] and float_mask [B,1,H,W]")
    if features.shape[0] != float_mask.shape[0] or features.shape[2:] != float_mask.shape[2:]:
        raise ValueError(
            f"mask shape {tuple(float_mask.shape)} does not match "
            f"features {tuple(features.shape)}"
        )
    if features.shape[2] % 2 or features.shape[3] % 2:
        raise ValueError("spatial dims must be even for the 2x2 stride-2 filter")
    if weight.ndim != 4 or weight.shape[2:] != (PARTIAL_WINDOW, PARTIAL_WINDOW):
        raise ValueError(f"weight must be [C_out, C_in, 2, 2], got {tuple(weight.shape)}")
    if float_mask.min() < 0.0 or float_mask.max() > 1.0:
        raise ValueError("float_mask values must lie in [0, 1]")

    raw = F.conv2d(features * float_mask, weight, None, stride=PARTIAL_WINDOW)
    ones = torch.ones(1, 1, PARTIAL_WINDOW, PARTIAL_WINDOW, dtype=float_mask.dtype,
                      device=float_mask.device)
    mask_sum = F.conv2d(float_mask, ones, None, stride=PARTIAL_WINDOW)
    covered = mask_sum > 0
    safe_sum = torch.where(covered, mask_sum, torch.ones_like(mask_sum))
    out = raw / safe_sum
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    out = torch.where(covered, out, torch.zeros_like(out))
    return out, mask_sum / WINDOW_AREA


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a [B, C, H, W] map.

    Each spatial position is normalized independently so the receptive
    field of downstream tokens never widens."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class _EmbedStage(nn.Module):
    """One restrictive stage: 1x1 projection, per-position norm, partial conv."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.proj = nn.Conv2d(cin, cout, 1)
        self.norm = ChannelLayerNorm(cout)
        self.pconv_weight = nn.Parameter(torch.empty(cout, cout, PARTIAL_WINDOW, PARTIAL_WINDOW))
        self.pconv_bias = nn.Parameter(torch.zeros(cout))
        nn.init.kaiming_normal_(self.pconv_weight, a=0.2)

    def forward(self, x: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
        x = self.norm(self.proj(x))
        return partial_conv(x, mask, self.pconv_weight, self.pconv_bias)


class RestrictiveEmbed(nn.Module):
    """Tokens with small, non-overlapping receptive fields.

    Every operation either acts per position (1x1 projection, channel
    norm) or halves resolution over disjoint 2x2 windows (partial conv),
    so each token sees exactly its own patch and nothing else."""

    def __init__(self, cfg: TransformerFillConfig):
        super().__init__()
        self.cfg = cfg
        stages = cfg.embed_stages
        widths = [max(cfg.embed_channels >> (stages - 1 - i), 1) for i in range(stages)]
        chain = [cfg.in_channels] + widths
        self.stages = nn.ModuleList(
            _EmbedStage(chain[i], chain[i + 1]) for i in range(stages)
        )

    def forward(self, image: Tensor, visible: Tensor) -> TokenSequence:
        cfg = self.cfg
        size = cfg.coarse_size
        if image.ndim != 4 or image.shape[2:] != (size, size):
            raise ValueError(
                f"expected input at {size}x{size}, got {tuple(image.shape)}"
            )
        if visible.shape != (image.shape[0], 1, size, size):
            raise ValueError(f"visible mask shape {tuple(visible.shape)} mismatched")
        x, mask = image, visible.to(image.dtype)
        for stage in self.stages:
            x, mask = stage(x, mask)
        tokens = x.flatten(2).transpose(1, 2)  # [B, N, C] row-major grid
        raw = mask.flatten(1)
        return TokenSequence(
            tokens=tokens,
            visibility_weights=raw.clamp(min=cfg.weight_floor),
            grid_shape=(cfg.token_grid, cfg.token_grid),
            raw_weights=raw,
        )


class OverlappingConvEmbed(nn.Module):
    """Traditional overlapping 5x5 stride-2 embedding, kept as a contrast
    fixture: its receptive fields cross patch borders on every side."""

    def __init__(self, cfg: TransformerFillConfig):
        super().__init__()
        self.cfg = cfg
        stages = cfg.embed_stages
        widths = [max(cfg.embed_channels >> (stages - 1 - i), 1) for i in range(stages)]
        chain = [cfg.in_channels] + widths
        layers = []
        for i in range(stages):
            layers += [
                nn.Conv2d(chain[i], chain[i + 1], 5, stride=2, padding=2),
                nn.LeakyReLU(0.2),
            ]
        self.net = nn.Sequential(*layers)

    def forward(self, image: Tensor, visible: Tensor) -> TokenSequence:
        cfg = self.cfg
        x = self.net(image * visible)
        tokens = x.flatten(2).transpose(1, 2)
        frac = F.avg_pool2d(visible.to(image.dtype), cfg.patch_size).flatten(1)
        return TokenSequence(
            tokens=tokens,
            visibility_weights=frac.clamp(min=cfg.weight_floor),
            grid_shape=(cfg.token_grid, cfg.token_grid),
            raw_weights=frac,
        )


class _EncoderLayer(nn.Module):
    def __init__(self, channels: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln_attn = nn.LayerNorm(channels)
        self.qkv_weight = nn.Parameter(torch.empty(3 * channels, channels))
        nn.init.normal_(self.qkv_weight, std=channels ** -0.5)
        self.ln_mlp = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, mlp_ratio * channels),
            nn.GELU(),
            nn.Linear(mlp_ratio * channels, channels),
        )

    def forward(self, z: Tensor, weights: Tensor, return_scores: bool = False):
        attended = masked_msa(
            self.ln_attn(z), weights, self.qkv_weight, self.heads,
            return_scores=return_scores,
        )
        scores = None
        if return_scores:
            attended, scores = attended
        z = attended + z
        z = self.mlp(self.ln_mlp(z)) + z
        return (z, scores) if return_scores else z


class MaskedTransformerEncoder(nn.Module):
    """Pre-norm transformer whose attention scores are scaled by per-token
    visibility weights; weights move toward 1 by square root after every
    layer.  A learned position embedding is added at every layer (or only
    once, behind the config flag)."""

    def __init__(self, cfg: TransformerFillConfig):
        super().__init__()
        self.cfg = cfg
        self.position_embedding = nn.Parameter(
            torch.empty(cfg.num_tokens, cfg.embed_channels)
        )
        nn.init.trunc_normal_(self.position_embedding, std=0.02)
        self.layers = nn.ModuleList(
            _EncoderLayer(cfg.embed_channels, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.encoder_layers)
        )

    def forward(
        self, tokens: Tensor, weights: Tensor, return_scores: bool = False
    ) -> tuple[Tensor, ...]:
        if tokens.shape[-2] != self.cfg.num_tokens:
            raise ValueError(
                f"expected {self.cfg.num_tokens} tokens, got {tokens.shape[-2]}"
            )
        z = tokens
        scores = None
        for i, layer in enumerate(self.layers):
            if i == 0 or not self.cfg.single_position_injection:
                z = z + self.position_embedding
            if return_scores and i == len(self.layers) - 1:
                z, scores = layer(z, weights, return_scores=True)
            else:
                z = layer(z, weights)
            weights = amplify_weights(weights)
        if return_scores:
            return z, weights, scores
        return z, weights


class CoarseDecoder(nn.Module):
    """Encoded tokens back to a coarse image through stacked upsampling."""

    def __init__(self, cfg: TransformerFillConfig):
        super().__init__()
        self.cfg = cfg
        ups = cfg.embed_stages
        floor = min(8, cfg.embed_channels)
        widths = [cfg.embed_channels] + [
            max(cfg.embed_channels >> (i + 1), floor) for i in range(ups)
        ]
        self.ups = nn.ModuleList(UpBlock(widths[i], widths[i + 1]) for i in range(ups))
        self.head = nn.Conv2d(widths[-1], cfg.in_channels, 3, padding=1)

    def forward(self, tokens: Tensor) -> Tensor:
        cfg = self.cfg
        b, n, c = tokens.shape
        if n != cfg.num_tokens or c != cfg.embed_channels:
            raise ValueError(f"expected [B,{cfg.num_tokens},{cfg.embed_channels}] tokens")
        x = tokens.transpose(1, 2).reshape(b, c, cfg.token_grid, cfg.token_grid)
        for up in self.ups:
            x = up(x)
        return torch.sigmoid(self.head(x))


def recompose(coarse: Tensor, original: Tensor, visible: Tensor) -> Tensor:
    """Visible pixels from the original, hole pixels from the (resized)
    coarse prediction.  Selection keeps visible pixels bitwise intact."""
    if original.shape[0] != coarse.shape[0] or original.shape[1] != coarse.shape[1]:
        raise ValueError("coarse/original batch or channel mismatch")
    if visible.shape != (original.shape[0], 1, original.shape[2], original.shape[3]):
        raise ValueError(f"visible mask shape {tuple(visible.shape)} mismatched")
    if coarse.shape[2:] != original.shape[2:]:
        coarse = F.interpolate(
            coarse, size=original.shape[2:], mode="bilinear", align_corners=False
        )
    return torch.where(visible.bool().expand_as(original), original, coarse)


class RefinementNetwork(nn.Module):
    """Convolutional encoder-decoder with attention-aware fusion at the
    middle scale.  The output head is a zero-initialized residual, so a
    fresh network returns its input unchanged; visible pixels are always
    composited back from the input."""

    MIDDLE_FACTOR = 4  # AAL operates at refinement_size / 4

    def __init__(self, cfg: TransformerFillConfig):
        super().__init__()
        w = cfg.refine_width
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w, 3, padding=1), nn.LeakyReLU(0.2, inplace=True)
        )
        self.down1 = nn.Sequential(
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), _norm(2 * w),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.down2 = nn.Sequential(
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1), _norm(4 * w),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.mid = nn.Sequential(
            nn.Conv2d(4 * w, 4 * w, 3, padding=1), _norm(4 * w),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.fuse = AttentionAwareLayer(4 * w)
        self.up1 = UpBlock(4 * w, 2 * w)
        self.up2 = UpBlock(2 * w, w)
        self.head = nn.Conv2d(w, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(
        self, recomposed: Tensor, visible: Tensor, return_detail: bool = False
    ):
        e0 = self.stem(recomposed)
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        x = self.mid(e2)
        vis_mid = visible_at_scale(visible, self.MIDDLE_FACTOR)
        fused = self.fuse(x, e2, vis_mid, return_detail=return_detail)
        detail = None
        if return_detail:
            fused, detail = fused
        x = self.up1(fused) + e1
        x = self.up2(x) + e0
        refined = (recomposed + self.head(x)).clamp(0.0, 1.0)
        out = torch.where(visible.bool().expand_as(refined), recomposed, refined)
        return (out, detail) if return_detail else out


class TransformerFillModel(nn.Module):
    """Two-phase completion: transformer coarse content, refined appearance."""

    KIND = "transformer_fill"

    def __init__(self, cfg: TransformerFillConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = RestrictiveEmbed(cfg)
        self.encoder = MaskedTransformerEncoder(cfg)
        self.decoder = CoarseDecoder(cfg)
        self.refiner = RefinementNetwork(cfg)
        self.disc_coarse = Discriminator(cfg.in_channels, cfg.disc_width, cfg.disc_depth)
        self.disc_refine = Discriminator(cfg.in_channels, cfg.disc_width, cfg.disc_depth)
        self.register_buffer("coarse_steps", torch.zeros((), dtype=torch.long))
        self.register_buffer("refine_steps", torch.zeros((), dtype=torch.long))
        # re-zero the refinement residual head after any global init
        nn.init.zeros_(self.refiner.head.weight)
        nn.init.zeros_(self.refiner.head.bias)

    def coarse_modules(self) -> list[nn.Module]:
        return [self.embed, self.encoder, self.decoder]

    def coarse_parameters(self):
        for module in self.coarse_modules():
            yield from module.parameters()

    def embed_tokens(self, image: Tensor, visible: Tensor) -> TokenSequence:
        seq = self.embed(image * visible, visible)
        seq.position_embedding = self.encoder.position_embedding
        return seq

    def coarse_forward(self, image: Tensor, visible: Tensor) -> Tensor:
        """Masked image at coarse_size to a full coarse prediction."""
        seq = self.embed_tokens(image, visible)
        encoded, _ = self.encoder(seq.tokens, seq.visibility_weights)
        return self.decoder(encoded)

    def _to_coarse(self, image: Tensor, visible: Tensor) -> tuple[Tensor, Tensor]:
        size = self.cfg.coarse_size
        if image.shape[2:] == (size, size):
            return image, visible
        small = F.interpolate(image, size=(size, size), mode="bilinear",
                              align_corners=False)
        mask = F.interpolate(visible, size=(size, size), mode="area")
        return small, mask

    def complete(
        self, image: Tensor, visible: Tensor, return_parts: bool = False
    ):
        """Full two-phase completion at refinement resolution."""
        cfg = self.cfg
        if image.ndim != 4 or visible.shape != (image.shape[0], 1, *image.shape[2:]):
            raise ValueError("expected image [B,C,H,W] with mask [B,1,H,W]")
        if image.shape[2] != cfg.refinement_size or image.shape[3] != cfg.refinement_size:
            raise ValueError(
                f"expected input at {cfg.refinement_size}x{cfg.refinement_size}, "
                f"got {tuple(image.shape[2:])}"
            )
        masked = image * visible
        small, small_mask = self._to_coarse(masked, visible)
        seq = self.embed(small, small_mask)
        encoded, _ = self.encoder(seq.tokens, seq.visibility_weights)
        coarse = self.decoder(encoded)
        recomposed = recompose(coarse, masked, visible)
        refined = self.refiner(recomposed, visible)
        if return_parts:
            return {"coarse": coarse, "recomposed": recomposed, "refined": refined}
        return refined

    def attention_probe(self, image: Tensor, visible: Tensor, pixel: tuple[int, int]) -> dict:
        """Last-layer attention row (head-averaged) for the token covering
        `pixel`, given inputs at coarse resolution."""
        cfg = self.cfg
        row, col = pixel
        if not (0 <= row < cfg.coarse_size and 0 <= col < cfg.coarse_size):
            raise ValueError(f"pixel {pixel} outside {cfg.coarse_size}x{cfg.coarse_size}")
        seq = self.embed(image * visible, visible)
        _, _, scores = self.encoder(
            seq.tokens, seq.visibility_weights, return_scores=True
        )
        fused = AttentionMap(scores.mean(dim=-3), normalized=False)  # heads averaged
        return attention_row_dump(
            fused, cfg.token_grid, cfg.token_grid,
            (row // cfg.patch_size, col // cfg.patch_size),
        )

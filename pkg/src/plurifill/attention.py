"""Attention primitives for completion models.

Three families live here:

* point attention + 3x3 patch fusion + the short/long-term feature updates
  used inside the dual-path generator decoder;
* visibility-weighted multi-head self-attention for transformer encoders,
  where post-softmax columns are scaled by per-token visibility weights and
  the weights are square-root amplified between layers;
* the attention-aware fusion layer that mixes encoder values at visible
  source positions with decoder values at missing ones.

Sequence layout is row-major: token index = row * grid_w + col.  Functional
ops accept any leading batch dims on [..., N, C] features.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class AttentionError(ValueError):
    pass


@dataclass
class AttentionMap:
    """Pairwise scores [..., N, N]; entry [j, i] scores source i for target
    j.  `normalized` marks row-stochastic maps (softmax output); patch fusion
    produces unnormalized maps."""

    scores: Tensor
    normalized: bool

    @property
    def n_tokens(self) -> int:
        return self.scores.shape[-1]


def point_attention(features: Tensor, theta_weight: Tensor) -> AttentionMap:
    """Row-stochastic self-similarity of per-position features.

    features: [..., N, C]; theta_weight: [C_attn, C], a shared 1x1-conv
    filter applied to both operands of the dot product.
    """
    if features.ndim < 2:
        raise AttentionError(f"features must be [..., N, C], got {tuple(features.shape)}")
    if theta_weight.ndim != 2 or theta_weight.shape[1] != features.shape[-1]:
        raise AttentionError(
            f"theta weight {tuple(theta_weight.shape)} incompatible with "
            f"C={features.shape[-1]}"
        )
    proj = features @ theta_weight.t()
    sim = proj @ proj.transpose(-1, -2)
    return AttentionMap(torch.softmax(sim, dim=-1), normalized=True)


def patch_fuse(attn: AttentionMap, grid_h: int, grid_w: int) -> AttentionMap:
    """Sum attention over 3x3 neighborhoods of both target and source
    positions (zero padding at grid borders): the patch-level score
    A_hat[j, i] = sum over neighbors j' of j, i' of i of A[j', i']."""
    n = attn.scores.shape[-1]
    if grid_h * grid_w != n or attn.scores.shape[-2] != n:
        raise AttentionError(
            f"scores {tuple(attn.scores.shape)} do not match grid {grid_h}x{grid_w}"
        )
    lead = attn.scores.shape[:-2]
    s = attn.scores.reshape(-1, n, n)
    kernel = torch.ones(1, 1, 3, 3, dtype=s.dtype, device=s.device)
    # Fuse source neighborhoods: each target row is an image over sources.
    x = s.reshape(-1, 1, grid_h, grid_w)
    x = F.conv2d(x, kernel, padding=1)
    s = x.reshape(-1, n, n)
    # Fuse target neighborhoods symmetrically.
    x = s.transpose(1, 2).reshape(-1, 1, grid_h, grid_w)
    x = F.conv2d(x, kernel, padding=1)
    s = x.reshape(-1, n, n).transpose(1, 2)
    return AttentionMap(s.reshape(*lead, n, n), normalized=False)


def short_term_attend(fused: AttentionMap, decoder_features: Tensor, gamma: Tensor) -> Tensor:
    """Residual update y = gamma * (A_hat @ f_d) + f_d inside the decoder."""
    if fused.scores.shape[-1] != decoder_features.shape[-2]:
        raise AttentionError("attention map and features disagree on N")
    return gamma * (fused.scores @ decoder_features) + decoder_features


def long_term_attend(
    fused: AttentionMap, encoder_features: Tensor, visible: Tensor, gamma: Tensor
) -> Tensor:
    """Fill missing positions with attended encoder features and pass the
    visible ones through untouched:
    y = gamma * (1 - m) * (A_hat @ f_e) + m * f_e."""
    if fused.scores.shape[-1] != encoder_features.shape[-2]:
        raise AttentionError("attention map and features disagree on N")
    m = visible.to(encoder_features.dtype)[..., None]
    attended = fused.scores @ encoder_features
    return gamma * (1.0 - m) * attended + m * encoder_features


def contextual_attend(decoder_features: Tensor, encoder_features: Tensor, visible: Tensor) -> Tensor:
    """Comparison baseline: holes copy a softmax-weighted mix of encoder
    features at visible positions only; no patch fusion, no learned scale."""
    m = visible.to(decoder_features.dtype)[..., None]
    sim = decoder_features @ encoder_features.transpose(-1, -2)
    sim = sim / decoder_features.shape[-1] ** 0.5
    blocked = sim.masked_fill(visible[..., None, :] == 0, float("-inf"))
    has_visible = visible.any(dim=-1)[..., None, None]
    safe = torch.where(has_visible, blocked, torch.zeros_like(blocked))
    weights = torch.softmax(safe, dim=-1)
    attended = weights @ torch.where(m.bool(), encoder_features, torch.zeros_like(encoder_features))
    attended = torch.where(has_visible, attended, torch.zeros_like(attended))
    return m * encoder_features + (1.0 - m) * attended


# --- visibility-weighted transformer attention ------------------------------


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, c = x.shape
    x = x.reshape(*lead, n, n_heads, c // n_heads)
    return x.transpose(-2, -3)  # [..., heads, N, C/heads]


def _merge_heads(x: Tensor) -> Tensor:
    x = x.transpose(-2, -3)
    *lead, n, h, ch = x.shape
    return x.reshape(*lead, n, h * ch)


def _qkv(tokens: Tensor, qkv_weight: Tensor, n_heads: int):
    c = tokens.shape[-1]
    if qkv_weight.shape != (3 * c, c):
        raise AttentionError(
            f"qkv weight must be [3C, C] = {(3 * c, c)}, got {tuple(qkv_weight.shape)}"
        )
    if c % n_heads:
        raise AttentionError(f"channels {c} not divisible by {n_heads} heads")
    qkv = tokens @ qkv_weight.t()
    q, k, v = qkv.split(c, dim=-1)
    return tuple(_split_heads(t, n_heads) for t in (q, k, v))


def self_attention_baseline(
    tokens: Tensor, qkv_weight: Tensor, n_heads: int, return_scores: bool = False
):
    """Plain multi-head self-attention (pre-norm transformer interior); heads
    are concatenated with no output projection."""
    q, k, v = _qkv(tokens, qkv_weight, n_heads)
    scale = q.shape[-1] ** -0.5
    attn = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
    out = _merge_heads(attn @ v)
    if return_scores:
        return out, attn
    return out


def masked_msa(
    tokens: Tensor,
    weights: Tensor,
    qkv_weight: Tensor,
    n_heads: int,
    return_scores: bool = False,
):
    """Self-attention whose post-softmax columns are scaled by the source
    token's visibility weight; rows are deliberately not renormalized, so a
    row's total mass equals the weighted sum of its softmax row."""
    if weights.shape != tokens.shape[:-1]:
        raise AttentionError(
            f"weights {tuple(weights.shape)} must match token layout "
            f"{tuple(tokens.shape[:-1])}"
        )
    if (weights < 0).any() or (weights > 1).any():
        raise AttentionError("visibility weights must lie in [0, 1]")
    q, k, v = _qkv(tokens, qkv_weight, n_heads)
    scale = q.shape[-1] ** -0.5
    attn = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
    attn = attn * weights[..., None, None, :]  # scale source columns per head
    out = _merge_heads(attn @ v)
    if return_scores:
        return out, attn
    return out


def amplify_weights(weights: Tensor) -> Tensor:
    """Between-layer update w <- sqrt(w): repeated amplification drives every
    positive weight toward full visibility 1."""
    if (weights <= 0).any():
        raise AttentionError("amplification needs strictly positive weights")
    return weights.sqrt()


# --- attention-aware fusion --------------------------------------------------


@dataclass
class FusionDetail:
    """Per-position branch weights and convex mixing inputs, for tests and
    debug endpoints."""

    weight_visible: Tensor  # [..., N]
    weight_missing: Tensor  # [..., N]
    value_visible: Tensor  # [..., N, C]
    value_missing: Tensor  # [..., N, C]


def attention_aware_fuse(
    decoder_features: Tensor,
    encoder_features: Tensor,
    visible: Tensor,
    phi_weight: Tensor,
    theta_weight: Tensor,
    gamma_scale: Tensor,
    gamma_bias: Tensor,
    alpha_scale: Tensor,
    alpha_bias: Tensor,
    return_detail: bool = False,
):
    """Mix encoder values from visible source positions with decoder values
    from missing ones.

    Scores A[j, i] = phi(x_d[j]) . theta(x_d[i]) are split by the source
    position's visibility; each half is softmaxed separately, visible columns
    aggregate encoder features, missing columns aggregate decoder features,
    and per-position confidences (modulated row maxima) pick the convex blend
    of the two. Falls back to the surviving branch when a mask is degenerate.
    Encoder features at missing positions and decoder features at visible
    positions are never read as values.
    """
    if decoder_features.shape != encoder_features.shape:
        raise AttentionError("decoder/encoder features must share a shape")
    if visible.shape != decoder_features.shape[:-1]:
        raise AttentionError(
            f"visibility {tuple(visible.shape)} must match token layout "
            f"{tuple(decoder_features.shape[:-1])}"
        )
    vis = visible.bool()
    neg_inf = float("-inf")
    sim = (decoder_features @ phi_weight.t()) @ (decoder_features @ theta_weight.t()).transpose(-1, -2)

    has_vis = vis.any(dim=-1)[..., None]  # [..., 1]
    has_mis = (~vis).any(dim=-1)[..., None]

    def branch(source_keep: Tensor, values: Tensor, has_any: Tensor):
        # Structurally exclude excluded-source values: their softmax weight is
        # exactly zero and the value tensor is zeroed at excluded rows, so
        # poisoned entries (NaN/Inf) can never reach the output.
        logits = sim.masked_fill(~source_keep[..., None, :], neg_inf)
        safe_logits = torch.where(has_any[..., None], logits, torch.zeros_like(sim))
        weights = torch.softmax(safe_logits, dim=-1)
        safe_values = torch.where(
            source_keep[..., None], values, torch.zeros_like(values)
        )
        aggregated = weights @ safe_values
        row_max = logits.max(dim=-1).values
        row_max = torch.where(has_any, row_max, torch.zeros_like(row_max))
        return aggregated, row_max

    z_vis, max_vis = branch(vis, encoder_features, has_vis)
    z_mis, max_mis = branch(~vis, decoder_features, has_mis)

    logit_vis = torch.where(
        has_vis, gamma_scale * max_vis + gamma_bias, torch.full_like(max_vis, neg_inf)
    )
    logit_mis = torch.where(
        has_mis, alpha_scale * max_mis + alpha_bias, torch.full_like(max_mis, neg_inf)
    )
    branch_weights = torch.softmax(torch.stack([logit_vis, logit_mis], dim=-1), dim=-1)
    w_vis = branch_weights[..., 0]
    w_mis = branch_weights[..., 1]

    # NaN-free combination for degenerate masks: pick the surviving branch by
    # selection, not by 0-weight multiplication.
    both = has_vis & has_mis
    blend = w_vis[..., None] * z_vis + w_mis[..., None] * z_mis
    fused = torch.where(both[..., None], blend, torch.where(has_vis[..., None], z_vis, z_mis))

    if return_detail:
        return fused, FusionDetail(w_vis, w_mis, z_vis, z_mis)
    return fused


# --- modules -----------------------------------------------------------------


class ShortLongTermAttention(nn.Module):
    """Decoder-side attention block over [B, C, H, W] feature maps.

    Computes one fused patch-attention map from decoder features, applies the
    short-term residual update to them, fills holes in the skip (encoder)
    features via the long-term branch, and adds the latter through a
    zero-initialized projection so a freshly built block is an exact identity
    on the decoder path.
    """

    def __init__(self, channels: int, attn_channels: int = 0):
        super().__init__()
        attn_channels = attn_channels or channels
        self.theta = nn.Conv2d(channels, attn_channels, 1, bias=False)
        self.gamma_short = nn.Parameter(torch.zeros(()))
        self.gamma_long = nn.Parameter(torch.zeros(()))
        self.long_proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.long_proj.weight)
        nn.init.zeros_(self.long_proj.bias)

    def forward(
        self,
        decoder_features: Tensor,
        encoder_features: Tensor,
        visible: Tensor,
        return_fused: bool = False,
    ):
        b, c, h, w = decoder_features.shape
        f_d = decoder_features.flatten(2).transpose(1, 2)  # [B, N, C]
        f_e = encoder_features.flatten(2).transpose(1, 2)
        vis = visible.reshape(b, h * w)
        attn = point_attention(f_d, self.theta.weight.reshape(self.theta.out_channels, c))
        fused = patch_fuse(attn, h, w)
        y_d = short_term_attend(fused, f_d, self.gamma_short)
        y_e = long_term_attend(fused, f_e, vis, self.gamma_long)
        y_e = y_e.transpose(1, 2).reshape(b, c, h, w)
        out = y_d.transpose(1, 2).reshape(b, c, h, w) + self.long_proj(y_e)
        if return_fused:
            return out, fused
        return out


class MaskedSelfAttention(nn.Module):
    """Multi-head self-attention over [B, N, C] tokens with visibility
    scaling; heads concatenate directly, no output projection."""

    def __init__(self, channels: int, n_heads: int):
        super().__init__()
        if channels % n_heads:
            raise AttentionError(f"channels {channels} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.qkv = nn.Linear(channels, 3 * channels, bias=False)

    def forward(self, tokens: Tensor, weights: Tensor) -> Tensor:
        return masked_msa(tokens, weights, self.qkv.weight, self.n_heads)


class AttentionAwareLayer(nn.Module):
    """Attention-aware fusion over [B, C, H, W] maps; initialized so both
    branch modulators are identity, giving symmetric tied inputs an exact
    half/half blend."""

    def __init__(self, channels: int, attn_channels: int = 0):
        super().__init__()
        attn_channels = attn_channels or channels
        self.phi = nn.Conv2d(channels, attn_channels, 1, bias=False)
        self.theta = nn.Conv2d(channels, attn_channels, 1, bias=False)
        self.gamma_scale = nn.Parameter(torch.ones(()))
        self.gamma_bias = nn.Parameter(torch.zeros(()))
        self.alpha_scale = nn.Parameter(torch.ones(()))
        self.alpha_bias = nn.Parameter(torch.zeros(()))

    def forward(
        self,
        decoder_features: Tensor,
        encoder_features: Tensor,
        visible: Tensor,
        return_detail: bool = False,
    ):
        b, c, h, w = decoder_features.shape
        x_d = decoder_features.flatten(2).transpose(1, 2)
        x_e = encoder_features.flatten(2).transpose(1, 2)
        vis = visible.reshape(b, h * w)
        out = attention_aware_fuse(
            x_d,
            x_e,
            vis,
            self.phi.weight.reshape(self.phi.out_channels, c),
            self.theta.weight.reshape(self.theta.out_channels, c),
            self.gamma_scale,
            self.gamma_bias,
            self.alpha_scale,
            self.alpha_bias,
            return_detail=return_detail,
        )
        if return_detail:
            fused, detail = out
            return fused.transpose(1, 2).reshape(b, c, h, w), detail
        return out.transpose(1, 2).reshape(b, c, h, w)


def attention_row_dump(fused: AttentionMap, grid_h: int, grid_w: int, query_rc) -> dict:
    """JSON-ready unnormalized fused-attention row for one query position.

    Returns grid dims, the query (row, col), the row of patch-fused scores
    over all source positions, and their sum for client-side checks.
    """
    r, c = int(query_rc[0]), int(query_rc[1])
    if not (0 <= r < grid_h and 0 <= c < grid_w):
        raise AttentionError(f"query ({r}, {c}) outside grid {grid_h}x{grid_w}")
    scores = fused.scores
    if scores.ndim == 3:
        if scores.shape[0] != 1:
            raise AttentionError("row dump expects a single map, got a batch")
        scores = scores[0]
    row = scores[r * grid_w + c].detach().cpu().double()
    return {
        "grid_h": grid_h,
        "grid_w": grid_w,
        "query": [r, c],
        "scores": [float(v) for v in row],
        "total": float(row.sum()),
    }

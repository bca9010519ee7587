"""Image-quality metrics, feature-space distances, and the bucketed
evaluation protocol.

Pixel metrics (l1, PSNR, SSIM) are computed on the best of k samples,
selected as the one closest to the ground truth.  Feature metrics use a
pluggable extractor; the desk-scale default is the frozen completion
discriminator's trunk, so absolute numbers are self-consistent but not
comparable to published values computed with pretrained networks — only
orderings carry over.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .masks import BUCKETS, Mask

__all__ = [
    "MetricError",
    "l1_distance",
    "psnr",
    "ssim",
    "feature_l1",
    "diversity_score",
    "frechet_distance",
    "MetricReport",
    "run_bucket_eval",
    "DiversityComparison",
    "diversity_comparison_experiment",
    "pooled_feature_extractor",
    "trunk_feature_extractor",
]

PSNR_CAP = 99.0
COVARIANCE_EPS = 1e-6
BUCKET_LABELS = tuple(b.label for b in BUCKETS)


class MetricError(ValueError):
    pass


def _paired(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    if a.ndim != 4:
        raise MetricError(f"expected [C,H,W] or [B,C,H,W] images, got ndim {a.ndim}")
    return a, b


def l1_distance(a: Tensor, b: Tensor) -> float:
    a, b = _paired(a, b)
    return (a - b).abs().mean().item()


def psnr(a: Tensor, b: Tensor, max_value: float = 1.0, cap: float = PSNR_CAP) -> float:
    """10*log10(max^2 / MSE) in decibels, capped for (near-)identical pairs."""
    a, b = _paired(a, b)
    mse = ((a - b) ** 2).mean().item()
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(max_value * max_value / mse))


def _gaussian_kernel(window: int, sigma: float, dtype, device) -> Tensor:
    half = (window - 1) / 2.0
    coords = torch.arange(window, dtype=dtype, device=device) - half
    g = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim(
    a: Tensor,
    b: Tensor,
    max_value: float = 1.0,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity over valid Gaussian windows."""
    a, b = _paired(a, b)
    if a.shape[2] < window or a.shape[3] < window:
        raise MetricError(f"images smaller than the {window}x{window} ssim window")
    channels = a.shape[1]
    kernel = _gaussian_kernel(window, sigma, a.dtype, a.device)
    kernel = kernel.expand(channels, 1, window, window).contiguous()

    def blur(x: Tensor) -> Tensor:
        return F.conv2d(x, kernel, groups=channels)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    c1 = (k1 * max_value) ** 2
    c2 = (k2 * max_value) ** 2
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return score.mean().item()


def feature_l1(features_a, features_b) -> float:
    """Mean absolute feature difference; accepts a tensor or a list of maps
    (each map averaged, then averaged across maps)."""
    if isinstance(features_a, Tensor):
        features_a, features_b = [features_a], [features_b]
    if len(features_a) != len(features_b) or not features_a:
        raise MetricError("feature lists must be non-empty and aligned")
    total = 0.0
    for fa, fb in zip(features_a, features_b):
        if fa.shape != fb.shape:
            raise MetricError("feature shapes differ")
        total += (fa - fb).abs().mean().item()
    return total / len(features_a)


def diversity_score(
    samples: Tensor,
    extractor: Callable,
    max_pairs: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Mean pairwise feature distance across completions of one input.

    `samples` is [K,C,H,W] with K >= 2; all unordered pairs are used unless
    `max_pairs` caps them with a seeded subsample."""
    if samples.ndim != 4 or samples.shape[0] < 2:
        raise MetricError("diversity needs [K,C,H,W] samples with K >= 2")
    k = samples.shape[0]
    with torch.no_grad():
        feats = [extractor(samples[i : i + 1]) for i in range(k)]
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    if max_pairs is not None and max_pairs < len(pairs):
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[int(c)] for c in sorted(chosen)]
    return sum(feature_l1(feats[i], feats[j]) for i, j in pairs) / len(pairs)


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh(matrix)
    values = np.clip(values, 0.0, None)
    return (vectors * np.sqrt(values)) @ vectors.T


def frechet_distance(features_a, features_b) -> float:
    """Squared Fréchet distance between Gaussian fits of two feature sets:
    |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    Covariances are regularized with 1e-6*I; the matrix square root uses an
    eigendecomposition of the symmetrized product."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError(
            f"expected [N,D] feature sets with equal D, got {a.shape} and {b.shape}"
        )
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise MetricError("need at least two feature vectors per set")
    dim = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + COVARIANCE_EPS * np.eye(dim)
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + COVARIANCE_EPS * np.eye(dim)
    root_a = _sqrt_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    inner = (inner + inner.T) / 2.0
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum()
    diff = mu_a - mu_b
    d2 = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


# --- extractors ---------------------------------------------------------------


def _default_disc(model):
    disc = getattr(model, "disc_gen", None)
    if disc is None:
        disc = getattr(model, "disc", None)
    if disc is None:
        raise MetricError(
            "model exposes no completion discriminator; pass an extractor"
        )
    return disc


def pooled_feature_extractor(disc) -> Callable[[Tensor], Tensor]:
    """Per-image pooled feature vectors [B, D] from a frozen discriminator."""

    def extract(images: Tensor) -> Tensor:
        with torch.no_grad():
            _, feats = disc(images)
        return feats

    return extract


def trunk_feature_extractor(disc) -> Callable[[Tensor], list]:
    """Per-image multi-scale trunk maps from a frozen discriminator."""

    def extract(images: Tensor) -> list:
        with torch.no_grad():
            return disc.trunk_features(images)

    return extract


# --- bucketed protocol --------------------------------------------------------

METRIC_KEYS = ("l1", "psnr", "ssim", "frechet", "diversity_full", "diversity_masked")


@dataclasses.dataclass
class MetricReport:
    """Per-bucket metric table over the six canonical mask-ratio buckets."""

    buckets: dict[str, dict[str, float]]
    sample_counts: dict[str, int]
    metadata: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.buckets.keys()) != BUCKET_LABELS:
            raise MetricError(
                f"report must carry the six canonical buckets, got {list(self.buckets)}"
            )
        for label, values in self.buckets.items():
            missing = [k for k in METRIC_KEYS if k not in values]
            if missing:
                raise MetricError(f"bucket {label} misses metrics {missing}")

    def to_json_dict(self) -> dict:
        return {
            "buckets": {k: dict(v) for k, v in self.buckets.items()},
            "sample_counts": dict(self.sample_counts),
            "metadata": dict(self.metadata),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json_dict(cls, data: dict) -> "MetricReport":
        return cls(
            buckets={k: dict(v) for k, v in data["buckets"].items()},
            sample_counts={k: int(v) for k, v in data["sample_counts"].items()},
            metadata=dict(data.get("metadata", {})),
        )

    def to_table(self) -> str:
        header = ["bucket", "n"] + list(METRIC_KEYS)
        rows = [header]
        for label in BUCKET_LABELS:
            values = self.buckets[label]
            rows.append(
                [label, str(self.sample_counts.get(label, 0))]
                + [f"{values[k]:.4f}" for k in METRIC_KEYS]
            )
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row))
                 for row in rows]
        return "\n".join(lines)


def _mask_to_visible(mask: Mask, dtype) -> Tensor:
    return torch.from_numpy(np.array(mask.grid, copy=True)).to(dtype)[None, None]


def _mean(values: Sequence[float]) -> float:
    return float(sum(values) / len(values)) if values else float("nan")


def run_bucket_eval(
    model,
    images: Tensor,
    masks_by_bucket: Mapping[str, Sequence[Mask]],
    k: int = 10,
    seed: int = 0,
    vector_extractor: Optional[Callable] = None,
    map_extractor: Optional[Callable] = None,
    top_ranked: int = 10,
    require_trained: bool = True,
) -> MetricReport:
    """Best-of-k pixel metrics and top-ranked feature metrics per bucket.

    For every image and mask the model draws k completions; the sample
    closest to the ground truth (l1) carries the pixel metrics, the
    `top_ranked` highest-scored samples feed the Fréchet pool, and all k
    samples feed the pairwise diversity scores."""
    if images.ndim != 4:
        raise MetricError("images must be [N,C,H,W]")
    if set(masks_by_bucket.keys()) != set(BUCKET_LABELS):
        raise MetricError("masks_by_bucket must cover exactly the six buckets")
    if vector_extractor is None:
        vector_extractor = pooled_feature_extractor(_default_disc(model))
    if map_extractor is None:
        map_extractor = trunk_feature_extractor(_default_disc(model))

    n_images = images.shape[0]
    buckets: dict[str, dict[str, float]] = {}
    counts: dict[str, int] = {}
    for bi, label in enumerate(BUCKET_LABELS):
        masks = masks_by_bucket[label]
        if not masks:
            raise MetricError(f"bucket {label} has no masks")
        generator = torch.Generator().manual_seed(seed * 7919 + bi)
        l1_vals: list[float] = []
        psnr_vals: list[float] = []
        ssim_vals: list[float] = []
        div_full: list[float] = []
        div_masked: list[float] = []
        real_feats: list[np.ndarray] = []
        fake_feats: list[np.ndarray] = []
        for i in range(n_images):
            truth = images[i : i + 1]
            mask = masks[i % len(masks)]
            visible = _mask_to_visible(mask, images.dtype)
            if visible.shape[2:] != truth.shape[2:]:
                raise MetricError(
                    f"mask {visible.shape[2:]} does not fit images {truth.shape[2:]}"
                )
            masked = truth * visible
            with torch.no_grad():
                samples, _scores = model.pluralistic_sample(
                    masked, visible, k, generator, require_trained=require_trained
                )
            errors = (samples - truth).abs().mean(dim=(1, 2, 3))
            best = samples[int(torch.argmin(errors))]
            l1_vals.append(l1_distance(best, truth[0]))
            psnr_vals.append(psnr(best, truth[0]))
            ssim_vals.append(ssim(best[None], truth))
            if k >= 2:
                div_full.append(diversity_score(samples, map_extractor))
                holes = (1.0 - visible) * samples
                div_masked.append(diversity_score(holes, map_extractor))
            with torch.no_grad():
                real_feats.append(vector_extractor(truth).cpu().numpy())
                ranked = samples[: min(top_ranked, k)]
                fake_feats.append(vector_extractor(ranked).cpu().numpy())
        frechet = frechet_distance(
            np.concatenate(fake_feats, axis=0), np.concatenate(real_feats, axis=0)
        )
        buckets[label] = {
            "l1": _mean(l1_vals),
            "psnr": _mean(psnr_vals),
            "ssim": _mean(ssim_vals),
            "frechet": frechet,
            "diversity_full": _mean(div_full) if div_full else 0.0,
            "diversity_masked": _mean(div_masked) if div_masked else 0.0,
        }
        counts[label] = n_images * k
    return MetricReport(
        buckets=buckets,
        sample_counts=counts,
        metadata={"k": k, "seed": seed, "top_ranked": top_ranked},
    )


# --- diversity comparison -----------------------------------------------------


@dataclasses.dataclass
class DiversityComparison:
    """Diversity and matched-quality numbers for several models evaluated on
    identical inputs with one shared frozen extractor."""

    rows: dict[str, dict[str, float]]
    metadata: dict = dataclasses.field(default_factory=dict)

    def ordering(self, metric: str = "diversity_masked") -> list[str]:
        return sorted(self.rows, key=lambda name: self.rows[name][metric], reverse=True)

    def to_json_dict(self) -> dict:
        return {"rows": {k: dict(v) for k, v in self.rows.items()},
                "metadata": dict(self.metadata)}

    def to_table(self) -> str:
        keys = ("diversity_full", "diversity_masked", "l1", "psnr", "ssim")
        header = ["model"] + list(keys)
        rows = [header]
        for name, values in self.rows.items():
            rows.append([name] + [f"{values[k]:.4f}" for k in keys])
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        return "\n".join(
            "  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row))
            for row in rows
        )


def diversity_comparison_experiment(
    models: Mapping[str, object],
    images: Tensor,
    masks: Sequence[Mask],
    k: int = 10,
    seed: int = 0,
    map_extractor: Optional[Callable] = None,
    require_trained: bool = True,
) -> DiversityComparison:
    """Sample every model on the same masked images and report pairwise
    diversity plus best-of-k quality, all under one shared extractor so the
    comparison is apples to apples."""
    if not models:
        raise MetricError("need at least one model")
    if images.ndim != 4 or images.shape[0] == 0:
        raise MetricError("images must be non-empty [N,C,H,W]")
    if not masks:
        raise MetricError("need at least one mask")
    if map_extractor is None:
        first = next(iter(models.values()))
        map_extractor = trunk_feature_extractor(_default_disc(first))

    rows: dict[str, dict[str, float]] = {}
    for name, model in models.items():
        generator = torch.Generator().manual_seed(seed)
        l1_vals, psnr_vals, ssim_vals = [], [], []
        div_full, div_masked = [], []
        for i in range(images.shape[0]):
            truth = images[i : i + 1]
            mask = masks[i % len(masks)]
            visible = _mask_to_visible(mask, images.dtype)
            masked = truth * visible
            with torch.no_grad():
                samples, _ = model.pluralistic_sample(
                    masked, visible, k, generator, require_trained=require_trained
                )
            errors = (samples - truth).abs().mean(dim=(1, 2, 3))
            best = samples[int(torch.argmin(errors))]
            l1_vals.append(l1_distance(best, truth[0]))
            psnr_vals.append(psnr(best, truth[0]))
            ssim_vals.append(ssim(best[None], truth))
            if k >= 2:
                div_full.append(diversity_score(samples, map_extractor))
                div_masked.append(diversity_score((1.0 - visible) * samples, map_extractor))
        rows[name] = {
            "diversity_full": _mean(div_full) if div_full else 0.0,
            "diversity_masked": _mean(div_masked) if div_masked else 0.0,
            "l1": _mean(l1_vals),
            "psnr": _mean(psnr_vals),
            "ssim": _mean(ssim_vals),
        }
    return DiversityComparison(
        rows=rows, metadata={"k": k, "seed": seed, "n_images": int(images.shape[0])}
    )

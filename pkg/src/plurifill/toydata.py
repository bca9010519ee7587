"""Procedural training images: colored geometric shapes on smooth gradients.

Every image is drawn from an explicit numpy Generator, so training streams
are reproducible and resumable by checkpointing the generator state.  Values
are float32 in [0, 1], channel-first.
"""

import numpy as np

from . import masks as masks_mod
from .masks import BUCKETS, Mask


def _gradient_background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = rng.uniform(0.05, 0.95, size=3)
    c1 = rng.uniform(0.05, 0.95, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    t = (np.cos(angle) * xs + np.sin(angle) * ys + 1.0) / 2.0
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0[:, None, None] + t[None] * (c1 - c0)[:, None, None]
    return img


def _shape_region(rng: np.random.Generator, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    kind = rng.integers(0, 3)
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    r = rng.uniform(0.1, 0.3) * size
    if kind == 0:  # disc
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= r**2
    if kind == 1:  # axis-aligned box
        hh, hw = rng.uniform(0.08, 0.25, size=2) * size
        return (np.abs(ys - cy) <= hh) & (np.abs(xs - cx) <= hw)
    # upright triangle
    h = rng.uniform(0.15, 0.35) * size
    return (ys >= cy - h / 2) & (ys <= cy + h / 2) & (
        np.abs(xs - cx) <= (ys - (cy - h / 2)) / 2
    )


def toy_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """One [3, size, size] float32 image: gradient plus 1-3 flat shapes."""
    img = _gradient_background(rng, size)
    for _ in range(int(rng.integers(1, 4))):
        region = _shape_region(rng, size)
        color = rng.uniform(0.0, 1.0, size=3)
        img = np.where(region[None], color[:, None, None], img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


class ToyShapes:
    """Stream of procedural images at a fixed square size."""

    def __init__(self, size: int = 64):
        if size < 8:
            raise ValueError(f"toy images need size >= 8, got {size}")
        self.size = size

    def sample_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.stack([toy_image(rng, self.size) for _ in range(n)])

    def sample_masks(self, rng: np.random.Generator, n: int, kind: str = "center") -> np.ndarray:
        """[n, 1, size, size] float32 visibility maps of the requested kind:
        center | free_form | random_rect | mixed."""
        out = []
        for _ in range(n):
            choice = kind
            if kind == "mixed":
                choice = ("center", "free_form", "random_rect")[int(rng.integers(0, 3))]
            if choice == "center":
                m = masks_mod.center_mask(self.size, self.size)
            elif choice == "free_form":
                bucket = BUCKETS[int(rng.integers(0, len(BUCKETS)))]
                m = masks_mod.free_form_mask(
                    self.size, self.size, seed=int(rng.integers(0, 2**63)), bucket=bucket
                )
            elif choice == "random_rect":
                m = masks_mod.random_rectangle_mask(
                    self.size, self.size, seed=int(rng.integers(0, 2**63))
                )
            else:
                raise ValueError(f"unknown mask kind {kind!r}")
            out.append(m.grid[None].astype(np.float32))
        return np.stack(out)


def write_demo_images(out_dir, count: int, size: int, seed: int):
    """Write deterministic sample PNGs; returns the file paths."""
    from pathlib import Path

    from PIL import Image

    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        img = toy_image(rng, size)
        arr = (img.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        path = out / f"toy_{i:04d}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths

"""Binary visibility masks: construction, ratio buckets, serialization.

Convention everywhere: 1 = visible pixel, 0 = missing pixel.  Masks are
immutable once built; all generators are pure functions of their arguments.
"""

import io
import json
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw


class MaskError(ValueError):
    pass


class MaskGenerationError(RuntimeError):
    """Raised when stochastic mask search exhausts its attempt budget."""


@dataclass(frozen=True)
class RatioBucket:
    """Half-open missing-ratio interval (lower, upper], except the first
    bucket which includes its lower edge."""

    lower: float
    upper: float
    label: str

    def contains(self, ratio: float) -> bool:
        if self.label == BUCKETS[0].label:
            return self.lower <= ratio <= self.upper
        return self.lower < ratio <= self.upper


BUCKETS = (
    RatioBucket(0.01, 0.1, "0.01-0.1"),
    RatioBucket(0.1, 0.2, "0.1-0.2"),
    RatioBucket(0.2, 0.3, "0.2-0.3"),
    RatioBucket(0.3, 0.4, "0.3-0.4"),
    RatioBucket(0.4, 0.5, "0.4-0.5"),
    RatioBucket(0.5, 0.6, "0.5-0.6"),
)

_BUCKET_BY_LABEL = {b.label: b for b in BUCKETS}


def bucket_by_label(label: str) -> RatioBucket:
    try:
        return _BUCKET_BY_LABEL[label]
    except KeyError:
        raise MaskError(f"unknown bucket label {label!r}; known: {sorted(_BUCKET_BY_LABEL)}")


def bucket_for(ratio: float) -> RatioBucket:
    """Bucket whose interval contains `ratio`; errors outside [0.01, 0.6]."""
    for b in BUCKETS:
        if b.contains(ratio):
            return b
    raise MaskError(f"missing ratio {ratio} outside the bucketed range [0.01, 0.6]")


@dataclass(frozen=True)
class Mask:
    """An immutable (height, width) uint8 grid of {0, 1}, 1 = visible."""

    grid: np.ndarray

    def __post_init__(self):
        g = self.grid
        if g.ndim != 2:
            raise MaskError(f"mask grid must be 2-D, got shape {g.shape}")
        if g.dtype != np.uint8:
            raise MaskError(f"mask grid must be uint8, got {g.dtype}")
        if g.size == 0:
            raise MaskError("mask grid must be non-empty")
        bad = (g != 0) & (g != 1)
        if bad.any():
            raise MaskError("mask grid entries must be 0 or 1")
        g.flags.writeable = False

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def n_missing(self) -> int:
        return int(self.grid.size - int(self.grid.sum()))

    def __eq__(self, other) -> bool:
        return isinstance(other, Mask) and np.array_equal(self.grid, other.grid)


def mask_ratio(mask: Mask) -> float:
    """Fraction of missing pixels, n_missing / (H * W)."""
    return mask.n_missing / mask.grid.size


def invert(mask: Mask) -> Mask:
    """Swap visible and missing regions (outpainting from inpainting masks)."""
    return Mask((1 - mask.grid).astype(np.uint8))


def full_mask(height: int, width: int) -> Mask:
    return Mask(np.ones((height, width), dtype=np.uint8))


def center_mask(height: int, width: int) -> Mask:
    """All-visible grid with a centered missing rectangle of half the side
    lengths (a quarter of the area)."""
    if height < 4 or width < 4 or height % 2 or width % 2:
        raise MaskError(f"center mask needs even dims >= 4, got {height}x{width}")
    grid = np.ones((height, width), dtype=np.uint8)
    r0, c0 = height // 4, width // 4
    grid[r0 : r0 + height // 2, c0 : c0 + width // 2] = 0
    return Mask(grid)


@dataclass(frozen=True)
class BrushParams:
    """Free-form stroke brush.  Thickness is specified at 256x256 and scaled
    with sqrt(area) for other sizes."""

    max_strokes: int = 8
    min_vertices: int = 4
    max_vertices: int = 32
    min_thickness: int = 2
    max_thickness: int = 12
    max_attempts: int = 64


def _draw_segment(draw, p0, p1, thickness: int):
    draw.line([p0, p1], fill=255, width=thickness)
    # Round caps keep strokes connected at sharp turns.
    r = thickness / 2.0
    for (x, y) in (p0, p1):
        draw.ellipse([x - r, y - r, x + r, y + r], fill=255)


def free_form_mask(
    height: int,
    width: int,
    seed: int,
    bucket: RatioBucket,
    params: BrushParams = BrushParams(),
) -> Mask:
    """Random brush-stroke mask whose missing ratio lands in `bucket`.

    Strokes are random walks drawn segment by segment; drawing stops as soon
    as the ratio enters the bucket and restarts on overshoot.  Deterministic
    in (height, width, seed, bucket).  Raises MaskGenerationError after
    `params.max_attempts` failed resamplings.
    """
    if height < 8 or width < 8:
        raise MaskError(f"free-form masks need dims >= 8, got {height}x{width}")
    rng = np.random.default_rng(seed)
    scale = math.sqrt(height * width) / 256.0
    t_lo = max(1, int(round(params.min_thickness * scale)))
    t_hi = max(t_lo, int(round(params.max_thickness * scale)))
    total = height * width

    for _ in range(params.max_attempts):
        img = Image.new("L", (width, height), 0)
        draw = ImageDraw.Draw(img)
        # Bias brush width toward the bucket target so thin buckets are
        # reachable and thick buckets do not need hundreds of strokes.
        target = rng.uniform(bucket.lower, bucket.upper)
        t_cap = t_lo + (t_hi - t_lo) * min(1.0, target / BUCKETS[-1].upper)
        missing = 0
        done = False
        mean_vertices = 0.5 * (params.min_vertices + params.max_vertices)
        for _stroke in range(params.max_strokes):
            n_vertices = int(rng.integers(params.min_vertices, params.max_vertices + 1))
            thickness = int(rng.integers(t_lo, max(t_lo, int(round(t_cap))) + 1))
            # Walk step sized so the full stroke budget covers ~2x the target
            # area; the per-segment early stop below prevents overshoot.
            step = max(
                3.0,
                2.0 * target * total / (params.max_strokes * mean_vertices * thickness),
            )
            x = float(rng.uniform(0.1 * width, 0.9 * width))
            y = float(rng.uniform(0.1 * height, 0.9 * height))
            angle = float(rng.uniform(0, 2 * math.pi))
            for _v in range(n_vertices):
                angle += float(rng.uniform(-0.9, 0.9))
                length = float(rng.uniform(0.5, 1.5)) * step
                nx = x + length * math.cos(angle)
                ny = y + length * math.sin(angle)
                if not (0.0 <= nx <= width - 1.0 and 0.0 <= ny <= height - 1.0):
                    angle += math.pi / 2.0  # bounce off the border
                    nx = min(max(nx, 0.0), width - 1.0)
                    ny = min(max(ny, 0.0), height - 1.0)
                _draw_segment(draw, (x, y), (nx, ny), thickness)
                x, y = nx, ny
                missing = total - (np.asarray(img) == 0).sum()
                if missing / total >= bucket.lower:
                    done = True
                    break
            if done:
                break
        ratio = missing / total
        if bucket.contains(ratio):
            grid = (np.asarray(img) == 0).astype(np.uint8)
            return Mask(grid)
        # Overshot or undershot: resample every stroke parameter.
    raise MaskGenerationError(
        f"no {height}x{width} free-form mask in ({bucket.lower}, {bucket.upper}] "
        f"after {params.max_attempts} attempts (strokes<={params.max_strokes}, "
        f"thickness {t_lo}..{t_hi})"
    )


def random_rectangle_mask(
    height: int,
    width: int,
    seed: int,
    n_rectangles: tuple = (1, 4),
    side_fraction: tuple = (0.15, 0.5),
) -> Mask:
    """Mask with one or more random missing rectangles.  The count and size
    ranges are explicit configuration, not fixed constants."""
    rng = np.random.default_rng(seed)
    grid = np.ones((height, width), dtype=np.uint8)
    n = int(rng.integers(n_rectangles[0], n_rectangles[1] + 1))
    for _ in range(n):
        rh = max(1, int(rng.uniform(*side_fraction) * height))
        rw = max(1, int(rng.uniform(*side_fraction) * width))
        r0 = int(rng.integers(0, max(1, height - rh + 1)))
        c0 = int(rng.integers(0, max(1, width - rw + 1)))
        grid[r0 : r0 + rh, c0 : c0 + rw] = 0
    return Mask(grid)


def downsample_mask(mask: Mask, factor: int) -> np.ndarray:
    """Blockwise-mean visibility at a coarser resolution.

    Returns float64 in [0, 1]; factor must be a power of two dividing both
    dimensions.  Total visible mass is preserved exactly:
    sum(out) * factor**2 == sum(grid).
    """
    if factor < 1 or (factor & (factor - 1)) != 0:
        raise MaskError(f"downsample factor must be a power of two, got {factor}")
    h, w = mask.grid.shape
    if h % factor or w % factor:
        raise MaskError(f"factor {factor} does not divide mask dims {h}x{w}")
    g = mask.grid.astype(np.float64)
    return g.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


# --- serialization ---------------------------------------------------------


def to_png(mask: Mask) -> bytes:
    """Single-channel 8-bit PNG, 255 = visible, 0 = missing."""
    img = Image.fromarray(mask.grid * np.uint8(255), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def from_png(data: bytes) -> Mask:
    img = Image.open(io.BytesIO(data))
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise MaskError(f"mask PNG must be single-channel, got shape {arr.shape}")
    vals = np.unique(arr)
    if not np.isin(vals, (0, 255)).all():
        raise MaskError(f"mask PNG values must be 0 or 255, got {vals[:8]}")
    return Mask((arr == 255).astype(np.uint8))


def to_rle(mask: Mask) -> dict:
    """Row-major run-length encoding: alternating run lengths starting with
    a (possibly zero) run of missing pixels.  {"h": H, "w": W, "rle": [...]}"""
    flat = mask.grid.reshape(-1)
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate([[0], boundaries, [flat.size]])
    runs = [int(r) for r in np.diff(edges)]
    if int(flat[0]) != 0:
        runs.insert(0, 0)  # encoding always starts with the missing-run count
    return {"h": mask.height, "w": mask.width, "rle": runs}


def from_rle(payload: dict) -> Mask:
    try:
        h, w, runs = int(payload["h"]), int(payload["w"]), list(payload["rle"])
    except (KeyError, TypeError) as exc:
        raise MaskError(f"RLE payload needs keys h, w, rle: {exc}")
    if h < 1 or w < 1:
        raise MaskError(f"RLE dims must be positive, got {h}x{w}")
    if any((not isinstance(r, int)) or isinstance(r, bool) or r < 0 for r in runs):
        raise MaskError("RLE runs must be non-negative integers")
    if sum(runs) != h * w:
        raise MaskError(f"RLE runs sum to {sum(runs)}, expected {h * w}")
    flat = np.empty(h * w, dtype=np.uint8)
    value = 0
    pos = 0
    for run in runs:
        flat[pos : pos + run] = value
        pos += run
        value ^= 1
    return Mask(flat.reshape(h, w))


def rle_json(mask: Mask) -> str:
    return json.dumps(to_rle(mask), separators=(",", ":"))

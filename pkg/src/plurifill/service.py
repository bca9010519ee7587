"""HTTP facade for the interactive editor: content-addressed image store,
pluralistic sampling, deterministic transformer completion, and attention
probes.

All state lives in a local on-disk store (`store/<first2>/<hash>.png`,
written atomically); model weights are read-only shared state, and every
request that samples derives its own torch Generator from the request seed,
so concurrent requests never share RNG state.
"""

import hashlib
import io
import os
import secrets
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field, model_validator

from . import masks as masks_mod
from .dual_pipeline import ConfigError, DualPipelineModel
from .masks import Mask, MaskError, bucket_for, mask_ratio
from .training import model_from_checkpoint
from .transformer_fill import TransformerFillModel

TFILL_SIZE_STEP = 32


@dataclass(frozen=True)
class ServiceConfig:
    store_dir: str
    max_upload_bytes: int = 8 * 1024 * 1024
    cors_origins: tuple = ("*",)


class ImageStore:
    """Content-addressed PNG store: `<root>/<first2>/<hash>.png`.

    Uploads are canonicalized (RGB, or single-channel L for grayscale masks)
    and keyed by the sha256 of the uploaded bytes; generated samples are
    keyed by the sha256 of their canonical PNG encoding.  Writes go to a
    temp file in the target directory and are renamed into place, so
    concurrent puts of the same content are safe.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, image_id: str) -> Path:
        return self.root / image_id[:2] / f"{image_id}.png"

    def exists(self, image_id: str) -> bool:
        if len(image_id) != 64 or any(c not in "0123456789abcdef" for c in image_id):
            return False
        return self._path(image_id).is_file()

    def _write(self, path: Path, data: bytes):
        if path.is_file():
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.parent / f".tmp-{os.getpid()}-{secrets.token_hex(8)}"
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def put_upload(self, data: bytes):
        """Validate and store an uploaded PNG/JPEG; returns (id, w, h)."""
        try:
            probe = Image.open(io.BytesIO(data))
            probe.verify()
            img = Image.open(io.BytesIO(data))
            img.load()
        except (UnidentifiedImageError, OSError, SyntaxError):
            raise HTTPException(415, "body is not a decodable image")
        if img.format not in ("PNG", "JPEG"):
            raise HTTPException(415, f"unsupported format {img.format}; use PNG or JPEG")
        if img.mode in ("RGB", "L"):
            canon = img
        elif img.mode == "1":  # bilevel masks stay single-channel
            canon = img.convert("L")
        else:
            canon = img.convert("RGB")
        buf = io.BytesIO()
        canon.save(buf, format="PNG")
        image_id = hashlib.sha256(data).hexdigest()
        self._write(self._path(image_id), buf.getvalue())
        return image_id, canon.width, canon.height

    def put_array(self, rgb: np.ndarray) -> str:
        """Store an [H, W, 3] uint8 array; returns its content id."""
        buf = io.BytesIO()
        Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
        data = buf.getvalue()
        image_id = hashlib.sha256(data).hexdigest()
        self._write(self._path(image_id), data)
        return image_id

    def raw(self, image_id: str) -> bytes:
        if not self.exists(image_id):
            raise HTTPException(404, f"unknown image {image_id!r}")
        return self._path(image_id).read_bytes()

    def load_rgb(self, image_id: str) -> np.ndarray:
        """[H, W, 3] uint8 view of a stored image (grayscale replicated)."""
        img = Image.open(io.BytesIO(self.raw(image_id)))
        if img.mode != "RGB":
            img = img.convert("RGB")
        return np.asarray(img)


# --- request schemas -------------------------------------------------------------


class MaskPayload(BaseModel):
    rle: dict | None = None
    png_id: str | None = None

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.rle is None) == (self.png_id is None):
            raise ValueError("mask needs exactly one of 'rle' or 'png_id'")
        return self


class CompletionRequest(BaseModel):
    image_id: str
    mask: MaskPayload
    k: int = Field(default=1, ge=1, le=16)
    model: str = "picnet"
    seed: int | None = None


class ProbeRequest(BaseModel):
    image_id: str
    mask: MaskPayload
    query: tuple[int, int]
    model: str = "picnet"


# --- app ------------------------------------------------------------------------

MODEL_ROLES = {
    "picnet": DualPipelineModel.KIND,
    "tfill": TransformerFillModel.KIND,
}


class CompletionUnsupported(ValueError):
    """Input shape the requested model cannot serve."""


def _to_u8(x: torch.Tensor) -> np.ndarray:
    """[1, 3, H, W] float in [0, 1] to [H, W, 3] uint8."""
    arr = x[0].clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def _composite_u8(original: np.ndarray, sample: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Visible pixels come from the original bytes, holes from the sample."""
    return np.where(grid[..., None].astype(bool), original, sample)


def _to_model_tensors(original: np.ndarray, grid: np.ndarray):
    image = torch.from_numpy(original.astype(np.float32) / 255.0).permute(2, 0, 1)[None]
    visible = torch.from_numpy(grid.astype(np.float32))[None, None]
    return image, visible


def _resize_pair(image: torch.Tensor, visible: torch.Tensor, size: int):
    image = F.interpolate(image, size=(size, size), mode="bilinear", align_corners=False)
    visible = F.interpolate(visible, size=(size, size), mode="nearest")
    return image, visible


@torch.no_grad()
def picnet_samples(model, original: np.ndarray, grid: np.ndarray, k: int,
                   generator: torch.Generator):
    """k ranked pluralistic samples at the original resolution.

    Returns (samples [k, 3, H, W], scores [k], warnings); inputs away from
    the training resolution are resampled through the model and upscaled
    back (holes only survive compositing).
    """
    h, w = original.shape[:2]
    size = model.cfg.image_size
    warnings = []
    image, visible = _to_model_tensors(original, grid)
    if (h, w) != (size, size):
        warnings.append(
            f"picnet runs at {size}x{size}; input {h}x{w} was resampled and "
            "holes were upscaled back"
        )
        image, visible = _resize_pair(image, visible, size)
    samples, scores = model.pluralistic_sample(
        image * visible, visible, k, generator, require_trained=False
    )
    if samples.shape[-2:] != (h, w):
        samples = F.interpolate(samples, size=(h, w), mode="bilinear", align_corners=False)
    return samples, scores, warnings


@torch.no_grad()
def tfill_samples(model, original: np.ndarray, grid: np.ndarray, k: int):
    """k copies of the deterministic transformer completion plus its score."""
    h, w = original.shape[:2]
    if h % TFILL_SIZE_STEP or w % TFILL_SIZE_STEP:
        raise CompletionUnsupported(
            f"tfill needs sides that are multiples of {TFILL_SIZE_STEP}, got {h}x{w}"
        )
    size = model.cfg.refinement_size
    warnings = []
    image, visible = _to_model_tensors(original, grid)
    if (h, w) != (size, size):
        warnings.append(f"tfill runs at {size}x{size}; input {h}x{w} was resampled")
        image, visible = _resize_pair(image, visible, size)
    refined = model.complete(image * visible, visible)
    score_map, _ = model.disc_refine(refined)
    score = float(score_map.mean())
    if refined.shape[-2:] != (h, w):
        refined = F.interpolate(refined, size=(h, w), mode="bilinear", align_corners=False)
    return refined.repeat(k, 1, 1, 1), torch.full((k,), score), warnings


def composite_samples(original: np.ndarray, samples: torch.Tensor, grid: np.ndarray):
    """Quantize each sample and paste the original's visible bytes over it."""
    return [
        _composite_u8(original, _to_u8(samples[i : i + 1]), grid)
        for i in range(samples.shape[0])
    ]


def create_app(config: ServiceConfig, models: dict = None) -> FastAPI:
    """Build the API over a store directory and a name -> model mapping.

    `models` values may be loaded modules or checkpoint paths; names
    'picnet' and 'tfill' must carry the matching model kind.
    """
    store = ImageStore(config.store_dir)
    registry = {}
    for name, entry in (models or {}).items():
        model = entry if isinstance(entry, torch.nn.Module) else model_from_checkpoint(entry)
        expected = MODEL_ROLES.get(name)
        kind = getattr(model, "KIND", None)
        if expected is not None and kind != expected:
            raise ValueError(f"model {name!r} must be kind {expected!r}, got {kind!r}")
        model.eval()
        registry[name] = model

    app = FastAPI(title="plurifill service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(config.cors_origins),
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.store = store
    app.state.registry = registry

    def _model_for(name: str):
        if name not in MODEL_ROLES:
            raise HTTPException(422, f"unknown model {name!r}, expected one of {sorted(MODEL_ROLES)}")
        if name not in registry:
            raise HTTPException(503, f"model {name!r} is not loaded")
        return registry[name]

    def _resolve_mask(payload: MaskPayload) -> Mask:
        try:
            if payload.rle is not None:
                return masks_mod.from_rle(payload.rle)
            return masks_mod.from_png(store.raw(payload.png_id))
        except MaskError as exc:
            raise HTTPException(422, f"bad mask: {exc}")

    def _checked_inputs(image_id: str, payload: MaskPayload):
        original = store.load_rgb(image_id)
        mask = _resolve_mask(payload)
        if mask.grid.shape != original.shape[:2]:
            raise HTTPException(
                409,
                f"mask {mask.grid.shape[0]}x{mask.grid.shape[1]} does not match "
                f"image {original.shape[0]}x{original.shape[1]}",
            )
        return original, mask

    @app.post("/v1/images")
    async def upload_image(request: Request):
        body = await request.body()
        if len(body) > config.max_upload_bytes:
            raise HTTPException(413, f"upload exceeds {config.max_upload_bytes} bytes")
        image_id, width, height = store.put_upload(body)
        return {"image_id": image_id, "width": width, "height": height}

    @app.get("/v1/images/{image_id}")
    def get_image(image_id: str):
        return Response(content=store.raw(image_id), media_type="image/png")

    @app.get("/v1/models")
    def list_models():
        out = []
        for name, model in sorted(registry.items()):
            cfg = model.cfg
            entry = {"name": name, "kind": model.KIND}
            if model.KIND == TransformerFillModel.KIND:
                entry["input_size"] = cfg.refinement_size
                entry["steps"] = int(model.coarse_steps) + int(model.refine_steps)
            else:
                entry["input_size"] = cfg.image_size
                entry["steps"] = int(model.train_steps)
            out.append(entry)
        return out

    @app.post("/v1/masks/echo")
    def echo_mask(payload: MaskPayload):
        mask = _resolve_mask(payload)
        ratio = mask_ratio(mask)
        try:
            bucket = bucket_for(ratio).label
        except MaskError:
            bucket = None
        return {
            "rle": masks_mod.to_rle(mask),
            "width": mask.width,
            "height": mask.height,
            "ratio": ratio,
            "bucket": bucket,
        }

    @app.post("/v1/complete")
    def complete(req: CompletionRequest):
        model = _model_for(req.model)
        original, mask = _checked_inputs(req.image_id, req.mask)
        seed = req.seed if req.seed is not None else secrets.randbits(31)
        try:
            if req.model == "picnet":
                generator = torch.Generator().manual_seed(seed)
                samples, scores, warnings = picnet_samples(
                    model, original, mask.grid, req.k, generator
                )
            else:
                samples, scores, warnings = tfill_samples(model, original, mask.grid, req.k)
        except CompletionUnsupported as exc:
            raise HTTPException(409, str(exc))
        refs = [
            f"/v1/images/{store.put_array(composed)}"
            for composed in composite_samples(original, samples, mask.grid)
        ]
        return {
            "samples": refs,
            "scores": [float(s) for s in scores],
            "seed": seed,
            "model": req.model,
            "warnings": warnings,
        }

    @app.post("/v1/attention_probe")
    def attention_probe(req: ProbeRequest):
        model = _model_for(req.model)
        original, mask = _checked_inputs(req.image_id, req.mask)
        h, w = original.shape[:2]
        y, x = req.query
        if not (0 <= y < h and 0 <= x < w):
            raise HTTPException(422, f"query ({y}, {x}) outside image {h}x{w}")
        size = model.cfg.image_size if req.model == "picnet" else model.cfg.coarse_size
        image, visible = _to_model_tensors(original, mask.grid)
        if (h, w) != (size, size):
            image, visible = _resize_pair(image, visible, size)
            y, x = y * size // h, x * size // w
        try:
            with torch.no_grad():
                if req.model == "picnet":
                    dump = model.attention_probe(image * visible, visible, (y, x))
                else:
                    dump = model.attention_probe(image, visible, (y, x))
        except ConfigError as exc:
            raise HTTPException(409, str(exc))
        dump["model"] = req.model
        return dump

    return app

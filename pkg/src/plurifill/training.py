"""Staged optimization loops for both completion models.

Dual-path training runs in two stages: the reconstructive path alone first
(posterior, generator, reconstruction discriminator), then the joint schedule
with both paths and both discriminators.  Transformer training likewise:
coarse network at coarse resolution first, then the refinement network with
coarse weights frozen.  A fixed-prior CVAE loop reproduces the
diversity-collapse baseline.

Every loop draws data from a numpy Generator and noise from a torch
Generator, steps Adam 1:1 for generator and discriminator sides, appends one
JSON-lines record per step, and checkpoints model weights, optimizer moments,
and both RNG states so a resumed run is bitwise identical to an unbroken one.
"""

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from itertools import chain
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    CheckpointData,
    generator_state_array,
    load_checkpoint,
    load_generator_state,
    load_optimizer_arrays,
    load_state_dict_arrays,
    numpy_rng_state,
    optimizer_arrays,
    restore_numpy_rng,
    save_checkpoint,
    state_dict_arrays,
)
from .dual_pipeline import (
    CvaeBaselineModel,
    DualPipelineConfig,
    DualPipelineModel,
    adaptive_scales,
)
from .latent import batched_adaptive_kl, kl_divergence, sample as sample_latent, unit_prior_like
from .losses import (
    LossReport,
    dual_path_total,
    loss_adversarial_generator,
    loss_appearance_generative,
    loss_appearance_reconstructive,
    loss_discriminator,
    loss_feature_match,
    loss_kl_generative,
    perceptual_distance,
    transformer_total,
)
from .transformer_fill import TransformerFillConfig, TransformerFillModel


class TrainError(RuntimeError):
    pass


class DivergenceError(TrainError):
    """Non-finite loss; `step` records the offending optimization step."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


STAGES = {
    "picnet_recon": "dual_pipeline",
    "picnet_joint": "dual_pipeline",
    "tfill_coarse": "transformer_fill",
    "tfill_refine": "transformer_fill",
    "cvae_baseline": "cvae_baseline",
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    steps: int
    batch_size: int = 4
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    seed: int = 0
    mask_kind: str = "mixed"
    alpha_kl: float = 1.0
    alpha_app: float = 1.0
    alpha_ad: float = 0.1
    stop_gradient_kl_g: bool = False
    checkpoint_every: int = 0
    out_dir: str = "runs/train"
    log_path: str = ""

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainError(f"unknown stage {self.stage!r}, expected one of {sorted(STAGES)}")
        if self.steps <= 0:
            raise TrainError(f"steps must be positive, got {self.steps}")
        if self.batch_size <= 0:
            raise TrainError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise TrainError("learning rates must be positive")
        if self.checkpoint_every < 0:
            raise TrainError("checkpoint_every must be >= 0")


def train_config_from_file(path) -> TrainConfig:
    """Load a TrainConfig from a .toml or .json file."""
    p = Path(path)
    try:
        if p.suffix == ".toml":
            import tomli

            payload = tomli.loads(p.read_text())
        elif p.suffix == ".json":
            payload = json.loads(p.read_text())
        else:
            raise TrainError(f"config must be .toml or .json, got {p.suffix!r}")
        return TrainConfig(**payload)
    except (OSError, ValueError, TypeError) as exc:
        if isinstance(exc, TrainError):
            raise
        raise TrainError(f"cannot load train config {path}: {exc}")


class TrainLogger:
    """In-memory record list, optionally mirrored to a JSON-lines file."""

    def __init__(self, path=""):
        self.path = str(path) if path else ""
        self.records = []

    def log(self, record: dict):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    checkpoint_path: str
    reports: list
    final_step: int


# --- model factory -------------------------------------------------------------

MODEL_KINDS = {
    DualPipelineModel.KIND: (DualPipelineModel, DualPipelineConfig),
    CvaeBaselineModel.KIND: (CvaeBaselineModel, DualPipelineConfig),
    TransformerFillModel.KIND: (TransformerFillModel, TransformerFillConfig),
}


def build_model(kind: str, config: dict) -> torch.nn.Module:
    if kind not in MODEL_KINDS:
        raise TrainError(f"unknown model kind {kind!r}, expected one of {sorted(MODEL_KINDS)}")
    model_cls, cfg_cls = MODEL_KINDS[kind]
    try:
        return model_cls(cfg_cls(**config))
    except TypeError as exc:
        raise TrainError(f"bad config for {kind!r}: {exc}")


def model_from_checkpoint(source) -> torch.nn.Module:
    """Rebuild the saved model (weights and buffers) in eval mode."""
    data = source if isinstance(source, CheckpointData) else load_checkpoint(source)
    model = build_model(data.kind, data.config)
    load_state_dict_arrays(model, data.arrays)
    model.eval()
    return model


# --- loop plumbing -------------------------------------------------------------


def _require_kind(model, expected: str):
    kind = getattr(model, "KIND", None)
    if kind != expected:
        raise TrainError(f"stage needs a {expected!r} model, got {kind!r}")


def _require_data_size(data, expected: int):
    size = getattr(data, "size", None)
    if size != expected:
        raise TrainError(f"stage needs {expected}px samples, dataset yields {size}")


def _next_batch(data, rng: np.random.Generator, cfg: TrainConfig):
    images = torch.from_numpy(data.sample_batch(rng, cfg.batch_size))
    visible = torch.from_numpy(data.sample_masks(rng, cfg.batch_size, cfg.mask_kind))
    return images, visible


def _latent_noise(model, batch: int, generator: torch.Generator):
    g = model.cfg.latent_grid
    shape = (batch, model.cfg.latent_channels, g, g)
    return torch.randn(shape, generator=generator)


def _write_checkpoint(path, model, cfg: TrainConfig, step: int, g_opt, d_opt, noise, rng):
    arrays = dict(state_dict_arrays(model))
    arrays.update(optimizer_arrays(g_opt, "opt_g/"))
    arrays.update(optimizer_arrays(d_opt, "opt_d/"))
    arrays["rng/torch"] = generator_state_array(noise)
    save_checkpoint(
        path,
        model.KIND,
        model.cfg,
        step,
        arrays,
        extra={
            "stage": cfg.stage,
            "numpy_rng": numpy_rng_state(rng),
            "train_config": dataclasses.asdict(cfg),
        },
    )
    return str(path)


def _setup(model, cfg: TrainConfig, g_params, d_params, resume):
    g_opt = torch.optim.Adam(list(g_params), lr=cfg.lr_generator)
    d_opt = torch.optim.Adam(list(d_params), lr=cfg.lr_discriminator)
    noise = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    start = 0
    if resume is not None:
        data = resume if isinstance(resume, CheckpointData) else load_checkpoint(resume)
        data.require_kind(model.KIND)
        if data.extra.get("stage") != cfg.stage:
            raise TrainError(
                f"checkpoint holds stage {data.extra.get('stage')!r}, expected {cfg.stage!r}"
            )
        load_state_dict_arrays(model, data.arrays)
        load_optimizer_arrays(g_opt, data.arrays, "opt_g/")
        load_optimizer_arrays(d_opt, data.arrays, "opt_d/")
        load_generator_state(noise, data.arrays["rng/torch"])
        rng = restore_numpy_rng(data.extra["numpy_rng"])
        start = data.step
        if start >= cfg.steps:
            raise TrainError(f"checkpoint already at step {start}, cfg asks for {cfg.steps}")
    return g_opt, d_opt, noise, rng, start


def _run_stage(model, data, cfg, g_params, d_params, step_fn, counter: str,
               resume=None, logger=None, after_backward=None) -> TrainResult:
    g_opt, d_opt, noise, rng, start = _setup(model, cfg, g_params, d_params, resume)
    logger = logger or TrainLogger(cfg.log_path)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    t0 = time.monotonic()
    model.train()
    for step in range(start, cfg.steps):
        images, visible = _next_batch(data, rng, cfg)
        total, report, d_loss = step_fn(model, images, visible, noise, cfg)
        d_value = float(d_loss.detach().item())
        if not math.isfinite(report.total) or not math.isfinite(d_value):
            raise DivergenceError(
                f"non-finite loss at step {step} "
                f"(generator {report.total}, discriminator {d_value})",
                step=step,
            )
        g_opt.zero_grad(set_to_none=True)
        total.backward()
        if after_backward is not None:
            after_backward(model)
        g_opt.step()
        d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        d_opt.step()
        counter_buf = getattr(model, counter)
        counter_buf += 1
        reports.append(report)
        logger.log(
            {
                "step": step + 1,
                "stage": cfg.stage,
                "loss": report.to_json_dict(),
                "disc_loss": d_value,
                "wall_time": time.monotonic() - t0,
            }
        )
        done = step + 1
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
            _write_checkpoint(
                out_dir / f"{cfg.stage}_step{done:06d}.ckpt",
                model, cfg, done, g_opt, d_opt, noise, rng,
            )
    path = _write_checkpoint(
        out_dir / f"{cfg.stage}_final.ckpt", model, cfg, cfg.steps, g_opt, d_opt, noise, rng
    )
    model.eval()
    return TrainResult(checkpoint_path=path, reports=reports, final_step=cfg.steps)


# --- dual-path stages ----------------------------------------------------------


def _stage1_step(model, images, visible, noise, cfg):
    """Reconstructive path only: posterior code, full reconstruction, D1."""
    masked = images * visible
    complement = images * (1.0 - visible)
    feats = model.visible_encoder(masked, visible)
    q = model.encode_complement(complement, visible)
    eps = _latent_noise(model, images.shape[0], noise)
    recon = model.generator(sample_latent(q, eps), feats, visible)

    scales = adaptive_scales(visible).clamp_min(1.0 / model.cfg.image_size**2)
    kl_r = batched_adaptive_kl(q, scales).mean()
    app_r = loss_appearance_reconstructive(recon, images)
    _, fake_feats = model.disc_rec(recon)
    with torch.no_grad():
        _, real_feats = model.disc_rec(images)
    ad_r = loss_feature_match(fake_feats, real_feats)
    total = cfg.alpha_kl * kl_r + cfg.alpha_app * app_r + cfg.alpha_ad * ad_r
    report = LossReport.from_terms(
        {"kl_r": kl_r.detach().item(), "app_r": app_r.detach().item(),
         "ad_r": ad_r.detach().item()},
        {"kl_r": cfg.alpha_kl, "app_r": cfg.alpha_app, "ad_r": cfg.alpha_ad},
    )
    real_scores, _ = model.disc_rec(images)
    fake_scores, _ = model.disc_rec(recon.detach())
    d_loss = loss_discriminator(real_scores, fake_scores)
    return total, report, d_loss


def _assert_prior_head_untouched(model):
    for p in model.conditional_prior_head.parameters():
        if p.grad is not None and p.grad.abs().max().item() != 0.0:
            raise TrainError("reconstructive stage leaked gradients into the prior head")


def train_picnet_stage1(model, data, cfg: TrainConfig, resume=None, logger=None) -> TrainResult:
    """Reconstructive-path warm-up; the conditional prior head never sees a
    gradient (checked every step)."""
    _require_kind(model, DualPipelineModel.KIND)
    if cfg.stage != "picnet_recon":
        raise TrainError(f"cfg.stage is {cfg.stage!r}, expected 'picnet_recon'")
    _require_data_size(data, model.cfg.image_size)
    g_params = chain(
        model.visible_encoder.parameters(),
        model.complement_encoder.parameters(),
        model.posterior_head.parameters(),
        model.generator.parameters(),
    )
    return _run_stage(
        model, data, cfg, g_params, model.disc_rec.parameters(),
        _stage1_step, "train_steps", resume=resume, logger=logger,
        after_backward=_assert_prior_head_untouched,
    )


def _stage2_step(model, images, visible, noise, cfg):
    """Both paths, six loss terms, both discriminators."""
    noise_rec = _latent_noise(model, images.shape[0], noise)
    noise_gen = _latent_noise(model, images.shape[0], noise)
    out = model.dual_forward(images, visible, noise_rec, noise_gen)

    kl_r = model.adaptive_kl(out)
    kl_g = loss_kl_generative(out.posterior, out.conditional_prior,
                              cfg.stop_gradient_kl_g)
    app_r = loss_appearance_reconstructive(out.reconstructed, images)
    app_g = loss_appearance_generative(out.generated, images, visible)
    _, fake_feats = model.disc_rec(out.reconstructed)
    with torch.no_grad():
        _, real_feats = model.disc_rec(images)
    ad_r = loss_feature_match(fake_feats, real_feats)
    gen_scores, _ = model.disc_gen(out.generated)
    ad_g = loss_adversarial_generator(gen_scores)
    total, report = dual_path_total(
        kl_r, kl_g, app_r, app_g, ad_r, ad_g,
        cfg.alpha_kl, cfg.alpha_app, cfg.alpha_ad,
    )

    real1, _ = model.disc_rec(images)
    fake1, _ = model.disc_rec(out.reconstructed.detach())
    real2, _ = model.disc_gen(images)
    fake2, _ = model.disc_gen(out.generated.detach())
    d_loss = loss_discriminator(real1, fake1) + loss_discriminator(real2, fake2)
    return total, report, d_loss


def train_picnet_stage2(model, data, cfg: TrainConfig, resume=None, logger=None) -> TrainResult:
    _require_kind(model, DualPipelineModel.KIND)
    if cfg.stage != "picnet_joint":
        raise TrainError(f"cfg.stage is {cfg.stage!r}, expected 'picnet_joint'")
    _require_data_size(data, model.cfg.image_size)
    g_params = chain(
        model.visible_encoder.parameters(),
        model.complement_encoder.parameters(),
        model.conditional_prior_head.parameters(),
        model.posterior_head.parameters(),
        model.generator.parameters(),
    )
    d_params = chain(model.disc_rec.parameters(), model.disc_gen.parameters())
    return _run_stage(
        model, data, cfg, g_params, d_params,
        _stage2_step, "train_steps", resume=resume, logger=logger,
    )


# --- transformer stages ----------------------------------------------------------


def _coarse_step(model, images, visible, noise, cfg):
    coarse = model.coarse_forward(images, visible)
    pixel = loss_appearance_reconstructive(coarse, images)
    fake_maps = model.disc_coarse.trunk_features(coarse)
    with torch.no_grad():
        real_maps = model.disc_coarse.trunk_features(images)
    percep = perceptual_distance(fake_maps, real_maps)
    scores, _ = model.disc_coarse(coarse)
    adv = loss_adversarial_generator(scores)
    total, report = transformer_total(pixel, percep, adv)

    real_scores, _ = model.disc_coarse(images)
    fake_scores, _ = model.disc_coarse(coarse.detach())
    d_loss = loss_discriminator(real_scores, fake_scores)
    return total, report, d_loss


def _refine_step(model, images, visible, noise, cfg):
    parts = model.complete(images, visible, return_parts=True)
    refined = parts["refined"]
    pixel = loss_appearance_reconstructive(refined, images)
    fake_maps = model.disc_refine.trunk_features(refined)
    with torch.no_grad():
        real_maps = model.disc_refine.trunk_features(images)
    percep = perceptual_distance(fake_maps, real_maps)
    scores, _ = model.disc_refine(refined)
    adv = loss_adversarial_generator(scores)
    total, report = transformer_total(pixel, percep, adv)

    real_scores, _ = model.disc_refine(images)
    fake_scores, _ = model.disc_refine(refined.detach())
    d_loss = loss_discriminator(real_scores, fake_scores)
    return total, report, d_loss


def train_tfill(model, data, cfg: TrainConfig, stage: str = "", resume=None,
                logger=None) -> TrainResult:
    """Coarse stage trains the token pipeline at coarse resolution; the
    refinement stage freezes it and trains only the refiner."""
    _require_kind(model, TransformerFillModel.KIND)
    stage = stage or cfg.stage
    if stage != cfg.stage:
        raise TrainError(f"stage argument {stage!r} disagrees with cfg.stage {cfg.stage!r}")
    if stage == "tfill_coarse":
        _require_data_size(data, model.cfg.coarse_size)
        g_params = model.coarse_parameters()
        return _run_stage(
            model, data, cfg, g_params, model.disc_coarse.parameters(),
            _coarse_step, "coarse_steps", resume=resume, logger=logger,
        )
    if stage != "tfill_refine":
        raise TrainError(f"not a transformer stage: {stage!r}")
    if resume is not None and not isinstance(resume, CheckpointData):
        resume = load_checkpoint(resume)
    coarse_trained = (
        int(np.asarray(resume.arrays["model/coarse_steps"]))
        if resume is not None
        else int(model.coarse_steps)
    )
    if coarse_trained == 0:
        raise TrainError("refinement stage needs a coarse-trained model; run tfill_coarse first")
    _require_data_size(data, model.cfg.refinement_size)
    frozen = list(model.coarse_parameters())
    for p in frozen:
        p.requires_grad_(False)
    try:
        return _run_stage(
            model, data, cfg, model.refiner.parameters(),
            model.disc_refine.parameters(),
            _refine_step, "refine_steps", resume=resume, logger=logger,
        )
    finally:
        for p in frozen:
            p.requires_grad_(True)


# --- fixed-prior baseline ---------------------------------------------------------


def _cvae_step(model, images, visible, noise, cfg):
    eps = _latent_noise(model, images.shape[0], noise)
    out, q = model.forward_train(images, visible, eps)
    kl = kl_divergence(q, unit_prior_like(q), batch_dims=1).mean()
    app = loss_appearance_reconstructive(out, images)
    scores, _ = model.disc(out)
    ad = loss_adversarial_generator(scores)
    total = cfg.alpha_kl * kl + cfg.alpha_app * app + cfg.alpha_ad * ad
    report = LossReport.from_terms(
        {"kl": kl.detach().item(), "app": app.detach().item(), "ad": ad.detach().item()},
        {"kl": cfg.alpha_kl, "app": cfg.alpha_app, "ad": cfg.alpha_ad},
    )
    real_scores, _ = model.disc(images)
    fake_scores, _ = model.disc(out.detach())
    d_loss = loss_discriminator(real_scores, fake_scores)
    return total, report, d_loss


def train_cvae_baseline(model, data, cfg: TrainConfig, resume=None, logger=None) -> TrainResult:
    """Single path pulled to a fixed unit prior with one ground-truth target;
    reproduces the near-deterministic sampling the dual schedule avoids."""
    _require_kind(model, CvaeBaselineModel.KIND)
    if cfg.stage != "cvae_baseline":
        raise TrainError(f"cfg.stage is {cfg.stage!r}, expected 'cvae_baseline'")
    _require_data_size(data, model.cfg.image_size)
    g_params = chain(
        model.visible_encoder.parameters(),
        model.complement_encoder.parameters(),
        model.posterior_head.parameters(),
        model.generator.parameters(),
    )
    return _run_stage(
        model, data, cfg, g_params, model.disc.parameters(),
        _cvae_step, "train_steps", resume=resume, logger=logger,
    )


TRAIN_FNS = {
    "picnet_recon": train_picnet_stage1,
    "picnet_joint": train_picnet_stage2,
    "tfill_coarse": train_tfill,
    "tfill_refine": train_tfill,
    "cvae_baseline": train_cvae_baseline,
}


def run_training(model, data, cfg: TrainConfig, resume=None, logger=None) -> TrainResult:
    """Dispatch to the stage's training function."""
    return TRAIN_FNS[cfg.stage](model, data, cfg, resume=resume, logger=logger)

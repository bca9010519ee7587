"""Command-line entry points: train, eval, sample, serve, make-masks,
demo-data.

Every command takes --seed and --out; artifacts land under the out directory
next to a manifest.json that echoes the resolved arguments.  Exit codes:
0 ok, 2 usage (bad invocation or missing input files), 3 runtime failure.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import masks as masks_mod
from .evaluation import run_bucket_eval
from .masks import BUCKETS, Mask, MaskError
from .toydata import ToyShapes, write_demo_images
from .training import (
    STAGES,
    TrainConfig,
    TrainError,
    build_model,
    model_from_checkpoint,
    run_training,
)


class UsageError(ValueError):
    pass


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    artifacts, extra: dict = None):
    echo = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k != "fn" and not k.startswith("_")
    }
    manifest = {
        "command": command,
        "arguments": echo,
        "artifacts": sorted(str(a) for a in artifacts),
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _load_config_payload(path: Path) -> dict:
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    if path.suffix == ".toml":
        import tomli

        return tomli.loads(path.read_text())
    if path.suffix == ".json":
        return json.loads(path.read_text())
    raise UsageError(f"config must be .toml or .json, got {path.suffix!r}")


def _load_image_u8(path: Path) -> np.ndarray:
    if not path.is_file():
        raise UsageError(f"image file {path} does not exist")
    return np.asarray(Image.open(path).convert("RGB"))


def _load_mask_file(path: Path) -> Mask:
    if not path.is_file():
        raise UsageError(f"mask file {path} does not exist")
    if path.suffix == ".json":
        return masks_mod.from_rle(json.loads(path.read_text()))
    return masks_mod.from_png(path.read_bytes())


# --- train -----------------------------------------------------------------------


def cmd_train(args) -> int:
    payload = _load_config_payload(Path(args.config))
    train_section = dict(payload.get("train", payload))
    model_section = dict(payload.get("model", {}))
    if args.stage:
        train_section["stage"] = args.stage
    if args.seed is not None:
        train_section["seed"] = args.seed
    train_section["out_dir"] = str(args.out)
    try:
        cfg = TrainConfig(**train_section)
    except TypeError as exc:
        raise TrainError(f"bad train config: {exc}")

    kind = model_section.pop("kind", STAGES[cfg.stage])
    if args.init_from:
        model = model_from_checkpoint(args.init_from)
        if getattr(model, "KIND", None) != STAGES[cfg.stage]:
            raise TrainError(
                f"checkpoint {args.init_from} holds {model.KIND!r}, "
                f"stage {cfg.stage!r} needs {STAGES[cfg.stage]!r}"
            )
    else:
        torch.manual_seed(cfg.seed)
        model = build_model(kind, model_section)

    result = run_training(model, ToyShapes(_train_data_size(model, cfg)), cfg,
                          resume=args.resume or None)
    out = Path(args.out)
    _write_manifest(
        out, "train", args, [result.checkpoint_path],
        extra={
            "train_config": dataclasses.asdict(cfg),
            "model_config": dataclasses.asdict(model.cfg),
            "final_step": result.final_step,
            "final_loss": result.reports[-1].to_json_dict() if result.reports else None,
        },
    )
    print(f"trained {cfg.stage} to step {result.final_step}: {result.checkpoint_path}")
    return 0


def _train_data_size(model, cfg: TrainConfig) -> int:
    if cfg.stage == "tfill_coarse":
        return model.cfg.coarse_size
    if cfg.stage == "tfill_refine":
        return model.cfg.refinement_size
    return model.cfg.image_size


# --- eval ------------------------------------------------------------------------


def _folder_images(path: Path, size: int, limit: int) -> torch.Tensor:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise UsageError(f"no images under {path}")
    arrays = []
    for p in files[:limit]:
        img = Image.open(p).convert("RGB").resize((size, size), Image.BILINEAR)
        arrays.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    return torch.from_numpy(np.stack(arrays))


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    model = model_from_checkpoint(args.checkpoint)
    size = model.cfg.refinement_size if hasattr(model.cfg, "refinement_size") else model.cfg.image_size
    if args.dataset == "toy":
        rng = np.random.default_rng(args.seed)
        images = torch.from_numpy(ToyShapes(size).sample_batch(rng, args.images))
    else:
        images = _folder_images(Path(args.dataset), size, args.images)
    masks_by_bucket = {
        bucket.label: [
            masks_mod.free_form_mask(
                size, size, seed=args.seed * 100_003 + bi * 1000 + j, bucket=bucket
            )
            for j in range(args.per_bucket)
        ]
        for bi, bucket in enumerate(BUCKETS)
    }
    report = run_bucket_eval(
        model, images, masks_by_bucket, k=args.k, seed=args.seed,
        require_trained=not args.allow_untrained,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    json_path.write_text(report.to_json())
    table_path = out / "report.txt"
    table_path.write_text(report.to_table() + "\n")
    _write_manifest(out, "eval", args, [json_path, table_path])
    print(report.to_table())
    return 0


# --- sample ----------------------------------------------------------------------


def cmd_sample(args) -> int:
    from .service import CompletionUnsupported, composite_samples, picnet_samples, tfill_samples

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    model = model_from_checkpoint(args.checkpoint)
    original = _load_image_u8(Path(args.image))
    mask = _load_mask_file(Path(args.mask))
    if mask.grid.shape != original.shape[:2]:
        raise UsageError(
            f"mask {mask.grid.shape} does not match image {original.shape[:2]}"
        )
    try:
        if model.KIND == "transformer_fill":
            samples, scores, warnings = tfill_samples(model, original, mask.grid, args.k)
        else:
            generator = torch.Generator().manual_seed(args.seed)
            samples, scores, warnings = picnet_samples(
                model, original, mask.grid, args.k, generator
            )
    except CompletionUnsupported as exc:
        raise UsageError(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, composed in enumerate(composite_samples(original, samples, mask.grid)):
        path = out / f"sample_{i:02d}.png"
        Image.fromarray(composed).save(path)
        files.append(path)
    scores_path = out / "scores.json"
    scores_path.write_text(
        json.dumps(
            {
                "scores": [float(s) for s in scores],
                "seed": args.seed,
                "model_kind": model.KIND,
                "files": [p.name for p in files],
                "warnings": warnings,
            },
            indent=1,
        )
    )
    _write_manifest(out, "sample", args, files + [scores_path])
    for path, score in zip(files, scores):
        print(f"{path}  score={float(score):.4f}")
    return 0


# --- serve -----------------------------------------------------------------------


def _parse_checkpoint_specs(specs) -> dict:
    out = {}
    for spec in specs or []:
        name, _, path = spec.partition("=")
        if not name or not path:
            raise UsageError(f"--checkpoint needs NAME=PATH, got {spec!r}")
        if not Path(path).is_file():
            raise UsageError(f"checkpoint {path} does not exist")
        out[name] = path
    return out


def app_from_args(args):
    from .service import ServiceConfig, create_app

    models = _parse_checkpoint_specs(args.checkpoint)
    config = ServiceConfig(store_dir=str(args.store_dir))
    return create_app(config, models)


def cmd_serve(args) -> int:
    app = app_from_args(args)
    if args.check:
        names = sorted(getattr(app.state, "registry", {}))
        print(json.dumps({"models": names, "store_dir": str(args.store_dir)}))
        return 0
    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# --- mask and data generators ------------------------------------------------------


def cmd_make_masks(args) -> int:
    out = Path(args.out)
    files = []
    for bi, bucket in enumerate(BUCKETS):
        bucket_dir = out / bucket.label
        bucket_dir.mkdir(parents=True, exist_ok=True)
        for j in range(args.per_bucket):
            mask = masks_mod.free_form_mask(
                args.height, args.width,
                seed=args.seed * 100_003 + bi * 1000 + j, bucket=bucket,
            )
            path = bucket_dir / f"mask_{j:03d}.png"
            path.write_bytes(masks_mod.to_png(mask))
            files.append(path)
    _write_manifest(out, "make-masks", args, files)
    print(f"wrote {len(files)} masks across {len(BUCKETS)} buckets under {out}")
    return 0


def cmd_demo_data(args) -> int:
    out = Path(args.out)
    paths = write_demo_images(out, args.count, args.size, args.seed)
    _write_manifest(out, "demo-data", args, paths)
    print(f"wrote {len(paths)} toy images under {out}")
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plurifill",
        description="Pluralistic image completion: training, evaluation, sampling, serving.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training stage from a config file")
    p.add_argument("config", help="TOML or JSON config with [train] and optional [model]")
    p.add_argument("--stage", choices=sorted(STAGES), default="",
                   help="override the config's stage")
    p.add_argument("--resume", default="", help="same-stage checkpoint to continue")
    p.add_argument("--init-from", default="", help="checkpoint for the starting weights")
    p.add_argument("--out", default="runs/train", help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="bucketed metric report for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset", help="'toy' or a folder of images")
    p.add_argument("--images", type=int, default=4, help="ground-truth images to evaluate")
    p.add_argument("--per-bucket", type=int, default=2, help="masks per ratio bucket")
    p.add_argument("--k", type=int, default=4, help="samples per image")
    p.add_argument("--allow-untrained", action="store_true")
    p.add_argument("--out", default="runs/eval")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="write ranked completions for one image")
    p.add_argument("checkpoint")
    p.add_argument("image", help="PNG/JPEG to complete")
    p.add_argument("mask", help="mask PNG (255 = visible) or RLE .json")
    p.add_argument("-k", type=int, default=4)
    p.add_argument("--out", default="runs/sample")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("serve", help="start the completion HTTP service")
    p.add_argument("--checkpoint", action="append", default=[],
                   metavar="NAME=PATH", help="load a model under a role name")
    p.add_argument("--store-dir", default="runs/store")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--check", action="store_true",
                   help="build the app, print the loaded models, and exit")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("make-masks", help="write bucketed free-form mask sets")
    p.add_argument("--per-bucket", type=int, default=4)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--out", default="runs/masks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_masks)

    p = sub.add_parser("demo-data", help="write the procedural toy image set")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", default="runs/demo-data")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_demo_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return int(args.fn(args) or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainError, MaskError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())

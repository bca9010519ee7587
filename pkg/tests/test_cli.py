"""Command-line contracts: exit codes, run-directory manifests, seeds
honored end-to-end."""

import json
from pathlib import Path

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient
from PIL import Image

from plurifill import masks as masks_mod
from plurifill.cli import app_from_args, build_parser, main
from plurifill.masks import BUCKETS, Mask
from plurifill.training import load_checkpoint


def write_train_config(path: Path, stage="picnet_recon", steps=2, **model):
    model_lines = "\n".join(f"{k} = {v}" for k, v in model.items())
    path.write_text(
        f"""
[train]
stage = "{stage}"
steps = {steps}
batch_size = 2
mask_kind = "random_rect"
seed = 1

[model]
{model_lines}
"""
    )
    return path


def tiny_model_fields():
    return dict(image_size=16, base_width=8, encoder_depth=2, latent_channels=8, disc_width=8)


def train_tiny(tmp_path, stage="picnet_recon", steps=2) -> str:
    cfg = write_train_config(tmp_path / "train.toml", stage, steps, **tiny_model_fields())
    out = tmp_path / "run"
    assert main(["train", str(cfg), "--out", str(out)]) == 0
    return str(out / f"{stage}_final.ckpt")


class TestTrainCommand:
    def test_missing_config_exits_2(self, tmp_path, capsys):
        code = main(["train", str(tmp_path / "absent.toml"), "--out", str(tmp_path)])
        assert code == 2
        assert "usage" in capsys.readouterr().err

    def test_no_arguments_exits_2(self):
        assert main(["train"]) == 2

    def test_smoke_run_writes_checkpoint_and_manifest(self, tmp_path):
        ckpt = train_tiny(tmp_path)
        assert Path(ckpt).is_file()
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["train_config"]["stage"] == "picnet_recon"
        assert manifest["final_step"] == 2
        assert any(ckpt in a for a in manifest["artifacts"])

    def test_resume_continues_step_counter(self, tmp_path):
        ckpt = train_tiny(tmp_path, steps=2)
        cfg = write_train_config(tmp_path / "more.toml", steps=4, **tiny_model_fields())
        out = tmp_path / "run2"
        assert main(["train", str(cfg), "--out", str(out), "--resume", ckpt]) == 0
        final = load_checkpoint(out / "picnet_recon_final.ckpt")
        assert final.step == 4
        assert int(np.asarray(final.arrays["model/train_steps"])) == 4

    def test_init_from_enables_joint_stage(self, tmp_path):
        ckpt = train_tiny(tmp_path)
        cfg = write_train_config(tmp_path / "joint.toml", stage="picnet_joint", steps=2)
        out = tmp_path / "joint"
        assert main(["train", str(cfg), "--out", str(out), "--init-from", ckpt]) == 0
        final = load_checkpoint(out / "picnet_joint_final.ckpt")
        assert int(np.asarray(final.arrays["model/train_steps"])) == 4  # 2 + 2

    def test_bad_config_value_exits_3(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text('[train]\nstage = "picnet_recon"\nsteps = -3\n')
        assert main(["train", str(cfg), "--out", str(tmp_path / "x")]) == 3
        assert "error" in capsys.readouterr().err


class TestEvalCommand:
    def test_report_json_and_table(self, tmp_path, capsys):
        ckpt = train_tiny(tmp_path)
        out = tmp_path / "eval"
        code = main(
            ["eval", ckpt, "toy", "--images", "2", "--per-bucket", "1",
             "--k", "2", "--out", str(out), "--seed", "4"]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report["buckets"]) == {b.label for b in BUCKETS}
        table = (out / "report.txt").read_text()
        assert len(table.strip().splitlines()) == 7
        assert (out / "manifest.json").is_file()
        assert "0.5-0.6" in capsys.readouterr().out

    def test_fixed_seed_bitwise_reproducible(self, tmp_path):
        ckpt = train_tiny(tmp_path)
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(
                ["eval", ckpt, "toy", "--images", "2", "--per-bucket", "1",
                 "--k", "2", "--out", str(out), "--seed", "9"]
            ) == 0
            outs.append((out / "report.json").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_checkpoint_exits_2(self, tmp_path):
        assert main(["eval", str(tmp_path / "no.ckpt"), "toy", "--out", str(tmp_path)]) == 2

    def test_folder_dataset(self, tmp_path):
        ckpt = train_tiny(tmp_path)
        data_dir = tmp_path / "imgs"
        assert main(["demo-data", "--count", "3", "--size", "16", "--out", str(data_dir)]) == 0
        out = tmp_path / "eval_folder"
        code = main(
            ["eval", ckpt, str(data_dir), "--images", "2", "--per-bucket", "1",
             "--k", "2", "--out", str(out)]
        )
        assert code == 0


class TestSampleCommand:
    def make_inputs(self, tmp_path):
        rng = np.random.default_rng(3)
        arr = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        img_path = tmp_path / "input.png"
        Image.fromarray(arr).save(img_path)
        grid = np.ones((16, 16), dtype=np.uint8)
        grid[4:12, 4:12] = 0
        mask = Mask(grid)
        mask_path = tmp_path / "mask.png"
        mask_path.write_bytes(masks_mod.to_png(mask))
        return arr, img_path, mask, mask_path

    def test_writes_ranked_files(self, tmp_path):
        ckpt = train_tiny(tmp_path)
        arr, img_path, mask, mask_path = self.make_inputs(tmp_path)
        out = tmp_path / "samples"
        code = main(
            ["sample", ckpt, str(img_path), str(mask_path), "-k", "3",
             "--seed", "5", "--out", str(out)]
        )
        assert code == 0
        files = sorted(out.glob("sample_*.png"))
        assert len(files) == 3
        scores = json.loads((out / "scores.json").read_text())
        assert len(scores["scores"]) == 3
        assert scores["scores"] == sorted(scores["scores"], reverse=True)
        assert scores["seed"] == 5
        visible = mask.grid.astype(bool)
        for path in files:
            pixels = np.asarray(Image.open(path))
            assert (pixels[visible] == arr[visible]).all()

    def test_same_seed_identical_outputs(self, tmp_path):
        ckpt = train_tiny(tmp_path)
        _, img_path, _, mask_path = self.make_inputs(tmp_path)
        blobs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            assert main(
                ["sample", ckpt, str(img_path), str(mask_path), "-k", "2",
                 "--seed", "8", "--out", str(out)]
            ) == 0
            blobs.append([p.read_bytes() for p in sorted(out.glob("sample_*.png"))])
        assert blobs[0] == blobs[1]

    def test_rle_mask_file(self, tmp_path):
        ckpt = train_tiny(tmp_path)
        _, img_path, mask, _ = self.make_inputs(tmp_path)
        rle_path = tmp_path / "mask.json"
        rle_path.write_text(json.dumps(masks_mod.to_rle(mask)))
        out = tmp_path / "rle_samples"
        assert main(
            ["sample", ckpt, str(img_path), str(rle_path), "-k", "1", "--out", str(out)]
        ) == 0

    def test_mask_mismatch_exits_2(self, tmp_path):
        ckpt = train_tiny(tmp_path)
        _, img_path, _, _ = self.make_inputs(tmp_path)
        small = Mask(np.ones((8, 8), dtype=np.uint8))
        bad_mask = tmp_path / "small.png"
        bad_mask.write_bytes(masks_mod.to_png(small))
        out = tmp_path / "bad"
        assert main(["sample", ckpt, str(img_path), str(bad_mask), "--out", str(out)]) == 2


class TestServeCommand:
    def test_check_mode_lists_models(self, tmp_path, capsys):
        ckpt = train_tiny(tmp_path)
        capsys.readouterr()
        code = main(
            ["serve", "--checkpoint", f"picnet={ckpt}",
             "--store-dir", str(tmp_path / "store"), "--check"]
        )
        assert code == 0
        assert json.loads(capsys.readouterr().out)["models"] == ["picnet"]

    def test_app_answers_models_endpoint(self, tmp_path):
        ckpt = train_tiny(tmp_path)
        parser = build_parser()
        args = parser.parse_args(
            ["serve", "--checkpoint", f"picnet={ckpt}", "--store-dir", str(tmp_path / "store")]
        )
        client = TestClient(app_from_args(args))
        entries = client.get("/v1/models").json()
        assert entries[0]["name"] == "picnet"
        assert entries[0]["steps"] == 2

    def test_bad_checkpoint_spec_exits_2(self, tmp_path):
        assert main(["serve", "--checkpoint", "nope", "--check"]) == 2
        assert main(
            ["serve", "--checkpoint", f"picnet={tmp_path / 'no.ckpt'}", "--check"]
        ) == 2


class TestMaskAndDataCommands:
    def test_make_masks_counts(self, tmp_path):
        out = tmp_path / "masks"
        assert main(
            ["make-masks", "--per-bucket", "2", "--height", "32", "--width", "32",
             "--out", str(out), "--seed", "1"]
        ) == 0
        for bucket in BUCKETS:
            files = list((out / bucket.label).glob("mask_*.png"))
            assert len(files) == 2
            for path in files:
                mask = masks_mod.from_png(path.read_bytes())
                ratio = masks_mod.mask_ratio(mask)
                assert bucket.lower <= ratio <= bucket.upper or bucket.contains(ratio)
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["artifacts"]) == 12

    def test_demo_data_deterministic(self, tmp_path):
        blobs = []
        for name in ("d1", "d2"):
            out = tmp_path / name
            assert main(
                ["demo-data", "--count", "3", "--size", "16", "--out", str(out), "--seed", "7"]
            ) == 0
            blobs.append([p.read_bytes() for p in sorted(out.glob("*.png"))])
        assert blobs[0] == blobs[1]
        assert len(blobs[0]) == 3

    def test_unknown_command_exits_2(self):
        assert main(["transmogrify"]) == 2

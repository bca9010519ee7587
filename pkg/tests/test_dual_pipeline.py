import numpy as np
import pytest
import torch

from conftest import relative_error, seeded_uniform
from plurifill.checkpoint import (
    load_checkpoint,
    load_state_dict_arrays,
    save_checkpoint,
    state_dict_arrays,
)
from plurifill.dual_pipeline import (
    ConfigError,
    CvaeBaselineModel,
    DualPipelineConfig,
    DualPipelineModel,
    ModelNotTrainedError,
    adaptive_scales,
    visible_at_scale,
)
from plurifill.latent import LOGVAR_RANGE
from plurifill.losses import (
    dual_path_total,
    loss_adversarial_generator,
    loss_appearance_generative,
    loss_appearance_reconstructive,
    loss_discriminator,
    loss_feature_match,
    loss_kl_generative,
)


def tiny_config(**kw):
    base = dict(
        image_size=16,
        base_width=8,
        encoder_depth=2,
        latent_channels=8,
        disc_width=8,
    )
    base.update(kw)
    return DualPipelineConfig(**base)


def build_model(cfg=None, seed=0):
    torch.manual_seed(seed)
    return DualPipelineModel(cfg or tiny_config())


def toy_batch(cfg, b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(b, cfg.in_channels, cfg.image_size, cfg.image_size, generator=g)
    vis = torch.ones(b, 1, cfg.image_size, cfg.image_size)
    s = cfg.image_size // 2
    vis[:, :, s // 2 : s // 2 + s, s // 2 : s // 2 + s] = 0.0
    noise = lambda: torch.randn(
        b, cfg.latent_channels, cfg.latent_grid, cfg.latent_grid, generator=g
    )
    return img, vis, noise(), noise()


class TestConfig:
    def test_rejects_non_power_of_two(self):
        with pytest.raises(ConfigError):
            tiny_config(image_size=48)

    def test_rejects_tiny_latent_grid(self):
        with pytest.raises(ConfigError):
            tiny_config(image_size=8, encoder_depth=3)

    def test_rejects_unknown_attention(self):
        with pytest.raises(ConfigError):
            tiny_config(attention_kind="fancy")

    def test_latent_dimension(self):
        cfg = DualPipelineConfig()
        assert cfg.latent_grid == 4
        assert cfg.latent_dimension == 128 * 16

    def test_width_cap(self):
        cfg = DualPipelineConfig()
        assert cfg.widths() == [32, 64, 128, 128, 128]


class TestShapes:
    def test_encoder_and_heads(self):
        cfg = tiny_config()
        model = build_model(cfg)
        img, vis, *_ = toy_batch(cfg, b=3)
        feats, p_cond = model.encode_visible(img * vis, vis)
        assert feats.deep.shape == (3, cfg.widths()[-1], 4, 4)
        assert feats.skip.shape == (3, cfg.widths()[1], 8, 8)
        assert p_cond.mean.shape == (3, cfg.latent_channels, 4, 4)

    def test_discriminator_contract(self):
        cfg = tiny_config()
        model = build_model(cfg)
        img, *_ = toy_batch(cfg, b=2)
        scores, features = model.discriminate(img, "d1")
        assert scores.shape == (2, 1, 4, 4)
        assert features.shape == (2, cfg.disc_width)
        with pytest.raises(ConfigError):
            model.discriminate(img, "d3")

    def test_logvar_clamped(self):
        cfg = tiny_config()
        model = build_model(cfg)
        img = torch.full((1, 3, 16, 16), 1e6)
        vis = torch.ones(1, 1, 16, 16)
        _, p_cond = model.encode_visible(img, vis)
        assert p_cond.log_variance.min().item() >= LOGVAR_RANGE[0]
        assert p_cond.log_variance.max().item() <= LOGVAR_RANGE[1]

    def test_dual_forward_outputs(self):
        cfg = tiny_config()
        model = build_model(cfg)
        img, vis, n1, n2 = toy_batch(cfg)
        out = model.dual_forward(img, vis, n1, n2)
        for t in (out.reconstructed, out.generated):
            assert t.shape == img.shape
            assert torch.isfinite(t).all()
            assert t.min().item() >= 0.0 and t.max().item() <= 1.0

    def test_wrong_resolution_rejected(self):
        cfg = tiny_config()
        model = build_model(cfg)
        with pytest.raises(ConfigError):
            model.dual_forward(
                torch.zeros(1, 3, 32, 32),
                torch.ones(1, 1, 32, 32),
                torch.zeros(1, 8, 8, 8),
                torch.zeros(1, 8, 8, 8),
            )


class TestMaskPlumbing:
    def test_all_visible_mask(self):
        cfg = tiny_config()
        model = build_model(cfg)
        img, _, n1, n2 = toy_batch(cfg)
        vis = torch.ones(1, 1, 16, 16).expand(img.shape[0], -1, -1, -1).clone()
        out = model.dual_forward(img, vis, n1, n2)
        assert torch.equal(out.masked_input, img)
        assert torch.equal(out.complement_input, torch.zeros_like(img))
        assert torch.equal(out.prior_scales, torch.zeros_like(out.prior_scales))

    def test_adaptive_scales_values(self):
        vis = torch.ones(2, 1, 4, 4)
        vis[1, 0, :2, :] = 0.0
        scales = adaptive_scales(vis)
        assert scales[0].item() == 0.0
        assert scales[1].item() == 0.5

    def test_visible_at_scale_strict(self):
        vis = torch.ones(1, 1, 4, 4)
        vis[0, 0, 0, 0] = 0.0
        at2 = visible_at_scale(vis, 2)
        assert at2[0, 0, 0, 0].item() == 0.0  # partially covered block
        assert at2[0, 0, 1, 1].item() == 1.0


class TestInformationBarrier:
    def test_generated_blind_to_complement(self):
        cfg = tiny_config()
        model = build_model(cfg).eval()
        img, vis, n1, n2 = toy_batch(cfg)
        out_a = model.dual_forward(img, vis, n1, n2)
        img_b = img.clone()
        img_b = img_b + (1.0 - vis) * 0.3  # change only hidden pixels
        img_b = img_b.clamp(0, 1)
        assert not torch.equal(img_b, img)
        out_b = model.dual_forward(img_b, vis, n1, n2)
        assert torch.equal(out_a.generated, out_b.generated)
        assert torch.equal(out_a.conditional_prior.mean, out_b.conditional_prior.mean)
        assert not torch.equal(out_a.reconstructed, out_b.reconstructed)

    def test_repeated_random_trials(self):
        cfg = tiny_config()
        model = build_model(cfg).eval()
        g = torch.Generator().manual_seed(99)
        for _ in range(5):
            img = torch.rand(1, 3, 16, 16, generator=g)
            vis = (torch.rand(1, 1, 16, 16, generator=g) > 0.4).float()
            if vis.min() == 1.0:
                vis[0, 0, 3, 3] = 0.0
            n1 = torch.randn(1, 8, 4, 4, generator=g)
            n2 = torch.randn(1, 8, 4, 4, generator=g)
            perturbed = (img + (1.0 - vis) * torch.rand(1, 3, 16, 16, generator=g)).clamp(0, 1)
            a = model.dual_forward(img, vis, n1, n2)
            b = model.dual_forward(perturbed, vis, n1, n2)
            assert torch.equal(a.generated, b.generated)


class TestWeightSharing:
    def test_single_generator_serves_both_paths(self):
        cfg = tiny_config()
        model = build_model(cfg)
        calls = []
        handle = model.generator.register_forward_hook(lambda m, i, o: calls.append(1))
        img, vis, n1, n2 = toy_batch(cfg, b=1)
        model.dual_forward(img, vis, n1, n2)
        handle.remove()
        assert len(calls) == 2

    def test_single_visible_encoder(self):
        cfg = tiny_config()
        model = build_model(cfg)
        calls = []
        handle = model.visible_encoder.register_forward_hook(lambda m, i, o: calls.append(1))
        img, vis, n1, n2 = toy_batch(cfg, b=1)
        model.dual_forward(img, vis, n1, n2)
        handle.remove()
        assert len(calls) == 1  # both paths consume the same visible features


class TestAttentionWiring:
    def test_fresh_slta_equals_attention_free(self):
        cfg_a = tiny_config(attention_kind="slta")
        cfg_b = tiny_config(attention_kind="none")
        model_a = build_model(cfg_a, seed=3)
        model_b = DualPipelineModel(cfg_b)
        model_b.load_state_dict(model_a.state_dict(), strict=False)
        img, vis, n1, n2 = toy_batch(cfg_a)
        out_a = model_a.dual_forward(img, vis, n1, n2)
        out_b = model_b.dual_forward(img, vis, n1, n2)
        assert torch.equal(out_a.reconstructed, out_b.reconstructed)
        assert torch.equal(out_a.generated, out_b.generated)

    def test_contextual_flag_runs(self):
        cfg = tiny_config(attention_kind="contextual")
        model = build_model(cfg)
        img, vis, n1, n2 = toy_batch(cfg)
        out = model.dual_forward(img, vis, n1, n2)
        assert torch.isfinite(out.generated).all()

    def test_probe_requires_slta(self):
        cfg = tiny_config(attention_kind="none")
        model = build_model(cfg)
        img, vis, *_ = toy_batch(cfg, b=1)
        with pytest.raises(ConfigError):
            model.attention_probe(img * vis, vis, (0, 0))


class TestSampling:
    def test_untrained_flag(self):
        cfg = tiny_config()
        model = build_model(cfg)
        img, vis, *_ = toy_batch(cfg, b=1)
        g = torch.Generator().manual_seed(0)
        with pytest.raises(ModelNotTrainedError):
            model.pluralistic_sample(img * vis, vis, 2, g)
        model.train_steps += 1
        model.pluralistic_sample(img * vis, vis, 2, g)

    def test_samples_sorted_and_composited(self):
        cfg = tiny_config()
        model = build_model(cfg)
        img, vis, *_ = toy_batch(cfg, b=1)
        masked = img * vis
        g = torch.Generator().manual_seed(5)
        samples, scores = model.pluralistic_sample(masked, vis, 4, g, require_trained=False)
        assert samples.shape == (4, 3, 16, 16)
        assert scores.shape == (4,)
        assert all(scores[i] >= scores[i + 1] for i in range(3))
        for i in range(4):
            assert torch.equal(samples[i : i + 1] * vis, masked * vis)

    def test_seed_reproducibility(self):
        cfg = tiny_config()
        model = build_model(cfg)
        img, vis, *_ = toy_batch(cfg, b=1)
        a, sa = model.pluralistic_sample(
            img * vis, vis, 3, torch.Generator().manual_seed(7), require_trained=False
        )
        b, sb = model.pluralistic_sample(
            img * vis, vis, 3, torch.Generator().manual_seed(7), require_trained=False
        )
        assert torch.equal(a, b) and torch.equal(sa, sb)
        c, _ = model.pluralistic_sample(
            img * vis, vis, 3, torch.Generator().manual_seed(8), require_trained=False
        )
        assert not torch.equal(a, c)

    def test_k_validated(self):
        cfg = tiny_config()
        model = build_model(cfg)
        img, vis, *_ = toy_batch(cfg, b=1)
        with pytest.raises(ConfigError):
            model.pluralistic_sample(img * vis, vis, 0, torch.Generator())


class TestProbe:
    def test_dump_format(self):
        cfg = tiny_config()
        model = build_model(cfg)
        img, vis, *_ = toy_batch(cfg, b=1)
        dump = model.attention_probe(img * vis, vis, (9, 14))
        assert dump["grid_h"] == 8 and dump["grid_w"] == 8
        assert dump["query"] == [4, 7]
        assert len(dump["scores"]) == 64
        assert abs(sum(dump["scores"]) - dump["total"]) < 1e-6 * max(1.0, dump["total"])

    def test_query_bounds(self):
        cfg = tiny_config()
        model = build_model(cfg)
        img, vis, *_ = toy_batch(cfg, b=1)
        with pytest.raises(ConfigError):
            model.attention_probe(img * vis, vis, (16, 0))
        with pytest.raises(ConfigError):
            model.attention_probe(img * vis, vis, (0, -1))


class TestCvaeBaseline:
    def test_forward_and_sample(self):
        cfg = tiny_config()
        torch.manual_seed(2)
        model = CvaeBaselineModel(cfg)
        img, vis, n1, _ = toy_batch(cfg)
        out, q = model.forward_train(img, vis, n1)
        assert out.shape == img.shape
        assert q.mean.shape == (2, 8, 4, 4)
        samples, scores = model.pluralistic_sample(
            (img * vis)[:1], vis[:1], 3, torch.Generator().manual_seed(1),
            require_trained=False,
        )
        assert samples.shape == (3, 3, 16, 16)
        assert all(scores[i] >= scores[i + 1] for i in range(2))


class TestCheckpointRoundTrip:
    def test_bitwise_params(self, tmp_path):
        cfg = tiny_config()
        model = build_model(cfg, seed=11)
        model.train_steps += 42
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model.KIND, cfg, 42, state_dict_arrays(model))
        data = load_checkpoint(path).require_kind("dual_pipeline")
        assert data.step == 42
        fresh = build_model(DualPipelineConfig(**data.config), seed=99)
        load_state_dict_arrays(fresh, data.arrays)
        for (ka, va), (kb, vb) in zip(
            model.state_dict().items(), fresh.state_dict().items()
        ):
            assert ka == kb
            assert torch.equal(va, vb), ka

    def test_kind_mismatch(self, tmp_path):
        cfg = tiny_config()
        model = build_model(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model.KIND, cfg, 0, state_dict_arrays(model))
        import plurifill.checkpoint as ckpt

        with pytest.raises(ckpt.CheckpointError):
            load_checkpoint(path).require_kind("transformer_fill")


def miniature_model():
    cfg = DualPipelineConfig(
        image_size=8,
        base_width=4,
        encoder_depth=2,
        latent_channels=4,
        disc_width=4,
    )
    torch.manual_seed(21)
    return DualPipelineModel(cfg).double(), cfg


def miniature_generator_loss(model, cfg, img, vis, n1, n2):
    out = model.dual_forward(img, vis, n1, n2)
    _, real_feat = model.discriminate(img, "d1")
    _, fake_feat = model.discriminate(out.reconstructed, "d1")
    gen_scores, _ = model.discriminate(out.generated, "d2")
    total, _ = dual_path_total(
        model.adaptive_kl(out),
        loss_kl_generative(out.posterior, out.conditional_prior),
        loss_appearance_reconstructive(out.reconstructed, img),
        loss_appearance_generative(out.generated, img, vis),
        loss_feature_match(fake_feat, real_feat),
        loss_adversarial_generator(gen_scores),
    )
    return total


class TestEndToEndGradients:
    def test_generator_side_miniature(self):
        model, cfg = miniature_model()
        g = torch.Generator().manual_seed(31)
        img = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        vis = (torch.rand(1, 1, 8, 8, generator=g) > 0.4).double()
        n1 = torch.randn(1, 4, 2, 2, generator=g, dtype=torch.float64)
        n2 = torch.randn(1, 4, 2, 2, generator=g, dtype=torch.float64)

        loss = miniature_generator_loss(model, cfg, img, vis, n1, n2)
        params = [p for p in model.parameters() if p.requires_grad]
        grads = torch.autograd.grad(loss, params, allow_unused=True)

        rng = np.random.default_rng(0)
        checked = 0
        worst = 0.0
        for p, grad in zip(params, grads):
            if grad is None:
                continue
            idx = tuple(rng.integers(0, s) for s in p.shape) if p.ndim else ()
            with torch.no_grad():
                orig = p[idx].item()
                eps = 1e-5
                p[idx] = orig + eps
                f_plus = miniature_generator_loss(model, cfg, img, vis, n1, n2).item()
                p[idx] = orig - eps
                f_minus = miniature_generator_loss(model, cfg, img, vis, n1, n2).item()
                p[idx] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            auto = grad[idx].item()
            rel = abs(auto - fd) / max(1e-8, abs(auto) + abs(fd))
            if abs(auto) + abs(fd) > 1e-7:
                worst = max(worst, rel)
                assert rel < 1e-3, f"param coordinate mismatch: {rel:.2e}"
            checked += 1
        assert checked >= 20

    def test_discriminator_side_miniature(self):
        model, cfg = miniature_model()
        g = torch.Generator().manual_seed(41)
        img = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
        fake = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)

        def d_loss():
            real_scores, _ = model.discriminate(img, "d2")
            fake_scores, _ = model.discriminate(fake, "d2")
            return loss_discriminator(real_scores, fake_scores)

        loss = d_loss()
        params = list(model.disc_gen.parameters())
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        rng = np.random.default_rng(1)
        for p, grad in zip(params, grads):
            if grad is None:  # feature head plays no part in the LSGAN loss
                continue
            idx = tuple(rng.integers(0, s) for s in p.shape) if p.ndim else ()
            with torch.no_grad():
                orig = p[idx].item()
                eps = 1e-5
                p[idx] = orig + eps
                f_plus = d_loss().item()
                p[idx] = orig - eps
                f_minus = d_loss().item()
                p[idx] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            auto = grad[idx].item()
            if abs(auto) + abs(fd) > 1e-7:
                rel = abs(auto - fd) / (abs(auto) + abs(fd))
                assert rel < 1e-3

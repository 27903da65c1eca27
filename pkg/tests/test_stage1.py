"""Shading refinement stage: forward path, losses, and training loop."""

import numpy as np
import pytest
import torch
from torch import nn

from cg2real.datagen import SceneSpec, render_pair
from cg2real.imaging import ImageF, ShapeError
from cg2real.nets import GeneratorSpec, GuidedShadingGenerator, build_generator
from cg2real.ops import GuidedFilterParams, guided_filter, to_log_shading
from cg2real.stage1 import (
    Stage1Config,
    Stage1LossWeights,
    _check_finite,
    gan_losses,
    history_csv,
    lr_factor,
    perceptual_loss,
    stage1_forward,
    train_stage1,
)


def tiny_pairs(n, seed0=100, resolution=16, spp=16):
    return [render_pair(SceneSpec.sample(seed0 + i), resolution=resolution,
                        spp=spp) for i in range(n)]


class _IdentityOnLogShading(nn.Module):
    def forward(self, x):
        assert x.shape[1] == 9, "stage-1 stack must be 9 channels"
        return x[:, :3]


class TestStage1Forward:
    def test_identity_double_reduces_to_self_guided_filter(self):
        params = GuidedFilterParams(radius=2)
        gen = GuidedShadingGenerator(GeneratorSpec.default("shading_s1"), params)
        gen.net = _IdentityOnLogShading()
        pair = tiny_pairs(1)[0]
        s_o = pair.shading_gl.to_tensor()[None]
        a = pair.albedo.to_tensor()[None]
        n = pair.normal.to_tensor()[None]
        s_bar, i_bar = stage1_forward(gen, s_o, a, n)

        log_s = to_log_shading(s_o)
        want = torch.clamp(torch.exp(guided_filter(log_s, log_s, params)) - 1e-4,
                           min=0.0)
        assert torch.equal(s_bar, want)
        # self-guided filtering barely moves the shading, so the refined
        # image stays close to the input image
        assert (i_bar - a * s_o).abs().mean() < 0.05

    def test_image_is_literal_recomposition(self):
        gen = build_generator(GeneratorSpec.default("shading_s1"),
                              GuidedFilterParams(radius=2), seed=0)
        s_o = torch.rand(1, 3, 16, 16) + 0.1
        a = torch.rand(1, 3, 16, 16)
        n = torch.rand(1, 3, 16, 16)
        s_bar, i_bar = stage1_forward(gen, s_o, a, n)
        assert torch.equal(i_bar, a * s_bar)

    def test_shape_mismatch(self):
        gen = build_generator(GeneratorSpec.default("shading_s1"))
        with pytest.raises(ShapeError):
            stage1_forward(gen, torch.rand(1, 3, 16, 16),
                           torch.rand(1, 3, 16, 18), torch.rand(1, 3, 16, 16))

    def test_parameter_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        spec = GeneratorSpec("shading_s1", base_channels=4, n_res_blocks=1,
                             n_downsample=2, in_channels=9)
        gen = build_generator(spec, GuidedFilterParams(radius=2), seed=1).double()
        s_o = torch.rand(1, 3, 8, 8, dtype=torch.float64) + 0.2
        a = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        n = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        i_p = torch.rand(1, 3, 8, 8, dtype=torch.float64)

        def loss_value():
            _, i_bar = stage1_forward(gen, s_o, a, n)
            return (i_bar - i_p).abs().mean()

        loss_value().backward()
        params = [p for p in gen.parameters() if p.grad is not None]
        rng = np.random.default_rng(7)
        eps = 1e-6
        checked = 0
        for p in params[:6]:
            flat = p.view(-1)
            grad = p.grad.view(-1)
            for _ in range(3):
                j = int(rng.integers(flat.numel()))
                with torch.no_grad():
                    orig = float(flat[j])
                    flat[j] = orig + eps
                    up = float(loss_value())
                    flat[j] = orig - eps
                    down = float(loss_value())
                    flat[j] = orig
                numeric = (up - down) / (2 * eps)
                denom = max(abs(numeric), abs(float(grad[j])), 1e-4)
                assert abs(float(grad[j]) - numeric) / denom <= 1e-4
                checked += 1
        assert checked >= 15


class TestPerceptualLoss:
    def test_zero_on_equal_inputs(self):
        x = torch.rand(2, 3, 32, 32)
        assert float(perceptual_loss(x, x.clone())) == 0.0

    def test_symmetric(self):
        a = torch.rand(1, 3, 32, 32)
        b = torch.rand(1, 3, 32, 32)
        assert float(perceptual_loss(a, b)) == float(perceptual_loss(b, a))

    def test_monotone_in_perturbation(self):
        gen = torch.Generator().manual_seed(5)
        for _ in range(20):
            target = torch.rand(1, 3, 32, 32, generator=gen)
            losses = [float(perceptual_loss(target + d, target))
                      for d in (0.01, 0.05, 0.1)]
            assert losses[0] < losses[1] < losses[2]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            perceptual_loss(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 16, 16))


class _ConstantDisc(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0], 1, 4, 4), float(self.value))


class _TableDisc(nn.Module):
    """Lookup-table discriminator over binary inputs."""

    def __init__(self):
        super().__init__()
        self.table = nn.Parameter(torch.full((2,), 0.5))

    def forward(self, x):
        return self.table[x.long().view(-1)]


class TestGanLosses:
    def test_constant_discriminator_values(self):
        real = torch.rand(4, 3, 8, 8)
        fake = torch.rand(4, 3, 8, 8)
        g, d = gan_losses(_ConstantDisc(1.0), real, fake)
        assert float(g) == 0.0
        assert float(d) == pytest.approx(0.5)
        g, d = gan_losses(_ConstantDisc(0.0), real, fake)
        assert float(g) == pytest.approx(0.5)
        assert float(d) == pytest.approx(0.5)

    def test_fake_is_detached_in_d_loss(self):
        src = torch.rand(2, 3, 8, 8, requires_grad=True)
        disc = nn.Conv2d(3, 1, 3, padding=1)
        _, d = gan_losses(disc, torch.rand(2, 3, 8, 8), src * 2.0)
        d.backward()
        assert src.grad is None

    def test_optimal_table_discriminator(self):
        # real mass (3/4, 1/4), fake mass (1/4, 3/4) over buckets {0, 1}:
        # the least-squares optimum is D(x) = r(x) / (r(x) + f(x))
        real = torch.tensor([0.0, 0.0, 0.0, 1.0])
        fake = torch.tensor([0.0, 1.0, 1.0, 1.0])
        disc = _TableDisc()
        opt = torch.optim.Adam(disc.parameters(), lr=0.02)
        for _ in range(2000):
            opt.zero_grad()
            _, d_loss = gan_losses(disc, real, fake)
            d_loss.backward()
            opt.step()
        table = disc.table.detach()
        assert abs(float(table[0]) - 0.75) < 1e-3
        assert abs(float(table[1]) - 0.25) < 1e-3


class TestSchedule:
    def test_lr_decay_anchors(self):
        assert lr_factor(1, 100) == 1.0
        assert lr_factor(50, 100) == 1.0
        assert lr_factor(75, 100) == pytest.approx(0.5)
        assert lr_factor(100, 100) == 0.0

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            Stage1LossWeights(w_perceptual=-1)
        with pytest.raises(ValueError):
            Stage1LossWeights(0.0, 0.0, 0.0)


class TestTrainStage1:
    def small_config(self, **kw):
        defaults = dict(epochs=2, batch_size=4, seed=0, base_channels=8,
                        n_res_blocks=2, filter_params=GuidedFilterParams(radius=2))
        defaults.update(kw)
        return Stage1Config(**defaults)

    def test_runs_and_logs(self):
        pairs = tiny_pairs(6)
        result = train_stage1(pairs, self.small_config(), heldout=tiny_pairs(2, 300))
        assert len(result.history) == 2
        for row in result.history:
            for key in ("g_loss", "d_img", "d_shd", "perc", "heldout_L1"):
                assert np.isfinite(row[key])
                assert row[key] >= 0.0
        assert result.identity_l1 > 0
        csv_text = history_csv(result.history)
        assert csv_text.splitlines()[0] == "epoch,g_loss,d_img,d_shd,perc,heldout_L1"
        assert len(csv_text.splitlines()) == 3

    def test_deterministic_given_seed(self):
        pairs = tiny_pairs(4)
        h1 = train_stage1(pairs, self.small_config()).history
        h2 = train_stage1(pairs, self.small_config()).history
        h3 = train_stage1(pairs, self.small_config(seed=1)).history
        for a, b in zip(h1, h2):
            for key in ("g_loss", "d_img", "d_shd", "perc"):
                assert abs(a[key] - b[key]) <= 1e-6
        assert any(abs(a["g_loss"] - b["g_loss"]) > 1e-9 for a, b in zip(h1, h3))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_stage1([], self.small_config())

    def test_shading_gan_ablation_flagged(self):
        pairs = tiny_pairs(4)
        cfg = self.small_config(weights=Stage1LossWeights(10.0, 1.0, 0.0))
        result = train_stage1(pairs, cfg)
        assert "no_shading_gan" in result.flags
        assert all(row["d_shd"] == 0.0 for row in result.history)

    def test_nonfinite_loss_aborts_with_diagnostic(self):
        pairs = tiny_pairs(4)
        huge = np.full((16, 16, 3), 3e38, dtype=np.float32)
        sab = pairs[0]
        object.__setattr__(sab, "image_pbr", ImageF(huge))
        with pytest.raises(RuntimeError, match="non-finite"):
            train_stage1(pairs, self.small_config())

    def test_check_finite_diagnostic_contents(self):
        with pytest.raises(RuntimeError, match="epoch 3.*step 7.*bad"):
            _check_finite(3, 7, good=torch.tensor(1.0),
                          bad=torch.tensor(float("nan")))

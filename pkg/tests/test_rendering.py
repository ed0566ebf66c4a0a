import hashlib
import math

import numpy as np
import pytest
import torch

from faceanim.rendering import (ColorExtractor, RaySampler, RenderDecoder,
                                ShapeExtractor, VolumeRenderer, render_weights,
                                volume_render, volume_render_reference)

from helpers import analytic_grad, finite_difference_grad, rel_error


class TestVolumeRender:
    def test_zero_density_renders_nothing(self):
        density = torch.zeros(1, 1)
        colors = torch.full((1, 1, 3), 7.0)
        assert torch.equal(volume_render(density, colors), torch.zeros(1, 3))

    def test_two_sample_closed_form(self):
        # recomputed per-sample accumulation: densities (0.5, 1.0), colors 1
        density = torch.tensor([[0.5, 1.0]], dtype=torch.float64)
        colors = torch.ones(1, 2, 1, dtype=torch.float64)
        w1 = 1.0 - math.exp(-0.5)
        w2 = math.exp(-0.5) * (1.0 - math.exp(-1.0))
        assert w1 == pytest.approx(0.3935, abs=1e-4)
        assert w2 == pytest.approx(0.3834, abs=1e-4)
        out = volume_render(density, colors)
        assert out.item() == pytest.approx(w1 + w2, abs=1e-12)
        assert out.item() == pytest.approx(0.7769, abs=1e-4)

    def test_opaque_first_sample_saturates(self):
        density = torch.tensor([[1e4, 2.0, 3.0]])
        colors = torch.tensor([[[5.0], [-9.0], [4.0]]])
        out = volume_render(density, colors)
        assert abs(out.item() - 5.0) < 1e-3

    def test_matches_reference_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 9))
            d = int(rng.integers(1, 5))
            c = int(rng.integers(1, 4))
            density = torch.from_numpy(3.0 * rng.random((n, d)))
            colors = torch.from_numpy(rng.standard_normal((n, d, c)))
            fast = volume_render(density, colors).numpy()
            naive = np.array(volume_render_reference(density.tolist(), colors.tolist()))
            assert np.abs(fast - naive).max() < 1e-6

    def test_transmittance_monotone_and_budget(self):
        rng = np.random.default_rng(1)
        density = torch.from_numpy(2.0 * rng.random((16, 8)))
        weights, transmittance, residual = render_weights(density)
        assert transmittance[..., 0].eq(1.0).all()  # tau_1 = exp(0)
        assert (transmittance[..., 1:] <= transmittance[..., :-1] + 1e-12).all()
        assert (transmittance > 0).all() and (transmittance <= 1).all()
        budget = weights.sum(dim=-1)
        assert (budget >= 0).all() and (budget <= 1 + 1e-9).all()
        # telescoping identity: sum of weights = 1 - tau_{D+1}
        assert (budget - (1.0 - residual)).abs().max() < 1e-12

    def test_negative_density_asserts(self):
        with pytest.raises(AssertionError):
            volume_render(torch.tensor([[-0.1]]), torch.ones(1, 1, 1))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        density = torch.from_numpy(rng.random((3, 4)) + 0.1)
        colors = torch.from_numpy(rng.standard_normal((3, 4, 2)))
        probe = torch.from_numpy(rng.standard_normal((3, 2)))

        def loss_wrt_density(d):
            return (volume_render(d, colors) * probe).sum()

        def loss_wrt_colors(c):
            return (volume_render(density, c) * probe).sum()

        for fn, x in ((loss_wrt_density, density), (loss_wrt_colors, colors)):
            ana = analytic_grad(fn, x)
            num = finite_difference_grad(fn, x.detach().clone())
            assert rel_error(ana.numpy(), num.numpy(), floor=1e-3) < 1e-4


class TestRaySampler:
    def make(self, seed=0):
        torch.manual_seed(seed)
        return RaySampler(depth_samples=4, color_channels=3, hidden=16)

    def test_density_nonnegative_and_pixel_count(self):
        sampler = self.make()
        gen = torch.Generator().manual_seed(1)
        density, colors = sampler(torch.randn(2, 4, 5, 6, generator=gen),
                                  torch.randn(2, 3, 5, 6, generator=gen))
        assert density.shape == (2, 30, 4)      # N_pix = H' * W'
        assert colors.shape == (2, 30, 4, 3)
        assert (density >= 0).all()

    def test_no_cross_pixel_coupling(self):
        sampler = self.make()
        gen = torch.Generator().manual_seed(2)
        fd = torch.randn(1, 4, 1, 8, generator=gen)
        fc = torch.randn(1, 3, 1, 8, generator=gen)
        density, colors = sampler(fd, fc)
        # permutation oracle: swap two pixels in the inputs
        perm = list(range(8))
        perm[2], perm[5] = perm[5], perm[2]
        density_p, colors_p = sampler(fd[..., perm], fc[..., perm])
        assert torch.equal(density_p, density[:, perm])
        assert torch.equal(colors_p, colors[:, perm])

    def test_grid_mismatch_fatal(self):
        sampler = self.make()
        with pytest.raises(ValueError):
            sampler(torch.zeros(1, 4, 3, 3), torch.zeros(1, 3, 4, 4))


class TestExtractors:
    @pytest.mark.parametrize("cls,channels", [(ShapeExtractor, 4), (ColorExtractor, 3)])
    def test_zero_input_zero_bias_gives_zero(self, cls, channels):
        torch.manual_seed(0)
        net = cls(in_channels=5, **({"depth_samples": channels} if cls is ShapeExtractor
                                    else {"color_channels": channels}))
        with torch.no_grad():
            net.conv1.bias.zero_()
            net.conv2.bias.zero_()
        out = net(torch.zeros(2, 5, 6, 6))
        assert torch.equal(out, torch.zeros(2, channels, 6, 6))

    @pytest.mark.parametrize("cls", [ShapeExtractor, ColorExtractor])
    def test_deterministic_given_seed(self, cls):
        def run():
            torch.manual_seed(7)
            net = cls(in_channels=5)
            x = torch.rand(1, 5, 8, 8, generator=torch.Generator().manual_seed(8))
            return hashlib.sha256(net(x).detach().numpy().tobytes()).hexdigest()

        assert run() == run()

    def test_shape_contract(self):
        torch.manual_seed(1)
        shape = ShapeExtractor(in_channels=6, depth_samples=9)
        color = ColorExtractor(in_channels=6, color_channels=7)
        x = torch.rand(3, 6, 10, 12)
        assert shape(x).shape == (3, 9, 10, 12)
        assert color(x).shape == (3, 7, 10, 12)


class TestDecoder:
    def make(self, seed=3):
        torch.manual_seed(seed)
        return RenderDecoder(feature_channels=8, color_channels=4, num_up_blocks=2)

    def test_output_range_and_size(self):
        dec = self.make()
        gen = torch.Generator().manual_seed(4)
        rendered = torch.randn(2, 4, 16, 16, generator=gen)
        feats = torch.randn(2, 8, 16, 16, generator=gen)
        out = dec(rendered, feats)
        assert out.shape == (2, 3, 64, 64)
        assert (out >= 0).all() and (out <= 1).all()

    def test_bit_reproducible(self):
        def run():
            torch.manual_seed(5)
            dec = RenderDecoder(feature_channels=8, color_channels=4)
            gen = torch.Generator().manual_seed(6)
            rendered = torch.randn(1, 4, 8, 8, generator=gen)
            feats = torch.randn(1, 8, 8, 8, generator=gen)
            return dec(rendered, feats).detach().numpy().tobytes()

        assert run() == run()

    def test_grid_mismatch_fatal(self):
        dec = self.make()
        with pytest.raises(ValueError):
            dec(torch.zeros(1, 4, 8, 8), torch.zeros(1, 8, 9, 9))


class TestVolumeRendererModule:
    def test_end_to_end_shapes(self):
        torch.manual_seed(9)
        vol = VolumeRenderer(in_channels=8, depth_samples=4, color_channels=6, hidden=16)
        rendered, density = vol(torch.rand(2, 8, 5, 5))
        assert rendered.shape == (2, 6, 5, 5)
        assert density.shape == (2, 25, 4)
        assert (density >= 0).all()

import pytest
import torch

from faceanim.losses import (IdentityFeatureExtractor, LossWeights,
                             perceptual_loss, total_loss)

from helpers import analytic_grad, finite_difference_grad, rel_error


class TestPerceptualLoss:
    def test_identical_images_give_exact_zero(self):
        x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        assert perceptual_loss(x, x.clone()).item() == 0.0

    def test_symmetric(self):
        gen = torch.Generator().manual_seed(1)
        x = torch.rand(1, 3, 16, 16, generator=gen)
        y = torch.rand(1, 3, 16, 16, generator=gen)
        assert perceptual_loss(x, y).item() == perceptual_loss(y, x).item()

    def test_constant_offset_pyramid_oracle(self):
        # hand-evaluated: each of the 3 scales contributes exactly delta
        delta = 0.125  # exactly representable, survives averaging untouched
        x = torch.full((1, 3, 16, 16), 0.25)
        y = torch.full((1, 3, 16, 16), 0.25 + delta)
        assert perceptual_loss(x, y).item() == pytest.approx(3 * delta, abs=1e-7)

    def test_nonnegative_random(self):
        gen = torch.Generator().manual_seed(2)
        for _ in range(5):
            x = torch.rand(1, 3, 8, 8, generator=gen)
            y = torch.rand(1, 3, 8, 8, generator=gen)
            assert perceptual_loss(x, y).item() >= 0.0

    def test_shape_mismatch_fatal(self):
        with pytest.raises(ValueError):
            perceptual_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 16, 16))

    def test_plugin_stages_are_summed(self):
        class TwoStage:
            identifier = "two-stage"

            def __call__(self, images):
                return [images, 2.0 * images]

        x = torch.zeros(1, 3, 8, 8)
        y = torch.full((1, 3, 8, 8), 0.5)
        # per scale: |0 - 0.5| + |0 - 1.0| = 1.5; three scales -> 4.5
        value = perceptual_loss(x, y, feature_extractor=TwoStage())
        assert value.item() == pytest.approx(4.5, abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(3)
        target = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
        # keep |target - pred| away from zero so |.| stays smooth
        pred = target + 0.2 + 0.1 * torch.rand(1, 3, 8, 8, generator=gen,
                                               dtype=torch.float64)

        def fn(p):
            return perceptual_loss(target, p)

        ana = analytic_grad(fn, pred)
        num = finite_difference_grad(fn, pred.detach().clone())
        assert rel_error(ana.numpy(), num.numpy(), floor=1e-4) < 1e-4


class TestTotalLoss:
    def test_all_zero_components(self):
        total, report = total_loss(0.0, 0.0, 0.0, LossWeights(10, 1, 10))
        assert total == 0.0 and report.total == 0.0

    def test_arithmetic_oracle(self):
        total, report = total_loss(1.0, 2.0, 3.0, LossWeights(10, 1, 10))
        assert total == 42.0
        assert report.total == 42.0

    def test_zero_weight_drops_term(self):
        base, _ = total_loss(1.0, 5.0, 3.0, LossWeights(2, 0, 4))
        other, _ = total_loss(1.0, 999.0, 3.0, LossWeights(2, 0, 4))
        assert base == other

    def test_report_recomputation_invariant(self):
        weights = LossWeights(10, 1, 10)
        total, report = total_loss(torch.tensor(0.3), torch.tensor(0.7),
                                   torch.tensor(0.1), weights)
        recomputed = (weights.perceptual * report.perceptual
                      + weights.adversarial * report.adversarial_g
                      + weights.equivariance * report.equivariance)
        assert report.total == recomputed

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            total_loss(1.0, 1.0, 1.0, LossWeights(-1, 1, 1))

    def test_report_serialization(self):
        _, report = total_loss(1.0, 2.0, 3.0, LossWeights(1, 1, 1),
                               discriminator=0.5, scores={"rgb_real": 0.9})
        payload = report.to_dict()
        assert payload["total"] == 6.0
        assert payload["score_rgb_real"] == 0.9

    def test_identity_extractor_identifier(self):
        assert IdentityFeatureExtractor().identifier == "identity"

"""Non-adversarial losses and the weighted total objective."""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

PYRAMID_SCALES = (1.0, 0.5, 0.25)


class IdentityFeatureExtractor:
    """Default perceptual plugin: the image itself is the only stage.

    With the pyramid on top this reduces the perceptual term to a pure
    multi-scale L1, which keeps the core test suite free of pretrained
    weights. A real feature network can be plugged in via the same
    callable contract: images (B, 3, H, W) -> list of feature tensors.
    """

    identifier = "identity"

    def __call__(self, images):
        return [images]


def _downsample(x, factor):
    steps = {1.0: 0, 0.5: 1, 0.25: 2}[factor]
    for _ in range(steps):
        x = F.avg_pool2d(x, kernel_size=2)
    return x


def perceptual_loss(target, prediction, feature_extractor=None,
                    scales=PYRAMID_SCALES):
    """Sum over pyramid scales and extractor stages of mean |f(x) - f(x')|."""
    if target.shape != prediction.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs "
                         f"{tuple(prediction.shape)}")
    extractor = feature_extractor or IdentityFeatureExtractor()
    loss = None
    for scale in scales:
        t = _downsample(target, scale)
        p = _downsample(prediction, scale)
        for ft, fp in zip(extractor(t), extractor(p)):
            term = (ft - fp).abs().mean()
            loss = term if loss is None else loss + term
    return loss


@dataclass
class LossWeights:
    perceptual: float = 10.0
    adversarial: float = 1.0
    equivariance: float = 10.0

    def validate(self):
        if min(self.perceptual, self.adversarial, self.equivariance) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    """Per-term losses for one step; total is the exact weighted sum."""

    perceptual: float
    adversarial_g: float
    equivariance: float
    total: float
    discriminator: float = 0.0
    scores: dict = field(default_factory=dict)

    def to_dict(self):
        out = {"perceptual": self.perceptual, "adversarial_g": self.adversarial_g,
               "equivariance": self.equivariance, "total": self.total,
               "discriminator": self.discriminator}
        out.update({f"score_{k}": v for k, v in self.scores.items()})
        return out


def total_loss(perceptual, adversarial_g, equivariance, weights,
               discriminator=0.0, scores=None):
    """Weighted sum of the component losses.

    Accepts tensors (training) or plain floats (reporting); returns the
    total in kind plus a LossReport whose `total` field is the exact
    float recomputation w_P*p + w_G*a + w_E*e.
    """
    weights.validate()
    total = (weights.perceptual * perceptual
             + weights.adversarial * adversarial_g
             + weights.equivariance * equivariance)

    def scalar(x):
        return float(x.detach()) if torch.is_tensor(x) else float(x)

    p, a, e = scalar(perceptual), scalar(adversarial_g), scalar(equivariance)
    report = LossReport(
        perceptual=p,
        adversarial_g=a,
        equivariance=e,
        total=(weights.perceptual * p + weights.adversarial * a
               + weights.equivariance * e),
        discriminator=scalar(discriminator),
        scores=dict(scores or {}),
    )
    return total, report

"""Weighted ensemble of multi-scale, spectrally normalized discriminators.

One member per modality in {rgb, depth, normal}; each member runs a
patch discriminator at full and half resolution and reports the mean
patch probability. The ensemble score is the simplex-weighted sum

    D_total(x) = sum_i lambda_i D_i(x_i),   sum_i lambda_i = 1,

and the adversarial losses follow the min-max log form with the
non-saturating generator variant.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

MODALITIES = ("rgb", "depth", "normal")
LOG_EPS = 1e-7


def _default_state(rows, dtype=torch.float32, device=None):
    u = torch.ones(rows, dtype=dtype, device=device)
    return u / u.norm()


def spectral_normalize(weight, state, update=True):
    """One power-iteration step; returns (weight / sigma_hat, new_state).

    `state` is the persistent left singular vector estimate (out_features,).
    An all-zero weight is returned unchanged and the state is reset.
    """
    if not torch.isfinite(weight).all():
        raise FloatingPointError("non-finite weight in spectral normalization")
    w = weight.flatten(1)
    if (w == 0).all():
        return weight, _default_state(w.shape[0], weight.dtype, weight.device)
    with torch.no_grad():
        u = state
        if update:
            v = F.normalize(w.t() @ u, dim=0, eps=1e-12)
            u = F.normalize(w @ v, dim=0, eps=1e-12)
        else:
            v = F.normalize(w.t() @ u, dim=0, eps=1e-12)
    sigma = torch.dot(u, torch.mv(w, v))
    return weight / sigma, u


class SNConv2d(nn.Module):
    """Conv2d whose weight is spectrally normalized at use time.

    The power-iteration vector is a buffer: it persists in checkpoints and
    is only advanced in training mode.
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size,
                              stride=stride, padding=padding)
        self.register_buffer("power_u", _default_state(out_channels))

    def forward(self, x):
        weight, u = spectral_normalize(self.conv.weight, self.power_u,
                                       update=self.training)
        if self.training:
            self.power_u.copy_(u)
        return F.conv2d(x, weight, self.conv.bias, stride=self.conv.stride,
                        padding=self.conv.padding)


class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels, base=16, num_blocks=4):
        super().__init__()
        layers = []
        ch = in_channels
        for i in range(num_blocks):
            out = base * 2 ** i
            layers.append(SNConv2d(ch, out, kernel_size=4, stride=2, padding=1))
            ch = out
        self.blocks = nn.ModuleList(layers)
        self.head = SNConv2d(ch, 1, kernel_size=3, stride=1, padding=1)

    def forward(self, x):
        for block in self.blocks:
            x = F.leaky_relu(block(x), 0.2)
        return self.head(x)  # patch logits


class DiscriminatorMember(nn.Module):
    """Multi-scale (full + half resolution) patch discriminator for one
    modality; outputs the mean patch probability per batch item."""

    def __init__(self, name, in_channels, base=16, num_blocks=4, scales=(1.0, 0.5)):
        super().__init__()
        if name not in MODALITIES:
            raise ValueError(f"member name must be one of {MODALITIES}")
        self.name = name
        self.scales = scales
        self.nets = nn.ModuleList(
            [PatchDiscriminator(in_channels, base, num_blocks) for _ in scales])

    def forward(self, x):
        scores = []
        for scale, net in zip(self.scales, self.nets):
            inp = x if scale == 1.0 else F.interpolate(
                x, scale_factor=scale, mode="bilinear", align_corners=False,
                recompute_scale_factor=False)
            probs = torch.sigmoid(net(inp))
            scores.append(probs.mean(dim=(1, 2, 3)))
        return torch.stack(scores, dim=0).mean(dim=0)  # (B,)


@dataclass
class EnsembleInput:
    """Modalities derived from the same frame (real or generated)."""

    rgb: torch.Tensor
    depth: Optional[torch.Tensor] = None
    normal: Optional[torch.Tensor] = None

    def get(self, name):
        return getattr(self, name)


def normalize_depth_map(depth, eps=1e-8):
    """Per-image min-max normalization of depth to [0, 1] (scale-free input
    for the depth discriminator)."""
    flat = depth.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    return (depth - lo) / (hi - lo + eps)


class DiscriminatorEnsemble(nn.Module):
    def __init__(self, member_names=MODALITIES, weights=(0.5, 0.25, 0.25),
                 base=16, num_blocks=4, init_seed=None):
        super().__init__()
        names = tuple(member_names)
        if len(set(names)) != len(names) or not set(names) <= set(MODALITIES):
            raise ValueError(f"member names must be unique and within {MODALITIES}")
        if len(weights) != len(names):
            raise ValueError("one weight per member required")
        w = torch.tensor(weights, dtype=torch.float64)
        if (w < 0).any() or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError(f"weights must lie on the simplex, got {tuple(weights)}")
        self.member_names = names

        def build(name):
            member = lambda: DiscriminatorMember(  # noqa: E731
                name, 1 if name == "depth" else 3, base=base, num_blocks=num_blocks)
            if init_seed is None:
                return member()
            from .seeding import derive_seed, seeded_init

            with seeded_init(derive_seed(init_seed, f"disc:{name}")):
                return member()

        self.members = nn.ModuleDict({name: build(name) for name in names})
        self.register_buffer("weights", w.to(torch.float32))

    def member_weight(self, name):
        return float(self.weights[self.member_names.index(name)])

    def discriminate(self, inputs):
        """Weighted score in (0, 1) plus per-member scores for logging.

        Members with zero weight are skipped entirely; they contribute
        nothing to the score or to any gradient.
        """
        total = None
        per_member = {}
        for i, name in enumerate(self.member_names):
            lam = self.weights[i]
            if float(lam) == 0.0:
                continue
            x = inputs.get(name)
            if x is None:
                raise ValueError(f"member '{name}' has positive weight but the "
                                 f"'{name}' modality is missing from the input")
            if name == "depth":
                x = normalize_depth_map(x)
            score = self.members[name](x)
            per_member[name] = score
            contribution = lam.to(score.dtype) * score
            total = contribution if total is None else total + contribution
        if total is None:
            raise ValueError("all ensemble weights are zero")
        return total, per_member

    def forward(self, inputs):
        return self.discriminate(inputs)


def gan_loss_discriminator(ensemble, real, fake, form="vanilla"):
    """Discriminator side of the min-max objective; `fake` must be detached."""
    d_real, real_scores = ensemble.discriminate(real)
    d_fake, fake_scores = ensemble.discriminate(fake)
    if form == "vanilla":
        loss = -(torch.log(d_real.clamp(min=LOG_EPS)) +
                 torch.log((1.0 - d_fake).clamp(min=LOG_EPS))).mean()
    elif form == "lsgan":
        loss = ((d_real - 1.0) ** 2 + d_fake ** 2).mean()
    else:
        raise ValueError(f"unknown gan loss form: {form}")
    return loss, real_scores, fake_scores


def gan_loss_generator(ensemble, fake, form="vanilla"):
    """Non-saturating generator loss -log D_total(fake)."""
    d_fake, scores = ensemble.discriminate(fake)
    if form == "vanilla":
        loss = -torch.log(d_fake.clamp(min=LOG_EPS)).mean()
    elif form == "lsgan":
        loss = ((d_fake - 1.0) ** 2).mean()
    else:
        raise ValueError(f"unknown gan loss form: {form}")
    return loss, scores

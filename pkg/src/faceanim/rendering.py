"""Face volume rendering over the warped feature grid.

Warped source features are split by two shallow convolutional extractors
into density-oriented and color-oriented channels. A per-pixel MLP turns
them into D density samples (softplus, so nonnegative) and D color
vectors along one frontal orthogonal ray per pixel; transmittance-based
accumulation produces the rendered feature map

    rendered_i = sum_j tau_j (1 - exp(-density_ij)) color_ij,
    tau_j      = exp(-sum_{k<j} density_ik),   tau_1 = 1.

A shallow decoder with spatially-adaptive normalization conditioned on
the rendered features upsamples back to image resolution.
"""

import torch
import torch.nn.functional as F
from torch import nn


class ShapeExtractor(nn.Module):
    """Shallow conv map from warped features to density channels (D, H', W')."""

    def __init__(self, in_channels, depth_samples=16, hidden=64):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(hidden, depth_samples, kernel_size=3, padding=1)

    def forward(self, features):
        return self.conv2(F.relu(self.conv1(features)))


class ColorExtractor(nn.Module):
    """Shallow conv map from warped features to color channels (C_c, H', W')."""

    def __init__(self, in_channels, color_channels=16, hidden=64):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(hidden, color_channels, kernel_size=3, padding=1)

    def forward(self, features):
        return self.conv2(F.relu(self.conv1(features)))


class RaySampler(nn.Module):
    """Per-pixel MLP producing D density and D x C_out color samples.

    Implemented as 1x1 convolutions, so there is no cross-pixel coupling:
    permuting two pixels' inputs permutes their outputs.
    """

    def __init__(self, depth_samples=16, color_channels=16, hidden=64):
        super().__init__()
        self.depth_samples = depth_samples
        self.color_channels = color_channels
        in_channels = depth_samples + color_channels
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, hidden, kernel_size=1), nn.ReLU(),
            nn.Conv2d(hidden, hidden, kernel_size=1), nn.ReLU(),
        )
        self.density_head = nn.Conv2d(hidden, depth_samples, kernel_size=1)
        self.color_head = nn.Conv2d(hidden, depth_samples * color_channels, kernel_size=1)

    def forward(self, density_features, color_features):
        if density_features.shape[-2:] != color_features.shape[-2:]:
            raise ValueError("density/color feature grids disagree")
        b, _, h, w = density_features.shape
        hidden = self.body(torch.cat([density_features, color_features], dim=1))
        density = F.softplus(self.density_head(hidden))
        colors = self.color_head(hidden)
        if not (torch.isfinite(density).all() and torch.isfinite(colors).all()):
            raise FloatingPointError("ray sampler produced non-finite activations")
        # (B, H*W, D) and (B, H*W, D, C_out)
        density = density.view(b, self.depth_samples, h * w).permute(0, 2, 1)
        colors = colors.view(b, self.depth_samples, self.color_channels, h * w)
        colors = colors.permute(0, 3, 1, 2)
        return density, colors


def render_weights(density):
    """Transmittance and accumulation weights for densities (..., D) >= 0.

    Returns (weights, transmittance, residual) where weights[..., j] =
    tau_j (1 - exp(-density_j)), transmittance[..., j] = tau_j, and
    residual = tau_{D+1} (the light that survives all samples).
    """
    assert (density >= 0).all(), "negative density violates the render contract"
    cumulative = torch.cumsum(density, dim=-1)
    exclusive = torch.cat([torch.zeros_like(cumulative[..., :1]),
                           cumulative[..., :-1]], dim=-1)
    transmittance = torch.exp(-exclusive)
    weights = transmittance * (1.0 - torch.exp(-density))
    residual = torch.exp(-cumulative[..., -1])
    return weights, transmittance, residual


def volume_render(density, colors):
    """Accumulate per-sample colors (..., D, C) with densities (..., D)."""
    weights, _, _ = render_weights(density)
    return (weights.unsqueeze(-1) * colors).sum(dim=-2)


def volume_render_reference(density, colors):
    """Naive per-pixel, per-sample loop; independent oracle for volume_render.

    density: (N, D) array-like, colors: (N, D, C). Kept deliberately slow
    and scalar so it shares no code path with the vectorized renderer.
    """
    import math

    n = len(density)
    d = len(density[0])
    c = len(colors[0][0])
    out = [[0.0] * c for _ in range(n)]
    for i in range(n):
        for j in range(d):
            tau = math.exp(-sum(float(density[i][k]) for k in range(j)))
            alpha = 1.0 - math.exp(-float(density[i][j]))
            for ch in range(c):
                out[i][ch] += tau * alpha * float(colors[i][j][ch])
    return out


class SpadeNorm(nn.Module):
    """Spatially-adaptive normalization: parameter-free instance norm
    modulated by scale/shift maps predicted from a conditioning map."""

    def __init__(self, channels, cond_channels, hidden=64):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.shared = nn.Conv2d(cond_channels, hidden, kernel_size=3, padding=1)
        self.gamma = nn.Conv2d(hidden, channels, kernel_size=3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, kernel_size=3, padding=1)

    def forward(self, x, cond):
        normalized = self.norm(x)
        cond = F.interpolate(cond, size=x.shape[-2:], mode="nearest")
        shared = F.relu(self.shared(cond))
        return normalized * (1.0 + self.gamma(shared)) + self.beta(shared)


class SpadeUpBlock(nn.Module):
    def __init__(self, in_channels, out_channels, cond_channels):
        super().__init__()
        self.spade = SpadeNorm(in_channels, cond_channels)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)

    def forward(self, x, cond):
        out = F.leaky_relu(self.spade(x, cond), 0.2)
        out = F.interpolate(out, scale_factor=2, mode="nearest")
        return self.conv(out)


class RenderDecoder(nn.Module):
    """Shallow decoder: concatenated (source features, rendered features)
    upsampled with SPADE blocks conditioned on the rendered features,
    ending in a sigmoid RGB head at image resolution."""

    def __init__(self, feature_channels, color_channels, num_up_blocks=2, base=64):
        super().__init__()
        self.head = nn.Conv2d(feature_channels + color_channels, base,
                              kernel_size=3, padding=1)
        blocks = []
        ch = base
        for _ in range(num_up_blocks):
            blocks.append(SpadeUpBlock(ch, max(ch // 2, 16), color_channels))
            ch = max(ch // 2, 16)
        self.blocks = nn.ModuleList(blocks)
        self.rgb = nn.Conv2d(ch, 3, kernel_size=7, padding=3)

    def forward(self, rendered, source_features):
        if rendered.shape[-2:] != source_features.shape[-2:]:
            raise ValueError("rendered/source feature grids disagree")
        out = self.head(torch.cat([source_features, rendered], dim=1))
        for block in self.blocks:
            out = block(out, rendered)
        return torch.sigmoid(self.rgb(out))


class VolumeRenderer(nn.Module):
    """Shape/color extraction, adaptive ray sampling, and accumulation."""

    def __init__(self, in_channels, depth_samples=16, color_channels=16, hidden=64):
        super().__init__()
        self.depth_samples = depth_samples
        self.color_channels = color_channels
        self.shape_extractor = ShapeExtractor(in_channels, depth_samples, hidden)
        self.color_extractor = ColorExtractor(in_channels, color_channels, hidden)
        self.ray_sampler = RaySampler(depth_samples, color_channels, hidden)

    def forward(self, warped_features):
        b, _, h, w = warped_features.shape
        density_features = self.shape_extractor(warped_features)
        color_features = self.color_extractor(warped_features)
        density, colors = self.ray_sampler(density_features, color_features)
        rendered = volume_render(density, colors)  # (B, H*W, C_out)
        rendered = rendered.permute(0, 2, 1).view(b, self.color_channels, h, w)
        return rendered, density

"""Shared convolutional building blocks and coordinate-grid helpers."""

import torch
import torch.nn.functional as F
from torch import nn


def make_coordinate_grid(height, width, dtype=torch.float32, device=None):
    """Grid of normalized (x, y) coordinates covering [-1, 1]^2.

    Returns a (H, W, 2) tensor where [..., 0] is x (width axis) and
    [..., 1] is y (height axis). Endpoints land exactly on -1 and 1,
    matching grid_sample with align_corners=True.
    """
    x = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device)
    y = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device)
    yy = y.view(-1, 1).expand(height, width)
    xx = x.view(1, -1).expand(height, width)
    return torch.stack([xx, yy], dim=-1)


def kp2gaussian(positions, spatial_size, variance):
    """Keypoint positions (B, K, 2) to heatmaps (B, K, H, W)."""
    h, w = spatial_size
    grid = make_coordinate_grid(h, w, dtype=positions.dtype, device=positions.device)
    grid = grid.view(1, 1, h, w, 2)
    mean = positions.view(*positions.shape[:2], 1, 1, 2)
    squared = ((grid - mean) ** 2).sum(-1)
    return torch.exp(-0.5 * squared / variance)


class AntiAliasInterpolation2d(nn.Module):
    """Gaussian blur followed by bilinear downscaling (scale < 1)."""

    def __init__(self, channels, scale):
        super().__init__()
        sigma = (1.0 / scale - 1.0) / 2.0
        kernel_size = 2 * round(sigma * 4) + 1
        self.ka = kernel_size // 2
        self.kb = self.ka - 1 if kernel_size % 2 == 0 else self.ka

        coords = torch.arange(kernel_size, dtype=torch.float32)
        mean = (kernel_size - 1) / 2.0
        kernel1d = torch.exp(-((coords - mean) ** 2) / (2 * sigma ** 2))
        kernel2d = kernel1d.view(-1, 1) * kernel1d.view(1, -1)
        kernel2d = kernel2d / kernel2d.sum()
        kernel = kernel2d.view(1, 1, kernel_size, kernel_size).repeat(channels, 1, 1, 1)
        self.register_buffer("weight", kernel)
        self.groups = channels
        self.scale = scale

    def forward(self, x):
        if self.scale == 1.0:
            return x
        out = F.pad(x, (self.ka, self.kb, self.ka, self.kb))
        out = F.conv2d(out, weight=self.weight, groups=self.groups)
        return F.interpolate(out, scale_factor=(self.scale, self.scale),
                             mode="bilinear", align_corners=False,
                             recompute_scale_factor=False)


class SameBlock2d(nn.Module):
    def __init__(self, in_features, out_features, kernel_size=7, padding=3):
        super().__init__()
        self.conv = nn.Conv2d(in_features, out_features, kernel_size, padding=padding)
        self.norm = nn.InstanceNorm2d(out_features, affine=True)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class DownBlock2d(nn.Module):
    def __init__(self, in_features, out_features, kernel_size=3, padding=1):
        super().__init__()
        self.conv = nn.Conv2d(in_features, out_features, kernel_size, padding=padding)
        self.norm = nn.InstanceNorm2d(out_features, affine=True)

    def forward(self, x):
        out = F.relu(self.norm(self.conv(x)))
        return F.avg_pool2d(out, 2)


class UpBlock2d(nn.Module):
    def __init__(self, in_features, out_features, kernel_size=3, padding=1):
        super().__init__()
        self.conv = nn.Conv2d(in_features, out_features, kernel_size, padding=padding)
        self.norm = nn.InstanceNorm2d(out_features, affine=True)

    def forward(self, x):
        out = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.norm(self.conv(out)))


class Encoder(nn.Module):
    def __init__(self, block_expansion, in_features, num_blocks=3, max_features=64):
        super().__init__()
        blocks = []
        for i in range(num_blocks):
            in_ch = in_features if i == 0 else min(max_features, block_expansion * 2 ** i)
            out_ch = min(max_features, block_expansion * 2 ** (i + 1))
            blocks.append(DownBlock2d(in_ch, out_ch))
        self.down_blocks = nn.ModuleList(blocks)

    def forward(self, x):
        outs = [x]
        for block in self.down_blocks:
            outs.append(block(outs[-1]))
        return outs


class Decoder(nn.Module):
    def __init__(self, block_expansion, in_features, num_blocks=3, max_features=64):
        super().__init__()
        blocks = []
        for i in range(num_blocks)[::-1]:
            in_filters = (1 if i == num_blocks - 1 else 2) * min(max_features, block_expansion * 2 ** (i + 1))
            out_filters = min(max_features, block_expansion * 2 ** i)
            blocks.append(UpBlock2d(in_filters, out_filters))
        self.up_blocks = nn.ModuleList(blocks)
        self.out_filters = block_expansion + in_features

    def forward(self, x):
        out = x.pop()
        for block in self.up_blocks:
            out = block(out)
            skip = x.pop()
            out = torch.cat([out, skip], dim=1)
        return out


class Hourglass(nn.Module):
    """Encoder-decoder with skip connections."""

    def __init__(self, block_expansion, in_features, num_blocks=3, max_features=64):
        super().__init__()
        self.encoder = Encoder(block_expansion, in_features, num_blocks, max_features)
        self.decoder = Decoder(block_expansion, in_features, num_blocks, max_features)
        self.out_filters = self.decoder.out_filters

    def forward(self, x):
        return self.decoder(self.encoder(x))

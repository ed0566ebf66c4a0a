"""Frozen differentiable geometry extraction.

Depth comes from a pluggable backend (an adapter for external pretrained
weights, an analytic synthetic-scene oracle, or a smoothed inverse-
luminance baseline that needs no weights); the unit normal map is always
derived analytically from depth. Backend parameters are frozen: gradients
flow to the input image, never into the extractor.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class GeometryBackendError(RuntimeError):
    pass


@dataclass
class GeometryMaps:
    """depth: (B, 1, H, W) strictly positive; normal: (B, 3, H, W) unit,
    camera-facing (n_z > 0)."""

    depth: torch.Tensor
    normal: torch.Tensor


def normal_from_depth(depth, pixel_spacing=1.0):
    """Unit normals from a positive depth map (B, 1, H, W) or (H, W).

    Central finite differences in the interior, one-sided at borders;
    normal is proportional to (-dd/dx, -dd/dy, 1) and normalized. x is
    the width axis, y the height axis.
    """
    if pixel_spacing <= 0:
        raise ValueError("pixel_spacing must be positive")
    squeeze = depth.dim() == 2
    if squeeze:
        depth = depth.view(1, 1, *depth.shape)
    if (depth <= 0).any():
        raise ValueError("depth must be strictly positive")

    d = depth[:, 0]
    dx = torch.empty_like(d)
    dx[:, :, 1:-1] = (d[:, :, 2:] - d[:, :, :-2]) / 2.0
    dx[:, :, 0] = d[:, :, 1] - d[:, :, 0]
    dx[:, :, -1] = d[:, :, -1] - d[:, :, -2]
    dy = torch.empty_like(d)
    dy[:, 1:-1, :] = (d[:, 2:, :] - d[:, :-2, :]) / 2.0
    dy[:, 0, :] = d[:, 1, :] - d[:, 0, :]
    dy[:, -1, :] = d[:, -1, :] - d[:, -2, :]
    dx = dx / pixel_spacing
    dy = dy / pixel_spacing

    normal = torch.stack([-dx, -dy, torch.ones_like(dx)], dim=1)
    normal = normal / normal.norm(dim=1, keepdim=True)
    return normal[0].permute(1, 2, 0) if squeeze else normal


class LuminanceDepthBackend(nn.Module):
    """Weight-free baseline: depth = offset + (1 - blurred luminance).

    Smooth, strictly positive, and differentiable with respect to the
    image, which is all the adversarial loop needs at desk scale.
    """

    identifier = "baseline"

    def __init__(self, kernel_size=5, sigma=1.5, offset=0.5):
        super().__init__()
        coords = torch.arange(kernel_size, dtype=torch.float32) - (kernel_size - 1) / 2.0
        k1 = torch.exp(-coords ** 2 / (2 * sigma ** 2))
        k2 = k1.view(-1, 1) * k1.view(1, -1)
        self.register_buffer("kernel", (k2 / k2.sum()).view(1, 1, kernel_size, kernel_size))
        self.register_buffer("luma", torch.tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1))
        self.pad = kernel_size // 2
        self.offset = offset

    def forward(self, image):
        luminance = (image * self.luma).sum(dim=1, keepdim=True).clamp(0.0, 1.0)
        padded = F.pad(luminance, (self.pad,) * 4, mode="replicate")
        blurred = F.conv2d(padded, self.kernel)
        return self.offset + (1.0 - blurred)


@dataclass
class SceneSpec:
    """Parametric Lambertian height-field scene.

    kind: "plane" (slope_x/slope_y), "sphere_cap" (radius, cap_radius) or
    "gaussian_bump" (amplitude, sigma). All lengths are in pixels; the
    scene is rendered orthographically on an size x size grid with light
    direction `light` (normalized at use).
    """

    kind: str = "sphere_cap"
    size: int = 64
    base_depth: float = 64.0
    center: tuple = (0.0, 0.0)  # normalized [-1, 1] coords
    slope_x: float = 0.0
    slope_y: float = 0.0
    radius: float = 28.0
    cap_radius: float = 24.0
    amplitude: float = 10.0
    sigma: float = 10.0
    light: tuple = (0.0, 0.0, 1.0)
    albedo: float = 1.0

    def validate(self):
        if self.kind not in ("plane", "sphere_cap", "gaussian_bump"):
            raise ValueError(f"unknown scene kind: {self.kind}")
        if self.size < 4:
            raise ValueError("scene size too small")
        if self.kind == "sphere_cap" and not (0 < self.cap_radius <= self.radius):
            raise ValueError("need 0 < cap_radius <= radius")
        if self.kind == "gaussian_bump" and self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not any(c != 0 for c in self.light):
            raise ValueError("light direction must be nonzero")
        if self.base_depth <= 0:
            raise ValueError("base_depth must be positive")


def _height_and_gradient(spec, xs, ys):
    """Height field h(x, y) in pixels and its analytic gradient (dh/dx, dh/dy)."""
    if spec.kind == "plane":
        h = spec.slope_x * xs + spec.slope_y * ys
        return h, torch.full_like(h, spec.slope_x), torch.full_like(h, spec.slope_y)
    half = (spec.size - 1) / 2.0
    cx, cy = spec.center[0] * half + half, spec.center[1] * half + half
    rx, ry = xs - cx, ys - cy
    rho2 = rx ** 2 + ry ** 2
    if spec.kind == "sphere_cap":
        h_rim = math.sqrt(max(spec.radius ** 2 - spec.cap_radius ** 2, 0.0))
        inside = rho2 < spec.cap_radius ** 2
        hz = torch.sqrt((spec.radius ** 2 - rho2).clamp(min=1e-12))
        h = torch.where(inside, hz - h_rim, torch.zeros_like(hz))
        hx = torch.where(inside, -rx / hz, torch.zeros_like(hz))
        hy = torch.where(inside, -ry / hz, torch.zeros_like(hz))
        return h, hx, hy
    # gaussian_bump
    h = spec.amplitude * torch.exp(-rho2 / (2 * spec.sigma ** 2))
    hx = -rx / spec.sigma ** 2 * h
    hy = -ry / spec.sigma ** 2 * h
    return h, hx, hy


def render_synthetic_scene(spec, dtype=torch.float64):
    """Render a Lambertian height field orthographically.

    Returns (image, GeometryMaps) where image is (H, W, 3) in [0, 1],
    shading = albedo * max(0, n . l), and the geometry maps hold the
    exact analytic depth and normals (depth = base_depth - height, so
    higher surface points are nearer the camera).
    """
    spec.validate()
    n = spec.size
    idx = torch.arange(n, dtype=dtype)
    ys, xs = torch.meshgrid(idx, idx, indexing="ij")
    h, hx, hy = _height_and_gradient(spec, xs, ys)

    depth = spec.base_depth - h
    if (depth <= 0).any():
        raise ValueError("scene height exceeds base_depth; depth went nonpositive")
    # depth gradient is -height gradient, normal ~ (-dd/dx, -dd/dy, 1)
    normal = torch.stack([hx, hy, torch.ones_like(hx)], dim=-1)
    normal = normal / normal.norm(dim=-1, keepdim=True)

    light = torch.tensor(spec.light, dtype=dtype)
    light = light / light.norm()
    shading = (spec.albedo * (normal @ light).clamp(min=0.0)).clamp(max=1.0)
    image = shading.unsqueeze(-1).expand(n, n, 3).contiguous()

    maps = GeometryMaps(depth=depth.view(1, 1, n, n),
                        normal=normal.permute(2, 0, 1).unsqueeze(0))
    return image, maps


class OracleDepthBackend(nn.Module):
    """Analytic test backend: returns the exact depth of a known synthetic
    scene regardless of pixel content (the image only threads the graph)."""

    identifier = "oracle"

    def __init__(self, spec):
        super().__init__()
        _, maps = render_synthetic_scene(spec)
        self.register_buffer("depth", maps.depth.to(torch.float32))

    def forward(self, image):
        b = image.shape[0]
        anchor = image.mean(dim=(1, 2, 3), keepdim=False).view(b, 1, 1, 1)
        return self.depth.to(image.dtype).expand(b, -1, -1, -1) + 0.0 * anchor


class ExternalDepthAdapter(nn.Module):
    """Adapter slot for real pretrained inverse-rendering weights.

    Tensor contract: a TorchScript module mapping (B, 3, H, W) RGB in
    [0, 1] to (B, 1, H, W) strictly positive canonical-view depth.
    """

    identifier = "external"

    def __init__(self, weights_path):
        super().__init__()
        import os

        if not os.path.exists(weights_path):
            raise GeometryBackendError(
                f"geometry weights not found at {weights_path}; export a "
                "TorchScript module mapping (B,3,H,W) RGB in [0,1] to "
                "(B,1,H,W) positive depth and pass its path")
        self.module = torch.jit.load(weights_path, map_location="cpu")
        self.module.eval()

    def forward(self, image):
        depth = self.module(image)
        if depth.shape != (image.shape[0], 1, *image.shape[-2:]):
            raise GeometryBackendError(
                f"adapter returned shape {tuple(depth.shape)}, expected "
                f"(B,1,H,W) matching the input")
        return depth


class GeometryExtractor(nn.Module):
    """Frozen wrapper: depth from the backend, normals derived from depth."""

    def __init__(self, backend, pixel_spacing=1.0):
        super().__init__()
        self.backend = backend
        self.pixel_spacing = pixel_spacing
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def identifier(self):
        return self.backend.identifier

    def forward(self, image):
        depth = self.backend(image)
        if not torch.isfinite(depth).all():
            raise GeometryBackendError("backend produced non-finite depth")
        if (depth <= 0).any():
            raise GeometryBackendError("backend produced nonpositive depth")
        normal = normal_from_depth(depth, self.pixel_spacing)
        return GeometryMaps(depth=depth, normal=normal)


def build_backend(name, oracle_spec=None, external_path=None):
    if name == "baseline":
        return LuminanceDepthBackend()
    if name == "oracle":
        return OracleDepthBackend(oracle_spec or SceneSpec())
    if name == "external":
        if external_path is None:
            raise GeometryBackendError("external backend requires a weights path")
        return ExternalDepthAdapter(external_path)
    raise GeometryBackendError(f"unknown geometry backend: {name}")

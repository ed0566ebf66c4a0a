"""Random thin-plate-spline coordinate transforms for equivariance training.

The transform maps normalized coordinates z in [-1, 1]^2 to

    T(z) = s R z + sum_i w_i U(|z - c_i|^2),   U(r2) = r2 * log(r2 + eps)

with a rotation/scale-jittered affine part and radial basis kernels on a
control-point lattice. The local Jacobian is available in closed form.
"""

import math

import torch
import torch.nn.functional as F

from .blocks import make_coordinate_grid

_U_EPS = 1e-6


class RandomTpsTransform:
    """One random transform per batch item, fully determined by `generator`."""

    def __init__(self, batch_size, control_points=5, scale_jitter=0.15,
                 rotation_deg=15.0, tps_std=0.005, generator=None,
                 dtype=torch.float32, device=None):
        def draw(*shape, low=-1.0, high=1.0):
            u = torch.rand(*shape, generator=generator, dtype=dtype, device=device)
            return low + (high - low) * u

        angle = draw(batch_size) * math.pi * rotation_deg / 180.0
        scale = 1.0 + draw(batch_size) * scale_jitter
        cos, sin = torch.cos(angle) * scale, torch.sin(angle) * scale
        self.affine = torch.stack([
            torch.stack([cos, -sin], dim=-1),
            torch.stack([sin, cos], dim=-1),
        ], dim=-2)  # (B, 2, 2)

        centers = make_coordinate_grid(control_points, control_points,
                                       dtype=dtype, device=device)
        self.centers = centers.reshape(-1, 2)  # (P, 2)
        self.weights = tps_std * torch.randn(
            batch_size, self.centers.shape[0], 2,
            generator=generator, dtype=dtype, device=device)
        self.batch_size = batch_size
        eye = torch.eye(2, dtype=dtype, device=device)
        self.is_identity = bool((self.weights == 0).all()) and bool((self.affine == eye).all())

    @classmethod
    def identity(cls, batch_size, dtype=torch.float32, device=None):
        t = cls(batch_size, tps_std=0.0, scale_jitter=0.0, rotation_deg=0.0,
                generator=torch.Generator().manual_seed(0), dtype=dtype, device=device)
        return t

    def warp_coordinates(self, coords):
        """Apply T to coords (B, N, 2)."""
        if self.is_identity:
            return coords
        out = torch.einsum("bij,bnj->bni", self.affine.to(coords.dtype), coords)
        rel = coords.unsqueeze(2) - self.centers.to(coords.dtype).view(1, 1, -1, 2)
        r2 = (rel ** 2).sum(-1)
        radial = r2 * torch.log(r2 + _U_EPS)  # (B, N, P)
        out = out + torch.einsum("bnp,bpi->bni", radial, self.weights.to(coords.dtype))
        return out

    def jacobian(self, coords):
        """Local Jacobian dT/dz at coords (B, N, 2) -> (B, N, 2, 2)."""
        if self.is_identity:
            eye = torch.eye(2, dtype=coords.dtype, device=coords.device)
            return eye.view(1, 1, 2, 2).expand(*coords.shape[:2], 2, 2)
        rel = coords.unsqueeze(2) - self.centers.to(coords.dtype).view(1, 1, -1, 2)
        r2 = (rel ** 2).sum(-1, keepdim=True)
        # d/dz [r2 log(r2+eps)] = 2 (z - c) (log(r2+eps) + r2/(r2+eps))
        grad_u = 2.0 * rel * (torch.log(r2 + _U_EPS) + r2 / (r2 + _U_EPS))
        radial_jac = torch.einsum("bpi,bnpj->bnij", self.weights.to(coords.dtype), grad_u)
        return self.affine.to(coords.dtype).unsqueeze(1) + radial_jac

    def transform_image(self, image):
        """Resample image (B, C, H, W) at the warped identity grid."""
        if self.is_identity:
            return image
        b, _, h, w = image.shape
        grid = make_coordinate_grid(h, w, dtype=image.dtype, device=image.device)
        warped = self.warp_coordinates(grid.view(1, -1, 2).expand(b, -1, 2))
        return F.grid_sample(image, warped.view(b, h, w, 2), mode="bilinear",
                             padding_mode="border", align_corners=True)

    def min_abs_jacobian_det(self, probe_points=64):
        """Smallest |det dT/dz| over a probe grid; used to reject degenerate draws."""
        side = int(math.sqrt(probe_points))
        grid = make_coordinate_grid(side, side, dtype=self.weights.dtype,
                                    device=self.weights.device)
        jac = self.jacobian(grid.view(1, -1, 2).expand(self.batch_size, -1, 2))
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        return det.abs().min().item()


class TranslationTransform:
    """Pure translation T(z) = z + t; same interface as the TPS transform."""

    def __init__(self, offset, batch_size=1):
        self.offset = torch.as_tensor(offset, dtype=torch.float32)
        self.batch_size = batch_size
        self.is_identity = bool((self.offset == 0).all())

    def warp_coordinates(self, coords):
        return coords + self.offset.to(coords.dtype)

    def jacobian(self, coords):
        eye = torch.eye(2, dtype=coords.dtype, device=coords.device)
        return eye.view(1, 1, 2, 2).expand(*coords.shape[:2], 2, 2)

    def transform_image(self, image):
        b, _, h, w = image.shape
        grid = make_coordinate_grid(h, w, dtype=image.dtype, device=image.device)
        warped = grid.unsqueeze(0).expand(b, h, w, 2) + self.offset.to(image.dtype)
        return F.grid_sample(image, warped, mode="bilinear",
                             padding_mode="border", align_corners=True)


def sample_valid_transform(batch_size, generator, min_det=1e-2, max_tries=8, **kwargs):
    """Draw transforms until every probe-point Jacobian is invertible."""
    for _ in range(max_tries):
        t = RandomTpsTransform(batch_size, generator=generator, **kwargs)
        if t.min_abs_jacobian_det() > min_det:
            return t
    raise RuntimeError("could not sample a non-degenerate transform")

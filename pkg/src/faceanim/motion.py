"""Keypoint-driven motion estimation and feature warping.

A self-supervised detector produces K landmarks with 2x2 local Jacobians
for the source and driving frames. Each keypoint induces an affine
backward flow

    flow_k(z) = p_src_k + J_src_k J_drv_k^{-1} (z - p_drv_k)

over the normalized [-1, 1]^2 grid. A mask network blends the K flows
with an identity background flow into one dense backward field plus an
occlusion map; source features are bilinearly warped along the field and
multiplied by the occlusion map.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import AntiAliasInterpolation2d, Hourglass, kp2gaussian, make_coordinate_grid


@dataclass
class KeypointSet:
    """Landmark positions (B, K, 2) in [-1, 1] and Jacobians (B, K, 2, 2)."""

    positions: torch.Tensor
    jacobians: torch.Tensor

    def __post_init__(self):
        if self.positions.shape[:2] != self.jacobians.shape[:2]:
            raise ValueError("positions and jacobians disagree on batch/keypoint dims")

    @property
    def num_keypoints(self):
        return self.positions.shape[1]

    def detach(self):
        return KeypointSet(self.positions.detach(), self.jacobians.detach())


def invert_jacobian(jac, eps=1e-4, return_flags=False):
    """Invert a batch of 2x2 matrices (..., 2, 2).

    Exact adjugate inverse where |det| > eps; otherwise the matrix is
    regularized to J + eps*I before inversion. The regularization mask is
    returned as diagnostics when requested.
    """
    if not torch.isfinite(jac).all():
        raise FloatingPointError("non-finite jacobian")
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    degenerate = det.abs() <= eps
    if degenerate.any():
        eye = torch.eye(2, dtype=jac.dtype, device=jac.device).expand_as(jac)
        jac = torch.where(degenerate[..., None, None], jac + eps * eye, jac)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    adj = torch.stack([
        torch.stack([jac[..., 1, 1], -jac[..., 0, 1]], dim=-1),
        torch.stack([-jac[..., 1, 0], jac[..., 0, 0]], dim=-1),
    ], dim=-2)
    inv = adj / det[..., None, None]
    if return_flags:
        return inv, degenerate
    return inv


def sparse_motion(kp_source, kp_driving, grid, eps=1e-4):
    """Per-keypoint affine backward flows (B, K, H, W, 2) over `grid` (H, W, 2)."""
    if kp_source.num_keypoints != kp_driving.num_keypoints:
        raise ValueError("source/driving keypoint counts differ")
    b, k = kp_driving.positions.shape[:2]
    h, w = grid.shape[:2]
    affine = torch.matmul(kp_source.jacobians, invert_jacobian(kp_driving.jacobians, eps))
    rel = grid.view(1, 1, h, w, 2) - kp_driving.positions.view(b, k, 1, 1, 2)
    rotated = torch.einsum("bkij,bkhwj->bkhwi", affine, rel)
    return kp_source.positions.view(b, k, 1, 1, 2) + rotated


def compose_dense_flow(masks, sparse_flows, grid):
    """Blend identity + sparse flows with soft masks, exactly

        flow(z) = M_0 z + sum_k M_k flow_k(z)

    masks: (B, K+1, H, W) on the simplex per pixel (channel 0 = background).
    sparse_flows: (B, K, H, W, 2). grid: (H, W, 2). Returns (B, H, W, 2).
    """
    b, km1, h, w = masks.shape
    identity = grid.view(1, 1, h, w, 2).to(masks.dtype)
    flows = torch.cat([identity.expand(b, 1, h, w, 2), sparse_flows], dim=1)
    return (masks.unsqueeze(-1) * flows).sum(dim=1)


def warp_features(features, flow, occlusion=None):
    """Backward-warp features (B, C, H, W) along flow (B, H, W, 2).

    Bilinear sampling with border clamping for out-of-range targets, then
    an elementwise product with the occlusion map (B, 1, H, W) broadcast
    over channels.
    """
    if features.shape[-2:] != flow.shape[1:3]:
        raise ValueError(f"feature grid {tuple(features.shape[-2:])} does not match "
                         f"flow grid {tuple(flow.shape[1:3])}")
    warped = F.grid_sample(features, flow, mode="bilinear",
                           padding_mode="border", align_corners=True)
    if occlusion is not None:
        warped = warped * occlusion
    return warped


class KeypointDetector(nn.Module):
    """Hourglass heatmap detector with soft-argmax positions and
    heatmap-weighted 2x2 Jacobian regression."""

    def __init__(self, num_keypoints=15, block_expansion=16, num_blocks=3,
                 max_features=64, temperature=0.1, scale_factor=0.25,
                 estimate_jacobian=True):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.temperature = temperature
        self.estimate_jacobian = estimate_jacobian
        self.down = AntiAliasInterpolation2d(3, scale_factor)
        self.predictor = Hourglass(block_expansion, in_features=3,
                                   num_blocks=num_blocks, max_features=max_features)
        self.heatmap_head = nn.Conv2d(self.predictor.out_filters, num_keypoints,
                                      kernel_size=7, padding=3)
        if estimate_jacobian:
            self.jacobian_head = nn.Conv2d(self.predictor.out_filters, 4 * num_keypoints,
                                           kernel_size=7, padding=3)
            # start from identity Jacobians
            self.jacobian_head.weight.data.zero_()
            self.jacobian_head.bias.data.copy_(
                torch.tensor([1.0, 0.0, 0.0, 1.0] * num_keypoints))
        else:
            self.jacobian_head = None

    def forward(self, image):
        feat = self.predictor(self.down(image))
        logits = self.heatmap_head(feat)
        if not torch.isfinite(logits).all():
            raise FloatingPointError("keypoint detector produced non-finite output")
        b, k, h, w = logits.shape
        heatmap = F.softmax(logits.view(b, k, -1) / self.temperature, dim=2)
        heatmap = heatmap.view(b, k, h, w)

        grid = make_coordinate_grid(h, w, dtype=image.dtype, device=image.device)
        positions = (heatmap.unsqueeze(-1) * grid.view(1, 1, h, w, 2)).sum(dim=(2, 3))

        if self.jacobian_head is not None:
            jac_map = self.jacobian_head(feat).view(b, k, 4, h, w)
            jacobians = (heatmap.unsqueeze(2) * jac_map).sum(dim=(3, 4))
            jacobians = jacobians.view(b, k, 2, 2)
        else:
            jacobians = torch.eye(2, dtype=image.dtype, device=image.device)
            jacobians = jacobians.view(1, 1, 2, 2).repeat(b, k, 1, 1)
        return KeypointSet(positions, jacobians)


class DenseMotionNetwork(nn.Module):
    """Mask/occlusion network over heatmap differences and sparsely warped
    copies of the downscaled source image."""

    def __init__(self, num_keypoints=15, block_expansion=16, num_blocks=3,
                 max_features=64, scale_factor=0.25, kp_variance=0.01,
                 jacobian_eps=1e-4):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.kp_variance = kp_variance
        self.jacobian_eps = jacobian_eps
        self.down = AntiAliasInterpolation2d(3, scale_factor)
        in_features = (num_keypoints + 1) * 4  # heatmap + RGB per flow candidate
        self.hourglass = Hourglass(block_expansion, in_features=in_features,
                                   num_blocks=num_blocks, max_features=max_features)
        self.mask_head = nn.Conv2d(self.hourglass.out_filters, num_keypoints + 1,
                                   kernel_size=7, padding=3)
        self.occlusion_head = nn.Conv2d(self.hourglass.out_filters, 1,
                                        kernel_size=7, padding=3)

    def heatmap_difference(self, kp_source, kp_driving, spatial_size):
        gauss_d = kp2gaussian(kp_driving.positions, spatial_size, self.kp_variance)
        gauss_s = kp2gaussian(kp_source.positions, spatial_size, self.kp_variance)
        diff = gauss_d - gauss_s
        background = torch.zeros_like(diff[:, :1])
        return torch.cat([background, diff], dim=1)

    def forward(self, source_image, kp_source, kp_driving):
        source = self.down(source_image)
        b, c, h, w = source.shape
        grid = make_coordinate_grid(h, w, dtype=source.dtype, device=source.device)

        flows = sparse_motion(kp_source, kp_driving, grid, eps=self.jacobian_eps)
        heatmaps = self.heatmap_difference(kp_source, kp_driving, (h, w))

        identity = grid.view(1, 1, h, w, 2).expand(b, 1, h, w, 2)
        candidates = torch.cat([identity, flows], dim=1)  # (B, K+1, H, W, 2)
        deformed = F.grid_sample(
            source.unsqueeze(1).expand(b, self.num_keypoints + 1, c, h, w).reshape(-1, c, h, w),
            candidates.reshape(-1, h, w, 2),
            mode="bilinear", padding_mode="border", align_corners=True)
        deformed = deformed.view(b, self.num_keypoints + 1, c, h, w)

        net_in = torch.cat([heatmaps.unsqueeze(2), deformed], dim=2)
        net_in = net_in.view(b, -1, h, w)
        pred = self.hourglass(net_in)

        masks = F.softmax(self.mask_head(pred), dim=1)
        occlusion = torch.sigmoid(self.occlusion_head(pred))
        flow = compose_dense_flow(masks, flows, grid)
        return {"masks": masks, "flow": flow, "occlusion": occlusion,
                "sparse_flows": flows}


def equivariance_loss(image, detector, transform, keypoints=None):
    """Keypoint/Jacobian consistency under a known coordinate transform.

    The transformed image is image composed with the transform, so a
    consistent detector satisfies T(kp(T(image))) == kp(image) and
    J(image) == T'(kp') J(T(image)). Both discrepancies are L1-averaged
    and summed with equal weight. Pass precomputed `keypoints` for the
    untransformed image to skip one detector pass.
    """
    kp = keypoints if keypoints is not None else detector(image)
    transformed = transform.transform_image(image)
    kp_t = detector(transformed)

    recovered = transform.warp_coordinates(kp_t.positions)
    position_term = (kp.positions - recovered).abs().mean()

    local_jac = transform.jacobian(kp_t.positions)
    composed = torch.matmul(local_jac, kp_t.jacobians)
    jacobian_term = (kp.jacobians - composed).abs().mean()
    return position_term + jacobian_term

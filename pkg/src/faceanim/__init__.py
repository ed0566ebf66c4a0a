"""Desk-scale one-shot face animation.

Pipeline: self-supervised keypoints with local Jacobians drive a dense
backward motion field that warps source features; the warped features are
lifted into per-pixel density/color samples and volume-rendered; a shallow
spatially-adaptive decoder emits the final frame. Training is adversarial
against a weighted ensemble of RGB / depth / normal discriminators, where
the geometry maps come from a frozen differentiable extractor.
"""

__version__ = "0.1.0"

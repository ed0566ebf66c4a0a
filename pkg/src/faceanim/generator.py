"""Generator assembly: source encoding, motion warping, volume rendering,
and the spatially-adaptive decoder."""

from torch import nn

from .blocks import DownBlock2d, SameBlock2d
from .motion import DenseMotionNetwork, KeypointDetector, warp_features
from .rendering import RenderDecoder, VolumeRenderer
from .seeding import derive_seed, seeded_init


class SourceEncoder(nn.Module):
    """Source image to feature grid at 1/4 resolution."""

    def __init__(self, expansion=8):
        super().__init__()
        self.blocks = nn.Sequential(
            SameBlock2d(3, expansion, kernel_size=7, padding=3),
            DownBlock2d(expansion, 2 * expansion),
            DownBlock2d(2 * expansion, 4 * expansion),
        )
        self.out_channels = 4 * expansion

    def forward(self, image):
        return self.blocks(image)


class FaceGenerator(nn.Module):
    """source image + (source, driving) keypoints -> animated frame.

    Each submodule is initialized under its own seed derived from
    (seed, component tag), so builds with different discriminator
    rosters still start from identical generator weights.
    """

    def __init__(self, config, seed=0):
        super().__init__()
        with seeded_init(derive_seed(seed, "keypoints")):
            self.keypoints = KeypointDetector(
                num_keypoints=config.num_keypoints,
                block_expansion=config.block_expansion,
                num_blocks=config.num_blocks,
                max_features=config.max_features,
                temperature=config.heatmap_temperature,
                estimate_jacobian=not config.freeze_jacobians)
        with seeded_init(derive_seed(seed, "encoder")):
            self.encoder = SourceEncoder(config.encoder_expansion)
        with seeded_init(derive_seed(seed, "dense_motion")):
            self.dense_motion = DenseMotionNetwork(
                num_keypoints=config.num_keypoints,
                block_expansion=config.block_expansion,
                num_blocks=config.num_blocks,
                max_features=config.max_features,
                kp_variance=config.kp_variance,
                jacobian_eps=config.jacobian_eps)
        with seeded_init(derive_seed(seed, "volume")):
            self.volume = VolumeRenderer(
                in_channels=self.encoder.out_channels,
                depth_samples=config.ray_samples,
                color_channels=config.color_channels,
                hidden=config.mlp_hidden)
        with seeded_init(derive_seed(seed, "decoder")):
            self.decoder = RenderDecoder(
                feature_channels=self.encoder.out_channels,
                color_channels=config.color_channels,
                num_up_blocks=2)

    def forward(self, source, kp_source, kp_driving):
        features = self.encoder(source)
        motion = self.dense_motion(source, kp_source, kp_driving)
        warped = warp_features(features, motion["flow"], motion["occlusion"])
        rendered, density = self.volume(warped)
        prediction = self.decoder(rendered, features)
        return {
            "prediction": prediction,
            "flow": motion["flow"],
            "occlusion": motion["occlusion"],
            "masks": motion["masks"],
            "warped": warped,
            "density": density,
        }

import torch

from faceanim.config import TrainConfig
from faceanim.generator import FaceGenerator

from helpers import module_bytes


def tiny_config():
    return TrainConfig(image_size=64, block_expansion=8, max_features=32,
                       encoder_expansion=4, ray_samples=4, color_channels=8,
                       mlp_hidden=16, num_keypoints=5)


def test_forward_shapes_and_ranges():
    gen = FaceGenerator(tiny_config(), seed=0)
    g = torch.Generator().manual_seed(1)
    source = torch.rand(2, 3, 64, 64, generator=g)
    driving = torch.rand(2, 3, 64, 64, generator=g)
    kp_s, kp_d = gen.keypoints(source), gen.keypoints(driving)
    out = gen(source, kp_s, kp_d)
    assert out["prediction"].shape == (2, 3, 64, 64)
    assert out["prediction"].min() >= 0 and out["prediction"].max() <= 1
    assert out["flow"].shape == (2, 16, 16, 2)
    assert out["occlusion"].shape == (2, 1, 16, 16)
    assert out["masks"].shape == (2, 6, 16, 16)
    assert out["density"].shape == (2, 256, 4)


def test_seeded_construction_is_reproducible():
    a = FaceGenerator(tiny_config(), seed=9)
    b = FaceGenerator(tiny_config(), seed=9)
    assert module_bytes(a) == module_bytes(b)
    c = FaceGenerator(tiny_config(), seed=10)
    assert module_bytes(a) != module_bytes(c)


def test_end_to_end_bit_reproducible():
    def run():
        gen = FaceGenerator(tiny_config(), seed=3)
        g = torch.Generator().manual_seed(4)
        source = torch.rand(1, 3, 64, 64, generator=g)
        driving = torch.rand(1, 3, 64, 64, generator=g)
        kp_s, kp_d = gen.keypoints(source), gen.keypoints(driving)
        return gen(source, kp_s, kp_d)["prediction"].detach().numpy().tobytes()

    assert run() == run()

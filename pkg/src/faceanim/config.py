"""Training configuration and the flat key=value config-file format.

Files are TOML-style flat assignments, one `key = value` per line with
`#` comments; strings may be quoted. Command-line flags override file
values. Every run echoes its resolved config next to its artifacts so
the run can be reproduced from the echo alone.
"""

from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # data / schedule
    image_size: int = 64
    batch_size: int = 4
    total_steps: int = 20000
    seed: int = 0
    # optimizer, shared by every module
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    # discriminator ensemble weights over (rgb, depth, normal)
    lambda_rgb: float = 0.5
    lambda_depth: float = 0.25
    lambda_normal: float = 0.25
    gan_loss: str = "vanilla"  # or "lsgan"
    # loss term weights
    w_perceptual: float = 10.0
    w_gan: float = 1.0
    w_equivariance: float = 10.0
    # geometry
    geometry_backend: str = "baseline"  # baseline | oracle | external
    geometry_weights: str = ""
    pixel_spacing: float = 1.0
    # motion
    num_keypoints: int = 15
    jacobian_eps: float = 1e-4
    freeze_jacobians: bool = False
    heatmap_temperature: float = 0.1
    kp_variance: float = 0.01
    equivariance_tps_points: int = 5
    equivariance_scale_jitter: float = 0.15
    equivariance_rotation_deg: float = 15.0
    equivariance_tps_std: float = 0.005
    # architecture (desk-scale defaults)
    block_expansion: int = 16
    num_blocks: int = 3
    max_features: int = 64
    encoder_expansion: int = 8
    ray_samples: int = 16
    color_channels: int = 16
    mlp_hidden: int = 64
    disc_base: int = 16
    disc_blocks: int = 4
    discriminators: str = "rgb,depth,normal"

    @property
    def ensemble_weights(self):
        return (self.lambda_rgb, self.lambda_depth, self.lambda_normal)

    @property
    def member_names(self):
        return tuple(n.strip() for n in self.discriminators.split(",") if n.strip())

    @property
    def member_weights(self):
        by_name = {"rgb": self.lambda_rgb, "depth": self.lambda_depth,
                   "normal": self.lambda_normal}
        return tuple(by_name[n] for n in self.member_names)

    @property
    def feature_size(self):
        return self.image_size // 4

    def validate(self):
        if self.image_size not in (64, 128, 256):
            raise ConfigError(f"image_size must be 64, 128 or 256, got {self.image_size}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        lam = self.member_weights
        if any(v < 0 for v in lam) or abs(sum(lam) - 1.0) > 1e-9:
            raise ConfigError(f"discriminator weights must lie on the simplex, "
                              f"got {lam} (sum {sum(lam):g})")
        if min(self.w_perceptual, self.w_gan, self.w_equivariance) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.geometry_backend not in ("baseline", "oracle", "external"):
            raise ConfigError(f"unknown geometry backend {self.geometry_backend!r}")
        if self.gan_loss not in ("vanilla", "lsgan"):
            raise ConfigError(f"unknown gan loss {self.gan_loss!r}")
        if not self.member_names:
            raise ConfigError("at least one discriminator member required")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(name, text):
    kind = _FIELD_TYPES[name]
    text = text.strip()
    if text and text[0] in "\"'" and text[-1] == text[0]:
        text = text[1:-1]
    if kind == "bool" or kind is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean {name} = {text!r}")
    if kind == "int" or kind is int:
        return int(text)
    if kind == "float" or kind is float:
        return float(text)
    return text


def read_config_file(path):
    """Parse a flat key=value file into a TrainConfig."""
    cfg = TrainConfig()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, value))
    return cfg


def format_config(cfg, extras=None):
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = f'"{value}"'
        else:
            text = repr(value)
        lines.append(f"{f.name} = {text}")
    for key, value in (extras or {}).items():
        text = f'"{value}"' if isinstance(value, str) else repr(value)
        lines.append(f"# {key} = {text}")
    return "\n".join(lines) + "\n"


def write_config_echo(cfg, out_dir, extras=None, name="config_echo.cfg"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(format_config(cfg, extras))
    return path


def config_to_dict(cfg):
    return asdict(cfg)


def config_from_dict(payload):
    cfg = TrainConfig()
    for key, value in payload.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r} in checkpoint")
        setattr(cfg, key, value)
    return cfg

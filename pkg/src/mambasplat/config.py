"""Flat key=value configuration with documented defaults.

Defaults are the desk-scale setup (64x64 images, 1024 splats, 4 blocks of
width 128). ``paper_scale()`` records the full-scale hyperparameters for
reference; running it on a desktop is not claimed. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class Config:
    # model
    resolution: int = 64
    patch_size: int = 8
    token_channels: int = 64        # C of the image tokens
    n_gaussians: int = 1024         # N, fixed token count
    depth: int = 4                  # stacked conditional blocks
    d_model: int = 128              # block hidden width
    embed_dim: int = 512            # splat-token embedding width (lifted to d_model)
    state_size: int = 16            # SSM state per channel
    conv_width: int = 4
    expand: int = 2                 # D_inner = expand * d_model
    camera_embed_hidden: int = 64
    position_bins: int = 32         # K bins per axis for the position head
    max_scale: float = 0.5
    decoder_layers: int = 10
    decoder_hidden: int = 64
    # optimization
    lr: float = 1e-4
    lr_schedule: str = "constant"   # "constant" or "cosine" (decay over `steps`)
    lr_warmup_steps: int = 0
    lr_min_factor: float = 0.0      # cosine floor as a fraction of lr
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    lambda_mask: float = 0.01
    lambda_lpips: float = 0.1
    lambda_dist: float = 1.0
    dist_warmup_steps: int = 1000
    steps: int = 2000
    batch_size: int = 1
    views_per_step: int = 6         # supervision views sampled per object per step
    train_views: int = 48           # size of the training-view pool (of views_per_object)
    checkpoint_every: int = 500
    log_every: int = 25
    seed: int = 0
    # data / cameras
    views_per_object: int = 48
    focal_factor: float = 0.625     # focal length = factor * image width
    camera_distance: float = 2.0
    near_plane: float = 0.1
    ray_angles: int = 360
    # paths
    dataset_dir: str = "dataset"
    run_dir: str = "runs/default"

    def __post_init__(self):
        if self.resolution % self.patch_size != 0:
            raise ConfigError(
                f"resolution {self.resolution} not divisible by patch_size {self.patch_size}")
        if self.train_views > self.views_per_object:
            raise ConfigError("train_views cannot exceed views_per_object")
        if self.views_per_step > self.train_views:
            raise ConfigError("views_per_step cannot exceed train_views")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")

    @classmethod
    def paper_scale(cls) -> "Config":
        """Full-scale hyperparameters, recorded for reference."""
        return cls(resolution=512, patch_size=16, token_channels=768,
                   n_gaussians=16384, depth=10, d_model=1024, embed_dim=512,
                   steps=100000, batch_size=256)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f.type for f in dataclasses.fields(Config)}


def _coerce(key: str, value: str):
    typ = _FIELDS[key]
    try:
        if typ == "int" or typ is int:
            return int(value)
        if typ == "float" or typ is float:
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from None


def from_dict(values: dict) -> Config:
    kwargs = {}
    for key, value in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, str(value)) if isinstance(value, str) else value
    return Config(**kwargs)


def load_config(path) -> Config:
    """Parse a flat key=value file ('#' comments and blank lines allowed)."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"{path}: line {lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, value)
    return Config(**values)


def save_config(path, cfg: Config) -> None:
    with open(path, "w") as f:
        for key, value in cfg.to_dict().items():
            f.write(f"{key} = {value}\n")

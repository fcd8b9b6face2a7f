"""Dataclass configs with YAML round-tripping and dotted-key overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import yaml

VARIANTS = ("conv", "split_posh", "pga", "progressive_pga")
DIRECTIONS = ("forward", "bidirectional")


class ConfigError(Exception):
    pass


@dataclass
class ModelConfig:
    image_h: int = 64
    image_w: int = 64
    in_channels: int = 3
    backbone_channels: int = 32
    patch: int = 1
    dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    ffn_mult: int = 2
    window: int = 4
    t_max: int = 8
    n_max: int = 6
    head_hidden: int = 64
    score_thresh: float = 0.3
    sigma: float = 1.5
    variant: str = "progressive_pga"
    direction: str = "forward"
    use_ta: bool = True
    use_wpsa: bool = True
    use_wssa: bool = True
    detach_pose: bool = False
    num_vertices: int = 602
    template_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if min(self.image_h, self.image_w, self.dim, self.heads, self.window) < 1:
            raise ConfigError("geometry fields must be positive")

    @property
    def stride(self):
        # backbone strides 2, 2, 1 then patch grouping
        return 4 * self.patch

    @property
    def grid(self):
        s = self.stride
        if self.image_h % s or self.image_w % s:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by total stride {s}"
            )
        return self.image_h // s, self.image_w // s

    @property
    def num_tokens(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def progressive(self):
        return self.variant == "progressive_pga"


@dataclass
class TrainConfig:
    steps: int = 300
    lr: float = 1e-3
    # linear decay to lr * lr_final_factor over the run; 1.0 keeps lr fixed
    lr_final_factor: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    num_frames: int = 4
    n_persons: int = 2
    num_clips: int = 1
    motion_amplitude: float = 1.0
    early_stop_loss: float = 0.0
    log_every: int = 10
    w_pose: float = 160.0
    w_mesh: float = 1.0
    w_j: float = 360.0
    w_p: float = 1.6

    def __post_init__(self):
        if self.steps < 0 or self.lr <= 0 or self.grad_clip < 0:
            raise ConfigError("steps must be >= 0, lr > 0, grad_clip >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0 < self.lr_final_factor <= 1:
            raise ConfigError("lr_final_factor must lie in (0, 1]")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _to_dict(cfg):
    return dataclasses.asdict(cfg)


def _from_dict(cls, data):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def load_config(path=None, overrides=()):
    """Build a RunConfig from an optional YAML file plus dotted-key override
    strings like ``model.dim=32`` or ``train.lr=5e-4``."""
    data = {}
    if path is not None:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-mapping value")
        node[parts[-1]] = yaml.safe_load(raw)
    model = _from_dict(ModelConfig, data.get("model"))
    train = _from_dict(TrainConfig, data.get("train"))
    extra = set(data) - {"model", "train"}
    if extra:
        raise ConfigError(f"unknown top-level config sections: {sorted(extra)}")
    return RunConfig(model=model, train=train)


def save_config(cfg: RunConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump({"model": _to_dict(cfg.model), "train": _to_dict(cfg.train)}, f, sort_keys=False)

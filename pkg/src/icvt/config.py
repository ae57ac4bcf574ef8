"""Model and training configuration, with dotted-path overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

# variant name -> (fusion, geometry embedding, key positional encoding)
VARIANTS = {
    "baseline": ("none", None, True),
    "baseline-no-pe": ("none", None, False),
    "adding-learned": ("adding", "learned", True),
    "adding-sine": ("adding", "sine", True),
    "concat-learned": ("concat", "learned", True),
    "concat-sine": ("concat", "sine", True),
    "manual": ("manual", None, True),
}
FUSION_MODES = ("none", "adding", "concat", "manual")


@dataclass
class ModelConfig:
    image_height: int = 128
    image_width: int = 96
    patch_size: int = 16
    d_vision: int = 192
    vision_layers: int = 4
    vision_heads: int = 4
    adapter_layers: int = 1
    d_attr: int = 32
    d_z: int = 32
    n_layers: int = 4
    n_heads: int = 8
    d_ff: int = 512
    dropout: float = 0.1
    vision_dropout: float = 0.0
    n_bins: int = 128
    max_elements: int = 20
    variant: str = "concat-sine"
    prior: str = "standard_normal"
    coord_mode: str = "discrete"
    relation_hidden: int = 64
    relation_eps: float = 1e-3
    decoder_pos_embedding: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.prior not in ("standard_normal", "learned"):
            raise ValueError(f"unknown prior {self.prior!r}")
        if self.coord_mode not in ("discrete", "continuous"):
            raise ValueError(f"unknown coord_mode {self.coord_mode!r}")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("image size must be divisible by the patch size")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def d_model(self) -> int:
        return 5 * self.d_attr

    @property
    def fusion(self) -> str:
        return VARIANTS[self.variant][0]

    @property
    def geometry_embedding(self) -> str | None:
        return VARIANTS[self.variant][1]

    @property
    def key_pos_encoding(self) -> bool:
        return VARIANTS[self.variant][2]

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: str = ""
    out_dir: str = "runs/icvt"
    batch_size: int = 32
    lr: float = 5e-4
    backbone_lr: float = 1e-4
    weight_decay: float = 1e-2
    cycle_iters: int = 2000
    num_cycles: int = 2
    beta_low: float = 0.001
    beta_high: float = 0.3
    grad_clip: float = 1.0
    flip: bool = True
    color_jitter: bool = True
    checkpoint_every: int = 1000
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.backbone_lr > self.lr:
            raise ValueError("backbone_lr must not exceed lr")

    @property
    def total_iters(self) -> int:
        return self.cycle_iters * self.num_cycles

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        return cls(model=model, **d)

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(text: str, current: Any) -> Any:
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` overrides with dotted paths to a nested dict."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise KeyError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = _coerce(value.strip(), node[parts[-1]])
    return d


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> TrainConfig:
    base = TrainConfig().to_dict()
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        base = _merge(base, user)
    return TrainConfig.from_dict(apply_overrides(base, list(overrides)))


def _merge(base: dict, user: dict) -> dict:
    out = dict(base)
    for k, v in user.items():
        if k not in base:
            raise KeyError(f"unknown config key {k!r}")
        out[k] = _merge(base[k], v) if isinstance(base[k], dict) and isinstance(v, dict) else v
    return out

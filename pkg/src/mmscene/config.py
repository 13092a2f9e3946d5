"""Architecture configuration and parameter-dictionary helpers."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, fields, replace

import numpy as np

from .tensor import RngStream

STRATEGIES = ("complete", "stacking", "attention_only", "weighted_only", "alignment_only")
CLASS_NAMES = ("red_tide", "marine_debris", "animal_stranding", "ship_fire", "ship_capsize")

# stream-id namespace for parameter initialisation
INIT_STREAM_BASE = 0x1_0000_0000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 8
    d_img: int = 32
    img_blocks: int = 2
    img_heads: int = 2
    window: int = 2
    vocab: int = 64
    max_len: int = 16
    d_text: int = 32
    text_layers: int = 2
    text_heads: int = 2
    pad_id: int = 63
    vec_in: int = 5
    vec_hidden: int = 16
    d: int = 100
    head_hidden: int = 50
    n_classes: int = 5
    strategy: str = "complete"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.strategy!r}")
        if self.image_size % self.patch:
            raise ConfigError("image size must be divisible by the patch size")
        if self.grid % self.window:
            raise ConfigError("patch grid side must be divisible by the window side")
        if self.d_img % self.img_heads or self.d_text % self.text_heads:
            raise ConfigError("encoder widths must be divisible by the head count")
        if not 0 <= self.pad_id < self.vocab:
            raise ConfigError("pad id outside the vocabulary")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def shifts(self) -> list[int]:
        # alternate regular / shifted windows
        return [0 if i % 2 == 0 else self.window // 2 for i in range(self.img_blocks)]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = type(f.default)(d[f.name])
        return cls(**kw)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def tiny_config(**kw) -> ModelConfig:
    """Reduced widths for gradient checks: N=4 patches, L=4 tokens, d=8."""
    base = dict(image_size=4, patch=2, d_img=8, d_text=8, max_len=4, vocab=8, pad_id=7,
                d=8, vec_hidden=4, head_hidden=4)
    base.update(kw)
    return ModelConfig(**base)


class sub:
    """Read-only view of ``params`` under ``prefix`` with the prefix stripped."""

    __slots__ = ("params", "prefix")

    def __init__(self, params, prefix: str):
        self.params = params
        self.prefix = prefix

    def __getitem__(self, key):
        return self.params[self.prefix + key]


def add_prefixed(grads: dict, prefix: str, g: dict):
    for k, v in g.items():
        if v is None:
            continue
        key = prefix + k
        if key in grads:
            grads[key] = grads[key] + v
        else:
            grads[key] = v


def uniform_init(seed: int, name: str, shape, fan_in: int) -> np.ndarray:
    rng = RngStream(seed, INIT_STREAM_BASE + zlib.crc32(name.encode()))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamBuilder:
    """Collects initialised parameters under hierarchical names."""

    def __init__(self, seed: int):
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}

    def linear(self, name, d_in, d_out, bias=True):
        self.params[name + ".w"] = uniform_init(self.seed, name + ".w", (d_in, d_out), d_in)
        if bias:
            self.params[name + ".b"] = np.zeros(d_out)

    def weight(self, name, d_in, d_out):
        self.params[name] = uniform_init(self.seed, name, (d_in, d_out), d_in)

    def norm(self, name, dim):
        self.params[name + ".g"] = np.ones(dim)
        self.params[name + ".b"] = np.zeros(dim)

    def const(self, name, value):
        self.params[name] = np.array(value, dtype=np.float64)

    def uniform(self, name, shape, fan_in):
        self.params[name] = uniform_init(self.seed, name, shape, fan_in)

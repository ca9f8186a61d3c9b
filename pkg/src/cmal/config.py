"""Model and training configuration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

TASKS = ("AMC", "MLM", "MRM", "ITM", "VTC")
DEFAULT_GAMMA = (0.4, 0.2, 0.2, 0.1, 0.1)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_v: int = 64
    hidden: int = 64
    ffn: int = 256
    uni_heads: int = 1
    heads: int = 4
    layers: int = 4
    max_len: int = 128
    vocab_size: int = 0
    num_tags: int = 0
    activation: str = "gelu"
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def validate(self) -> None:
        if self.hidden % self.heads or self.hidden % self.uni_heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}/{self.uni_heads}")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.vocab_size <= 0 or self.num_tags <= 0:
            raise ConfigError("vocab_size and num_tags must be set from the corpus")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 500
    seed: int = 0
    batch_size: int = 8
    gamma: tuple[float, ...] = DEFAULT_GAMMA
    mix: str = "sample"
    swap_prob: float = 0.6
    mask_prob: float = 0.15
    tau: float = 0.07
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (VTC and ITM negatives need a partner)")
        if self.mix not in ("sample", "weighted"):
            raise ConfigError(f"unknown mix mode {self.mix!r}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        check_gamma(self.gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["gamma"] = list(self.gamma)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "gamma" in d:
            d["gamma"] = tuple(d["gamma"])
        return cls(model=model, **d)


def check_gamma(gamma) -> tuple[float, ...]:
    g = tuple(float(x) for x in gamma)
    if len(g) != len(TASKS):
        raise ConfigError(f"gamma needs {len(TASKS)} entries, got {len(g)}")
    if any(x < 0 for x in g):
        raise ConfigError("gamma entries must be >= 0")
    if abs(sum(g) - 1.0) > 1e-9:
        raise ConfigError(f"gamma must sum to 1, got {sum(g)}")
    return g

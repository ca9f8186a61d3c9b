"""Parameter registry and initialization for the full model."""

from __future__ import annotations

import numpy as np

from . import cmai, cmap, umse
from .config import ModelConfig
from .engine import DiffArray, parameter


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for part in (umse, cmap, cmai):
        shapes.update(part.param_shapes(cfg))
    return dict(sorted(shapes.items()))


def truncated_normal(rng: np.random.Generator, shape, std: float, limit: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within ``limit`` std."""
    out = rng.normal(size=shape)
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.normal(size=int(bad.sum()))
        bad = np.abs(out) > limit
    return out * std


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, DiffArray]:
    """Weights and embeddings ~ truncated normal, biases 0, norm gains 1."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            value = np.zeros(shape)
        elif name.endswith(".g"):
            value = np.ones(shape)
        else:
            value = truncated_normal(rng, shape, cfg.init_std)
        params[name] = parameter(value, name)
    return params


def param_count(params: dict[str, DiffArray]) -> int:
    return sum(p.size for p in params.values())

"""Interaction backbone over hybrid sequences, plus the prediction heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .cmap import HybridSequence
from .config import ModelConfig
from .engine import DiffArray
from .layers import activation, layer_norm, layer_shapes, linear, segment_bias, transformer_layer


@dataclass
class InteractionOutput:
    all_states: DiffArray
    cls_state: DiffArray
    anchor_visual_state: DiffArray | None
    anchor_textual_state: DiffArray | None
    anchor_slots: tuple[int, int] | None
    attention: list


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H = cfg.hidden
    shapes = {}
    for layer in range(cfg.layers):
        shapes.update(layer_shapes(f"cmai.{layer}", H, cfg.ffn))
    shapes.update(
        {
            "cmai.ln_f.g": (H,),
            "cmai.ln_f.b": (H,),
            "head.word.fc1.w": (H, cfg.ffn),
            "head.word.fc1.b": (cfg.ffn,),
            "head.word.fc2.w": (cfg.ffn, cfg.vocab_size),
            "head.word.fc2.b": (cfg.vocab_size,),
            "head.region.w": (H, cfg.num_tags),
            "head.region.b": (cfg.num_tags,),
            "head.itm.w": (H, 1),
            "head.itm.b": (1,),
        }
    )
    return shapes


def interact_rows(states: DiffArray, segments: np.ndarray, params: dict, cfg: ModelConfig, attention=None) -> DiffArray:
    """L pre-norm layers over packed sequences, then a final layer norm."""
    bias = segment_bias(segments)
    x = states
    for layer in range(cfg.layers):
        x = transformer_layer(x, params, f"cmai.{layer}", cfg.heads, bias, cfg.activation, cfg.ln_eps, attention)
    return layer_norm(x, params, "cmai.ln_f", cfg.ln_eps)


def interact(hybrid: HybridSequence, params: dict, cfg: ModelConfig) -> InteractionOutput:
    attention: list = []
    seq = hybrid.states.shape[0]
    out = interact_rows(hybrid.states, np.zeros(seq, dtype=int), params, cfg, attention)
    slots = hybrid.anchor_slots
    av = at = None
    if slots is not None:
        av = E.take_rows(out, [slots[0]])
        at = E.take_rows(out, [slots[1]])
    return InteractionOutput(out, E.take_rows(out, [0]), av, at, slots, attention)


def predict_word(states: DiffArray, params: dict, cfg: ModelConfig) -> DiffArray:
    """Vocabulary logits from a two-layer MLP, one row per state."""
    h = activation(linear(states, params, "head.word.fc1"), cfg.activation)
    return linear(h, params, "head.word.fc2")


def predict_region(states: DiffArray, params: dict) -> DiffArray:
    """Object-class logits from a single affine layer."""
    return linear(states, params, "head.region")


def itm_logit(cls_states: DiffArray, params: dict) -> DiffArray:
    return linear(cls_states, params, "head.itm")


def itm_score(cls_states: DiffArray, params: dict) -> DiffArray:
    return E.sigmoid(itm_logit(cls_states, params))


def vtc_similarity(img: DiffArray, txt: DiffArray, eps: float = 1e-8) -> DiffArray:
    """Cosine similarity of every image summary with every text summary."""
    return E.matmul(E.l2_normalize_rows(img, eps), E.transpose(E.l2_normalize_rows(txt, eps)))

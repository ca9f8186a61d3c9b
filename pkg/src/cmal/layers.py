"""Shared building blocks: affine maps and the pre-norm transformer layer."""

from __future__ import annotations

import math

import numpy as np

from . import engine as E
from .engine import DiffArray

NEG_INF = -1e30


def linear(x: DiffArray, params: dict, prefix: str) -> DiffArray:
    return E.matmul(x, params[prefix + ".w"]) + params[prefix + ".b"]


def activation(x: DiffArray, kind: str) -> DiffArray:
    return E.gelu(x) if kind == "gelu" else E.relu(x)


def layer_norm(x: DiffArray, params: dict, prefix: str, eps: float) -> DiffArray:
    return E.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"], eps)


def segment_bias(segments: np.ndarray) -> np.ndarray:
    """Additive attention mask keeping each row inside its own sequence."""
    s = np.asarray(segments)
    return np.where(s[:, None] == s[None, :], 0.0, NEG_INF)


def self_attention(h: DiffArray, params: dict, prefix: str, heads: int, bias: np.ndarray, probs_out=None) -> DiffArray:
    q = linear(h, params, prefix + ".q")
    k = linear(h, params, prefix + ".k")
    v = linear(h, params, prefix + ".v")
    width = h.shape[1]
    dh = width // heads
    mask = E.constant(bias)
    outs = []
    for hd in range(heads):
        lo, hi = hd * dh, (hd + 1) * dh
        qh, kh, vh = E.take_cols(q, lo, hi), E.take_cols(k, lo, hi), E.take_cols(v, lo, hi)
        scores = E.matmul(qh, E.transpose(kh)) * (1.0 / math.sqrt(dh)) + mask
        p = E.softmax_rows(scores)
        if probs_out is not None:
            probs_out.append(p.value)
        outs.append(E.matmul(p, vh))
    o = outs[0] if heads == 1 else E.concat_cols(outs)
    return linear(o, params, prefix + ".o")


def transformer_layer(
    x: DiffArray,
    params: dict,
    prefix: str,
    heads: int,
    bias: np.ndarray,
    act: str = "gelu",
    eps: float = 1e-5,
    probs_out=None,
) -> DiffArray:
    """Pre-norm block: ``x + attn(LN(x))`` then ``x + ffn(LN(x))``."""
    h = layer_norm(x, params, prefix + ".ln1", eps)
    x = x + self_attention(h, params, prefix + ".attn", heads, bias, probs_out)
    h = layer_norm(x, params, prefix + ".ln2", eps)
    h = activation(linear(h, params, prefix + ".ffn1"), act)
    return x + linear(h, params, prefix + ".ffn2")


def layer_shapes(prefix: str, hidden: int, ffn: int) -> dict[str, tuple[int, ...]]:
    shapes = {
        prefix + ".ln1.g": (hidden,),
        prefix + ".ln1.b": (hidden,),
        prefix + ".ln2.g": (hidden,),
        prefix + ".ln2.b": (hidden,),
        prefix + ".ffn1.w": (hidden, ffn),
        prefix + ".ffn1.b": (ffn,),
        prefix + ".ffn2.w": (ffn, hidden),
        prefix + ".ffn2.b": (hidden,),
    }
    for part in "qkvo":
        shapes[f"{prefix}.attn.{part}.w"] = (hidden, hidden)
        shapes[f"{prefix}.attn.{part}.b"] = (hidden,)
    return shapes

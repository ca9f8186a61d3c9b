"""
Uni-modal semantic encoders: a single transformer layer per modality.

Visual rows are ``FC(concat(features, location7))``; textual rows are
``FC(concat(word_emb, pos_emb))``. Each sequence gets its learned summary
token ([IMG] / [TXT]) prepended at slot 0.

Batches are packed row-wise with a block-diagonal attention mask, so one
forward pass covers every pair without padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine as E
from .config import ModelConfig
from .corpus import CaptionRecord, RegionRecord
from .engine import DiffArray, DimensionError
from .layers import layer_shapes, linear, segment_bias, transformer_layer

LOC_DIM = 7


def location_vector(box) -> np.ndarray:
    x1, y1, x2, y2 = (float(v) for v in box)
    w, h = x2 - x1, y2 - y1
    return np.array([x1, y1, x2, y2, w, h, w * h])


@dataclass
class EncoderState:
    hidden: DiffArray  # (seq, H), slot 0 is the summary token
    summary: DiffArray  # (1, H)

    @property
    def tokens(self) -> DiffArray:
        """Per-item states without the summary slot."""
        return E.take_rows(self.hidden, np.arange(1, self.hidden.shape[0]))


@dataclass
class EncodedBatch:
    rows: DiffArray  # all sequences stacked
    starts: np.ndarray  # row of each sequence's summary slot
    lengths: np.ndarray  # sequence lengths including the summary slot
    attention: list

    def state(self, p: int) -> EncoderState:
        lo = int(self.starts[p])
        hidden = E.take_rows(self.rows, np.arange(lo, lo + int(self.lengths[p])))
        return EncoderState(hidden, E.take_rows(self.rows, [lo]))

    def summaries(self) -> DiffArray:
        return E.take_rows(self.rows, self.starts)

    def item_rows(self, p: int) -> np.ndarray:
        lo = int(self.starts[p])
        return np.arange(lo + 1, lo + int(self.lengths[p]))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H = cfg.hidden
    shapes = {
        "vis.fc.w": (cfg.d_v + LOC_DIM, H),
        "vis.fc.b": (H,),
        "vis.img": (1, H),
        "txt.word": (cfg.vocab_size, H),
        "txt.pos": (cfg.max_len, H),
        "txt.fc.w": (2 * H, H),
        "txt.fc.b": (H,),
        "txt.txt": (1, H),
    }
    shapes.update(layer_shapes("vis.layer", H, cfg.ffn))
    shapes.update(layer_shapes("txt.layer", H, cfg.ffn))
    return shapes


def _prepend_and_encode(items: DiffArray, counts: Sequence[int], token: DiffArray, params, cfg: ModelConfig, prefix: str) -> EncodedBatch:
    pool = E.concat_rows([token, items])
    idx, seg, starts = [], [], []
    offset = 0
    for p, c in enumerate(counts):
        starts.append(len(idx))
        idx.append(0)
        idx.extend(range(1 + offset, 1 + offset + c))
        seg.extend([p] * (c + 1))
        offset += c
    x = E.take_rows(pool, idx)
    probs: list = []
    out = transformer_layer(
        x, params, prefix, cfg.uni_heads, segment_bias(np.array(seg)), cfg.activation, cfg.ln_eps, probs
    )
    return EncodedBatch(out, np.array(starts), np.array(counts) + 1, probs)


def visual_inputs(region_lists: Sequence[Sequence[RegionRecord]], d_v: int, zero_mask=None) -> np.ndarray:
    """Stack ``concat(features, location)`` for every region of every pair.

    ``zero_mask`` (one bool list per pair) zeroes selected feature vectors
    while keeping their location.
    """
    rows = []
    for p, regions in enumerate(region_lists):
        for i, r in enumerate(regions):
            if r.features.size != d_v:
                raise DimensionError(f"region feature length {r.features.size} != d_v {d_v}")
            feats = r.features
            if zero_mask is not None and zero_mask[p][i]:
                feats = np.zeros_like(feats)
            rows.append(np.concatenate([feats, location_vector(r.box)]))
    return np.array(rows).reshape(-1, d_v + LOC_DIM)


def embed_visual(regions: Sequence[RegionRecord], params: dict, cfg: ModelConfig) -> DiffArray:
    """Location-aware region embeddings, shape (m, H)."""
    return linear(E.constant(visual_inputs([regions], cfg.d_v)), params, "vis.fc")


def encode_visual(V: DiffArray, params: dict, cfg: ModelConfig) -> EncoderState:
    if V.shape[0] < 1:
        raise DimensionError("encode_visual needs at least one region")
    return _prepend_and_encode(V, [V.shape[0]], params["vis.img"], params, cfg, "vis.layer").state(0)


def encode_visual_batch(region_lists, params: dict, cfg: ModelConfig, zero_mask=None) -> EncodedBatch:
    X = E.constant(visual_inputs(region_lists, cfg.d_v, zero_mask))
    V = linear(X, params, "vis.fc")
    return _prepend_and_encode(V, [len(r) for r in region_lists], params["vis.img"], params, cfg, "vis.layer")


def embed_textual(token_lists: Sequence[Sequence[int]], params: dict, cfg: ModelConfig) -> DiffArray:
    """Position-aware word embeddings for all captions, stacked."""
    ids, pos = [], []
    for toks in token_lists:
        if len(toks) > cfg.max_len:
            raise DimensionError(f"caption length {len(toks)} exceeds max_len {cfg.max_len}")
        for j, t in enumerate(toks):
            if not 0 <= t < cfg.vocab_size:
                raise IndexError(f"token index {t} outside vocabulary of {cfg.vocab_size}")
            ids.append(t)
            pos.append(j)
    words = E.take_rows(params["txt.word"], ids)
    positions = E.take_rows(params["txt.pos"], pos)
    return linear(E.concat_cols([words, positions]), params, "txt.fc")


def encode_textual_batch(token_lists, params: dict, cfg: ModelConfig) -> EncodedBatch:
    W = embed_textual(token_lists, params, cfg)
    return _prepend_and_encode(W, [len(t) for t in token_lists], params["txt.txt"], params, cfg, "txt.layer")


def encode_textual(caption: CaptionRecord | Sequence[int], params: dict, cfg: ModelConfig) -> EncoderState:
    toks = caption.tokens if isinstance(caption, CaptionRecord) else list(caption)
    if len(toks) < 1:
        raise DimensionError("encode_textual needs at least one token")
    return encode_textual_batch([toks], params, cfg).state(0)

"""
Cross-modal associative prompts.

A prompt replaces one anchor's visual slot and textual slot with the learned
[mask] embedding; filling then swaps in the other modality's state. The
hybrid sequence is laid out as::

    slot 0          [CLS]
    slots 1..m      visual states
    slot m+1        [SEP]
    slots m+2..m+n+1 textual states

and every slot is projected as ``LN(FC(feature) + FC(pos) + FC(type))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import engine as E
from .anchors import AnchorPoint
from .config import ModelConfig
from .engine import ContractError, DiffArray
from .layers import linear

TYPE_CLS, TYPE_VISUAL, TYPE_TEXTUAL, TYPE_SEP = range(4)
MODALITY_NAMES = ("cls", "visual", "textual", "sep")

NATIVE = "native"
MASKED = "masked"
FROM_TEXT = "swapped_from_text"
FROM_IMAGE = "swapped_from_image"

PLAIN, MASK, SWAP = "plain", "masked", "swapped"


class SlotMeta(NamedTuple):
    position: int
    modality: str  # host slot kind
    origin: str
    type_id: int  # type embedding actually used


@dataclass
class Prompt:
    visual: DiffArray  # (m, H)
    textual: DiffArray  # (n, H)
    anchor: AnchorPoint | None
    swapped: bool = False
    visual_origin: list[str] = field(default_factory=list)
    textual_origin: list[str] = field(default_factory=list)


@dataclass
class HybridSequence:
    states: DiffArray  # (m+n+2, H)
    slot_meta: list[SlotMeta]
    anchor: AnchorPoint | None
    swapped: bool
    m: int
    n: int

    @property
    def anchor_slots(self) -> tuple[int, int] | None:
        if self.anchor is None:
            return None
        return self.anchor.region_idx + 1, self.m + 2 + self.anchor.token_idx


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H = cfg.hidden
    return {
        "cmap.cls": (1, H),
        "cmap.sep": (1, H),
        "cmap.mask": (1, H),
        "cmap.pos": (cfg.max_len, H),
        "cmap.type": (4, H),
        "cmap.feat.w": (H, H),
        "cmap.feat.b": (H,),
        "cmap.posfc.w": (H, H),
        "cmap.posfc.b": (H,),
        "cmap.typefc.w": (H, H),
        "cmap.typefc.b": (H,),
        "cmap.ln.g": (H,),
        "cmap.ln.b": (H,),
    }


def _check_anchor(m: int, n: int, anchor: AnchorPoint):
    if not (0 <= anchor.region_idx < m and 0 <= anchor.token_idx < n):
        raise ContractError(f"anchor {tuple(anchor)} out of range for m={m}, n={n}")


def plain_prompt(hv: DiffArray, ht: DiffArray) -> Prompt:
    return Prompt(hv, ht, None, False, [NATIVE] * hv.shape[0], [NATIVE] * ht.shape[0])


def mask_anchor(hv: DiffArray, ht: DiffArray, anchor: AnchorPoint, mask_emb: DiffArray) -> Prompt:
    """Replace visual slot ``i`` and textual slot ``j`` with ``mask_emb``."""
    m, n = hv.shape[0], ht.shape[0]
    _check_anchor(m, n, anchor)
    i, j = anchor.region_idx, anchor.token_idx
    vis = E.take_rows(E.concat_rows([hv, mask_emb]), [m if k == i else k for k in range(m)])
    txt = E.take_rows(E.concat_rows([ht, mask_emb]), [n if k == j else k for k in range(n)])
    vo = [MASKED if k == i else NATIVE for k in range(m)]
    to = [MASKED if k == j else NATIVE for k in range(n)]
    return Prompt(vis, txt, anchor, False, vo, to)


def fill_swap(
    prompt: Prompt, hv: DiffArray, ht: DiffArray, anchor: AnchorPoint, swap_draw: float, swap_prob: float = 0.6
) -> Prompt:
    """With ``swap_draw < swap_prob`` put ``ht[j]`` into the visual anchor slot
    and ``hv[i]`` into the textual one; otherwise return the prompt as is."""
    if prompt.anchor is None or tuple(prompt.anchor[:2]) != tuple(anchor[:2]):
        raise ContractError(f"prompt anchor {prompt.anchor} does not match {tuple(anchor)}")
    if not swap_draw < swap_prob:
        return prompt
    m, n = prompt.visual.shape[0], prompt.textual.shape[0]
    i, j = anchor.region_idx, anchor.token_idx
    vis = E.take_rows(E.concat_rows([prompt.visual, ht]), [m + j if k == i else k for k in range(m)])
    txt = E.take_rows(E.concat_rows([prompt.textual, hv]), [n + i if k == j else k for k in range(n)])
    vo = list(prompt.visual_origin)
    to = list(prompt.textual_origin)
    vo[i], to[j] = FROM_TEXT, FROM_IMAGE
    return replace(prompt, visual=vis, textual=txt, swapped=True, visual_origin=vo, textual_origin=to)


def exchange_anchor_slots(prompt: Prompt) -> Prompt:
    """Trade the contents of the two anchor slots; an involution."""
    if prompt.anchor is None:
        raise ContractError("prompt has no anchor")
    m, n = prompt.visual.shape[0], prompt.textual.shape[0]
    i, j = prompt.anchor.region_idx, prompt.anchor.token_idx
    vis = E.take_rows(E.concat_rows([prompt.visual, prompt.textual]), [m + j if k == i else k for k in range(m)])
    txt = E.take_rows(E.concat_rows([prompt.textual, prompt.visual]), [n + i if k == j else k for k in range(n)])
    vo, to = list(prompt.visual_origin), list(prompt.textual_origin)
    flip = {NATIVE: FROM_TEXT, FROM_TEXT: NATIVE, MASKED: MASKED, FROM_IMAGE: NATIVE}
    flop = {NATIVE: FROM_IMAGE, FROM_IMAGE: NATIVE, MASKED: MASKED, FROM_TEXT: NATIVE}
    vo[i], to[j] = flip[vo[i]], flop[to[j]]
    swapped = vo[i] == FROM_TEXT
    return replace(prompt, visual=vis, textual=txt, swapped=swapped, visual_origin=vo, textual_origin=to)


def _type_for(host: int, origin: str) -> int:
    # a swapped-in feature carries its source modality's type
    if origin == FROM_TEXT:
        return TYPE_TEXTUAL
    if origin == FROM_IMAGE:
        return TYPE_VISUAL
    return host


def layout(m: int, n: int, visual_origin: Sequence[str], textual_origin: Sequence[str]) -> list[SlotMeta]:
    metas = [SlotMeta(0, "cls", NATIVE, TYPE_CLS)]
    for k in range(m):
        metas.append(SlotMeta(1 + k, "visual", visual_origin[k], _type_for(TYPE_VISUAL, visual_origin[k])))
    metas.append(SlotMeta(m + 1, "sep", NATIVE, TYPE_SEP))
    for k in range(n):
        metas.append(SlotMeta(m + 2 + k, "textual", textual_origin[k], _type_for(TYPE_TEXTUAL, textual_origin[k])))
    return metas


def integrate_rows(features: DiffArray, positions, type_ids, params: dict, cfg: ModelConfig) -> DiffArray:
    """``LN(FC_f(features) + FC_p(pos_emb[positions]) + FC_t(type_emb[types]))``, row-wise."""
    positions = np.asarray(positions)
    if positions.size and positions.max() >= cfg.max_len:
        raise ContractError(f"hybrid length {positions.max() + 1} exceeds max_len {cfg.max_len}")
    f = linear(features, params, "cmap.feat")
    p = linear(E.take_rows(params["cmap.pos"], positions), params, "cmap.posfc")
    t = linear(E.take_rows(params["cmap.type"], type_ids), params, "cmap.typefc")
    return E.layer_norm(f + p + t, params["cmap.ln.g"], params["cmap.ln.b"], cfg.ln_eps)


def integrate(prompt: Prompt, params: dict, cfg: ModelConfig) -> HybridSequence:
    m, n = prompt.visual.shape[0], prompt.textual.shape[0]
    metas = layout(m, n, prompt.visual_origin, prompt.textual_origin)
    rows = E.concat_rows([params["cmap.cls"], prompt.visual, params["cmap.sep"], prompt.textual])
    states = integrate_rows(rows, [s.position for s in metas], [s.type_id for s in metas], params, cfg)
    return HybridSequence(states, metas, prompt.anchor, prompt.swapped, m, n)


# -----------------------------------------------------------------------------
# batched construction
# -----------------------------------------------------------------------------


@dataclass
class PromptSpec:
    """What to build for one pair: anchor (or None) and mode plain/masked/swapped."""

    anchor: AnchorPoint | None = None
    mode: str = PLAIN


@dataclass
class HybridBatch:
    states: DiffArray
    segments: np.ndarray
    starts: np.ndarray
    metas: list[list[SlotMeta]]
    specs: list[PromptSpec]

    def anchor_rows(self, p: int) -> tuple[int, int]:
        a = self.specs[p].anchor
        m = sum(1 for s in self.metas[p] if s.modality == "visual")
        lo = int(self.starts[p])
        return lo + a.region_idx + 1, lo + m + 2 + a.token_idx

    def slot_row(self, p: int, slot: int) -> int:
        return int(self.starts[p]) + slot


def build_hybrid_batch(vis, txt, specs: Sequence[PromptSpec], params: dict, cfg: ModelConfig) -> HybridBatch:
    """Gather every pair's prompt from the packed encoder outputs and integrate.

    ``vis`` / ``txt`` are :class:`~cmal.umse.EncodedBatch` objects with one
    sequence per PromptSpec. Summary slots of the encoders are not part of the
    hybrid sequence.
    """
    n_vis = vis.rows.shape[0]
    n_txt = txt.rows.shape[0]
    pool = E.concat_rows([vis.rows, txt.rows, params["cmap.cls"], params["cmap.sep"], params["cmap.mask"]])
    cls_row, sep_row, mask_row = n_vis + n_txt, n_vis + n_txt + 1, n_vis + n_txt + 2

    idx, pos, types, seg, starts, metas = [], [], [], [], [], []
    for p, spec in enumerate(specs):
        vrows = list(vis.item_rows(p))
        trows = [n_vis + r for r in txt.item_rows(p)]
        m, n = len(vrows), len(trows)
        vo, to = [NATIVE] * m, [NATIVE] * n
        if spec.mode != PLAIN:
            if spec.anchor is None:
                raise ContractError(f"mode {spec.mode!r} needs an anchor")
            _check_anchor(m, n, spec.anchor)
            i, j = spec.anchor.region_idx, spec.anchor.token_idx
            if spec.mode == MASK:
                vrows[i], trows[j] = mask_row, mask_row
                vo[i], to[j] = MASKED, MASKED
            elif spec.mode == SWAP:
                vrows[i], trows[j] = trows[j], vrows[i]
                vo[i], to[j] = FROM_TEXT, FROM_IMAGE
            else:
                raise ContractError(f"unknown prompt mode {spec.mode!r}")
        meta = layout(m, n, vo, to)
        starts.append(len(idx))
        idx.extend([cls_row] + vrows + [sep_row] + trows)
        pos.extend(s.position for s in meta)
        types.extend(s.type_id for s in meta)
        seg.extend([p] * len(meta))
        metas.append(meta)

    states = integrate_rows(E.take_rows(pool, idx), pos, types, params, cfg)
    return HybridBatch(states, np.array(seg), np.array(starts), metas, list(specs))

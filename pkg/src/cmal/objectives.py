"""
The five pre-training objectives and the task scheduler.

Batches are planned first (:func:`plan_batch`) from an explicit random
generator, producing an immutable :class:`TaskBatch`; losses are then pure
functions of ``(params, examples, batch)``. This keeps every random choice
(anchor, swap draw, masking, negatives) fixed while a loss is re-evaluated,
e.g. by a finite-difference check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine as E
from .anchors import AnchorPoint, AnchorSet
from .cmai import interact_rows, itm_logit, predict_region, predict_word, vtc_similarity
from .cmap import MASK, PLAIN, SWAP, PromptSpec, build_hybrid_batch
from .config import TASKS, ConfigError, ModelConfig, check_gamma
from .corpus import MASK_ID, NUM_RESERVED, UNK_ID, PairRecord
from .engine import ContractError, DiffArray
from .umse import encode_textual_batch, encode_visual_batch

BLOCK = 10


@dataclass
class Example:
    pair: PairRecord
    anchors: AnchorSet


@dataclass(frozen=True)
class TaskBatch:
    task: str
    indices: tuple[int, ...]
    anchors: tuple = ()
    swap_draws: tuple = ()
    swapped: tuple = ()
    tokens: tuple = ()  # MLM: modified token lists
    selected: tuple = ()  # MLM/MRM: per-pair selected positions
    buckets: tuple = ()  # MLM: per-position "mask"/"random"/"keep"
    captions: tuple = ()  # ITM: caption source index per pair
    labels: tuple = ()  # ITM


@dataclass
class LossReport:
    task: str
    loss: DiffArray
    objective: DiffArray
    acc: float = float("nan")
    batch_size: int = 0
    weight: float = 1.0
    extra: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.loss.item()


# -----------------------------------------------------------------------------
# scheduling
# -----------------------------------------------------------------------------


def block_counts(gamma: Sequence[float], block: int = BLOCK) -> list[int]:
    """Per-task step counts in a block: ``block * gamma`` rounded by largest remainder."""
    g = check_gamma(gamma)
    raw = [block * x for x in g]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    short = block - sum(counts)
    order = sorted(range(len(g)), key=lambda t: (-(raw[t] - counts[t]), t))
    for t in order[:short]:
        counts[t] += 1
    return counts


def schedule_tasks(step: int, gamma: Sequence[float], seed: int) -> str:
    """Task for a training step: each block of 10 steps holds exactly the
    rounded gamma proportions, shuffled by a seeded permutation."""
    counts = block_counts(gamma)
    tasks = [t for t, c in zip(TASKS, counts) for _ in range(c)]
    block = step // BLOCK
    perm = np.random.default_rng([seed, block, 0x5C4E]).permutation(len(tasks))
    return tasks[int(perm[step % BLOCK])]


# -----------------------------------------------------------------------------
# batch planning
# -----------------------------------------------------------------------------


def selection_count(eligible: int, prob: float = 0.15) -> int:
    """Round-half-up share of eligible positions, at least one when any exist."""
    if eligible <= 0:
        return 0
    return max(1, int(math.floor(prob * eligible + 0.5)))


def mask_plan_tokens(tokens: Sequence[int], excluded: set[int], rng: np.random.Generator, vocab_size: int, prob: float = 0.15):
    """Choose MLM positions and their corruption.

    Returns ``(new_tokens, positions, buckets)``. Of the selected positions
    80% become [MASK], 10% a random non-special word and 10% stay unchanged.
    """
    eligible = [j for j in range(len(tokens)) if j not in excluded and tokens[j] >= UNK_ID]
    k = selection_count(len(eligible), prob)
    positions = sorted(int(x) for x in rng.choice(eligible, size=k, replace=False)) if k else []
    new = list(tokens)
    buckets = []
    for j in positions:
        u = rng.random()
        if u < 0.8:
            new[j] = MASK_ID
            buckets.append("mask")
        elif u < 0.9:
            new[j] = int(rng.integers(NUM_RESERVED, vocab_size)) if vocab_size > NUM_RESERVED else new[j]
            buckets.append("random")
        else:
            buckets.append("keep")
    return new, positions, buckets


def mask_plan_regions(m: int, excluded: set[int], rng: np.random.Generator, prob: float = 0.15) -> list[int]:
    eligible = [i for i in range(m) if i not in excluded]
    k = selection_count(len(eligible), prob)
    return sorted(int(x) for x in rng.choice(eligible, size=k, replace=False)) if k else []


def eligible_indices(task: str, examples: Sequence[Example]) -> list[int]:
    if task == "AMC":
        return [k for k, ex in enumerate(examples) if len(ex.anchors)]
    return list(range(len(examples)))


def plan_batch(
    task: str,
    examples: Sequence[Example],
    rng: np.random.Generator,
    batch_size: int,
    vocab_size: int,
    swap_prob: float = 0.6,
    mask_prob: float = 0.15,
    indices: Sequence[int] | None = None,
) -> TaskBatch:
    if indices is None:
        pool = eligible_indices(task, examples)
        if not pool:
            raise ContractError(f"no examples eligible for task {task}")
        size = min(batch_size, len(pool))
        indices = [pool[int(k)] for k in rng.choice(len(pool), size=size, replace=False)]
    indices = tuple(int(k) for k in indices)

    if task == "AMC":
        anchors, draws = [], []
        for k in indices:
            found = examples[k].anchors
            if not len(found):
                raise ContractError(f"pair {examples[k].pair.pair_id} has no anchors")
            anchors.append(found[int(rng.integers(len(found)))])
            draws.append(float(rng.random()))
        swapped = tuple(d < swap_prob for d in draws)
        return TaskBatch(task, indices, anchors=tuple(anchors), swap_draws=tuple(draws), swapped=swapped)

    if task == "MLM":
        toks, sel, bks = [], [], []
        for k in indices:
            ex = examples[k]
            excluded = {a.token_idx for a in ex.anchors}
            new, pos, b = mask_plan_tokens(ex.pair.caption.tokens, excluded, rng, vocab_size, mask_prob)
            toks.append(tuple(new))
            sel.append(tuple(pos))
            bks.append(tuple(b))
        return TaskBatch(task, indices, tokens=tuple(toks), selected=tuple(sel), buckets=tuple(bks))

    if task == "MRM":
        sel = []
        for k in indices:
            ex = examples[k]
            excluded = {a.region_idx for a in ex.anchors}
            sel.append(tuple(mask_plan_regions(ex.pair.m, excluded, rng, mask_prob)))
        return TaskBatch(task, indices, selected=tuple(sel))

    if task == "ITM":
        B = len(indices)
        if B < 2:
            raise ContractError("ITM negatives need at least two pairs in the batch")
        negatives = set(int(x) for x in rng.permutation(B)[: B // 2])
        captions, labels = [], []
        for b in range(B):
            if b in negatives:
                other = int(rng.integers(B - 1))
                other += other >= b
                captions.append(indices[other])
                labels.append(0)
            else:
                captions.append(indices[b])
                labels.append(1)
        return TaskBatch(task, indices, captions=tuple(captions), labels=tuple(labels))

    if task == "VTC":
        if len(indices) < 2:
            raise ContractError("VTC needs at least two pairs")
        return TaskBatch(task, indices)

    raise ConfigError(f"unknown task {task!r}")


# -----------------------------------------------------------------------------
# losses
# -----------------------------------------------------------------------------


def _accuracy(logits: DiffArray, targets) -> float:
    if logits.shape[0] == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits.value, axis=1) == np.asarray(targets)))


def amc_from_states(
    vis_anchor: DiffArray, txt_anchor: DiffArray, word_targets, class_targets, params: dict, cfg: ModelConfig
) -> tuple[DiffArray, DiffArray, DiffArray, float]:
    """Word recovery from the visual anchor slot plus region-class recovery
    from the textual anchor slot. Returns ``(L_AMC, L_TXT, L_IMG, acc)``."""
    wl = predict_word(vis_anchor, params, cfg)
    rl = predict_region(txt_anchor, params)
    l_txt = E.cross_entropy_logits(wl, word_targets)
    l_img = E.cross_entropy_logits(rl, class_targets)
    acc = 0.5 * (_accuracy(wl, word_targets) + _accuracy(rl, class_targets))
    return l_txt + l_img, l_txt, l_img, acc


def _forward_hybrid(params, cfg, region_lists, token_lists, specs, zero_mask=None):
    vis = encode_visual_batch(region_lists, params, cfg, zero_mask)
    txt = encode_textual_batch(token_lists, params, cfg)
    hybrid = build_hybrid_batch(vis, txt, specs, params, cfg)
    out = interact_rows(hybrid.states, hybrid.segments, params, cfg)
    return hybrid, out


def loss_amc(params: dict, cfg: ModelConfig, examples: Sequence[Example], batch: TaskBatch, swapped_only: bool = False) -> LossReport:
    """Associative mapping classification.

    Swapped prompts supply ``L_AMC``; prompts whose draw fell outside the swap
    probability keep both anchor slots masked and are trained to predict the
    word at the textual slot and the class at the visual slot. The step
    objective averages both kinds over the batch, the reported loss is
    ``L_AMC`` alone.
    """
    if swapped_only and not all(batch.swapped):
        raise ContractError("loss_amc received an unswapped prompt")
    pairs = [examples[k].pair for k in batch.indices]
    specs = [PromptSpec(a, SWAP if s else MASK) for a, s in zip(batch.anchors, batch.swapped)]
    hybrid, out = _forward_hybrid(params, cfg, [p.regions for p in pairs], [p.caption.tokens for p in pairs], specs)

    word_t = [p.caption.tokens[a.token_idx] for p, a in zip(pairs, batch.anchors)]
    class_t = [p.regions[a.region_idx].top_tag for p, a in zip(pairs, batch.anchors)]
    rows = [hybrid.anchor_rows(b) for b in range(len(pairs))]
    sw = [b for b, s in enumerate(batch.swapped) if s]
    un = [b for b, s in enumerate(batch.swapped) if not s]
    B = len(pairs)

    parts = []
    report_loss = E.constant(np.array(float("nan")))
    acc = float("nan")
    extra = {"swapped": len(sw)}
    if sw:
        va = E.take_rows(out, [rows[b][0] for b in sw])
        ta = E.take_rows(out, [rows[b][1] for b in sw])
        l_amc, l_txt, l_img, acc = amc_from_states(
            va, ta, [word_t[b] for b in sw], [class_t[b] for b in sw], params, cfg
        )
        parts.append(l_amc * (len(sw) / B))
        report_loss = l_amc
        extra.update(l_txt=l_txt.item(), l_img=l_img.item())
    if un:
        # masked anchors: word from the textual slot, class from the visual slot
        ta = E.take_rows(out, [rows[b][1] for b in un])
        va = E.take_rows(out, [rows[b][0] for b in un])
        l_mask, _, _, _ = amc_from_states(ta, va, [word_t[b] for b in un], [class_t[b] for b in un], params, cfg)
        parts.append(l_mask * (len(un) / B))
        extra["l_masked_anchor"] = l_mask.item()
    objective = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return LossReport("AMC", report_loss, objective, acc, B, extra=extra)


def loss_mlm(params: dict, cfg: ModelConfig, examples: Sequence[Example], batch: TaskBatch) -> LossReport:
    pairs = [examples[k].pair for k in batch.indices]
    specs = [PromptSpec() for _ in pairs]
    hybrid, out = _forward_hybrid(params, cfg, [p.regions for p in pairs], [list(t) for t in batch.tokens], specs)
    rows, targets = [], []
    for b, (p, sel) in enumerate(zip(pairs, batch.selected)):
        for j in sel:
            rows.append(hybrid.slot_row(b, p.m + 2 + j))
            targets.append(p.caption.tokens[j])
    if not rows:
        zero = E.constant(np.array(0.0))
        return LossReport("MLM", zero, zero, float("nan"), len(pairs), weight=0.0)
    logits = predict_word(E.take_rows(out, rows), params, cfg)
    loss = E.cross_entropy_logits(logits, targets)
    return LossReport("MLM", loss, loss, _accuracy(logits, targets), len(pairs), extra={"positions": len(rows)})


def loss_mrm(params: dict, cfg: ModelConfig, examples: Sequence[Example], batch: TaskBatch) -> LossReport:
    pairs = [examples[k].pair for k in batch.indices]
    zero_mask = [[i in sel for i in range(p.m)] for p, sel in zip(pairs, batch.selected)]
    specs = [PromptSpec() for _ in pairs]
    hybrid, out = _forward_hybrid(
        params, cfg, [p.regions for p in pairs], [p.caption.tokens for p in pairs], specs, zero_mask
    )
    rows, targets = [], []
    for b, (p, sel) in enumerate(zip(pairs, batch.selected)):
        for i in sel:
            rows.append(hybrid.slot_row(b, 1 + i))
            targets.append(p.regions[i].top_tag)
    if not rows:
        zero = E.constant(np.array(0.0))
        return LossReport("MRM", zero, zero, float("nan"), len(pairs), weight=0.0)
    logits = predict_region(E.take_rows(out, rows), params)
    loss = E.cross_entropy_logits(logits, targets)
    return LossReport("MRM", loss, loss, _accuracy(logits, targets), len(pairs), extra={"positions": len(rows)})


def loss_itm(params: dict, cfg: ModelConfig, examples: Sequence[Example], batch: TaskBatch) -> LossReport:
    regions = [examples[k].pair.regions for k in batch.indices]
    tokens = [examples[k].pair.caption.tokens for k in batch.captions]
    specs = [PromptSpec() for _ in regions]
    hybrid, out = _forward_hybrid(params, cfg, regions, tokens, specs)
    logits = itm_logit(E.take_rows(out, hybrid.starts), params)
    loss = E.bce_with_logits(logits, batch.labels)
    acc = float(np.mean((logits.value.reshape(-1) > 0) == (np.asarray(batch.labels) == 1)))
    return LossReport("ITM", loss, loss, acc, len(regions))


def vtc_loss_from_summaries(img: DiffArray, txt: DiffArray, tau: float) -> DiffArray:
    """Symmetric InfoNCE over cosine similarities, averaged over 2N terms."""
    N = img.shape[0]
    if N < 2:
        raise ContractError("VTC needs N >= 2")
    if tau <= 0:
        raise ContractError("tau must be positive")
    S = vtc_similarity(img, txt) * (1.0 / tau)
    diag = np.arange(N)
    v2t = E.cross_entropy_logits(S, diag)
    t2v = E.cross_entropy_logits(E.transpose(S), diag)
    return (v2t + t2v) * 0.5


def loss_vtc(params: dict, cfg: ModelConfig, examples: Sequence[Example], batch: TaskBatch, tau: float) -> LossReport:
    pairs = [examples[k].pair for k in batch.indices]
    vis = encode_visual_batch([p.regions for p in pairs], params, cfg)
    txt = encode_textual_batch([p.caption.tokens for p in pairs], params, cfg)
    img_s, txt_s = vis.summaries(), txt.summaries()
    loss = vtc_loss_from_summaries(img_s, txt_s, tau)
    S = vtc_similarity(img_s, txt_s).value
    acc = float(np.mean(np.argmax(S, axis=1) == np.arange(len(pairs))))
    return LossReport("VTC", loss, loss, acc, len(pairs))


def compute_loss(task: str, params: dict, cfg: ModelConfig, examples, batch: TaskBatch, tau: float = 0.07) -> LossReport:
    if task == "AMC":
        return loss_amc(params, cfg, examples, batch)
    if task == "MLM":
        return loss_mlm(params, cfg, examples, batch)
    if task == "MRM":
        return loss_mrm(params, cfg, examples, batch)
    if task == "ITM":
        return loss_itm(params, cfg, examples, batch)
    if task == "VTC":
        return loss_vtc(params, cfg, examples, batch, tau)
    raise ConfigError(f"unknown task {task!r}")

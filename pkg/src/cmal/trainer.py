"""
AdamW training loop, checkpoints, evaluation probes and the ablation runner.

Every step draws its randomness from ``default_rng([seed, step, 1])``, so the
whole trajectory is a function of (config, corpus, seed) and a run resumed
from any checkpoint continues bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import engine as E
from .anchors import detect_anchors
from .cmai import interact_rows, predict_region, predict_word, vtc_similarity
from .cmap import PLAIN, SWAP, PromptSpec, build_hybrid_batch
from .config import DEFAULT_GAMMA, TASKS, ConfigError, ModelConfig, TrainConfig, check_gamma
from .engine import ContractError, DiffArray
from .model import init_params, param_shapes
from .objectives import Example, LossReport, compute_loss, plan_batch, schedule_tasks
from .umse import encode_textual_batch, encode_visual_batch

MAGIC = b"CMALCKPT"
VERSION = 1


class NumericError(FloatingPointError):
    pass


class CheckpointError(ContractError):
    pass


# -----------------------------------------------------------------------------
# optimizer
# -----------------------------------------------------------------------------


@dataclass
class Moments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, DiffArray]) -> "Moments":
        return cls({k: np.zeros_like(p.value) for k, p in params.items()}, {k: np.zeros_like(p.value) for k, p in params.items()})


def adamw_step(params: dict[str, DiffArray], grads: dict[str, np.ndarray] | None, moments: Moments, cfg: TrainConfig, step: int | None = None) -> Moments:
    """One AdamW update in place; decay is decoupled from the moments.

    ``grads`` defaults to each parameter's ``.grad``. ``step`` is the 1-based
    update count used for bias correction (``moments.t + 1`` if omitted).
    """
    t = moments.t + 1 if step is None else int(step)
    b1, b2 = cfg.betas
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name in sorted(params):
        p = params[name]
        g = p.grad if grads is None else grads[name]
        if g is None:
            g = np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name}")
        m = moments.m[name]
        v = moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p.value
        p.value -= cfg.lr * update
    moments.t = t
    return moments


# -----------------------------------------------------------------------------
# state and checkpoints
# -----------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    params: dict[str, DiffArray]
    moments: Moments
    step: int = 0
    vocab: list[str] = field(default_factory=list)
    tags: list[str] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: TrainConfig, vocab=(), tags=()) -> "TrainState":
        params = init_params(cfg.model, cfg.seed)
        return cls(cfg, params, Moments.zeros_like(params), 0, list(vocab), list(tags))


def checkpoint_bytes(state: TrainState) -> bytes:
    names = sorted(state.params)
    header = {
        "config": state.config.to_dict(),
        "config_hash": state.config.model.digest(),
        "step": state.step,
        "adam_t": state.moments.t,
        "rng": {"seed": state.config.seed, "step": state.step},
        "vocab": state.vocab,
        "tags": state.tags,
        "arrays": [[n, list(state.params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob]
    for group in ([state.params[n].value for n in names], [state.moments.m[n] for n in names], [state.moments.v[n] for n in names]):
        for a in group:
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, state: TrainState) -> str:
    data = checkpoint_bytes(state)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, expected: ModelConfig | None = None) -> TrainState:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen].decode())
    cfg = TrainConfig.from_dict(header["config"])
    if cfg.model.digest() != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash does not match its config")
    if expected is not None and expected.digest() != header["config_hash"]:
        raise CheckpointError(f"{path}: model config {header['config_hash']} differs from expected {expected.digest()}")
    shapes = param_shapes(cfg.model)
    arrays = {n: tuple(s) for n, s in header["arrays"]}
    if arrays != shapes:
        raise CheckpointError(f"{path}: parameter set does not match the config")
    offset = 20 + hlen
    groups = []
    for _ in range(3):
        group = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            a = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
            group[name] = a
            offset += 8 * count
        groups.append(group)
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    params = {n: E.parameter(groups[0][n].copy(), n) for n in groups[0]}
    moments = Moments(groups[1], groups[2], header["adam_t"])
    return TrainState(cfg, params, moments, header["step"], header["vocab"], header["tags"])


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -----------------------------------------------------------------------------
# training loop
# -----------------------------------------------------------------------------


def prepare_examples(pairs, thesaurus, catalog) -> list[Example]:
    return [Example(p, detect_anchors(p, thesaurus, catalog)) for p in pairs]


def check_startup(examples: Sequence[Example], cfg: TrainConfig) -> None:
    if not examples:
        raise ConfigError("corpus is empty")
    gamma = check_gamma(cfg.gamma)
    if gamma[0] > 0 and not any(len(ex.anchors) for ex in examples):
        raise ConfigError("AMC weight is positive but the corpus has zero anchor points")
    if len(examples) < 2 and (gamma[3] > 0 or gamma[4] > 0):
        raise ConfigError("ITM and VTC need at least two pairs")


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 1])


def train_step(state: TrainState, examples: Sequence[Example]) -> list[LossReport]:
    """Plan, evaluate and apply one optimizer step; returns the task reports."""
    cfg = state.config
    rng = step_rng(cfg.seed, state.step)
    if cfg.mix == "weighted":
        tasks = [(t, g) for t, g in zip(TASKS, cfg.gamma) if g > 0]
    else:
        tasks = [(schedule_tasks(state.step, cfg.gamma, cfg.seed), 1.0)]
    reports, objective = [], None
    for task, weight in tasks:
        batch = plan_batch(task, examples, rng, cfg.batch_size, cfg.model.vocab_size, cfg.swap_prob, cfg.mask_prob)
        rep = compute_loss(task, state.params, cfg.model, examples, batch, cfg.tau)
        reports.append(rep)
        if rep.weight == 0:
            continue
        if not math.isfinite(rep.objective.item()):
            raise NumericError(f"non-finite {task} loss at step {state.step}")
        term = rep.objective * weight
        objective = term if objective is None else objective + term
    if objective is not None:
        E.zero_grads(state.params.values())
        E.backward(objective)
        adamw_step(state.params, None, state.moments, cfg)
    state.step += 1
    return reports


def _fmt(x: float) -> str:
    return repr(float(x))


def pretrain(
    examples: Sequence[Example],
    state: TrainState,
    out_dir=None,
    on_step: Callable | None = None,
) -> list[tuple]:
    """Run ``state`` up to ``state.config.steps`` steps.

    With ``out_dir`` set, metrics go to ``metrics.csv`` (step,task,loss,acc),
    wall-clock to ``timing.csv`` and the final state to ``checkpoint.bin``;
    periodic checkpoints are written every ``checkpoint_every`` steps.
    Returns the metric rows produced by this call.
    """
    cfg = state.config
    cfg.validate()
    check_startup(examples, cfg)
    out = Path(out_dir) if out_dir is not None else None
    metrics_f = timing_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        resume = state.step > 0 and (out / "metrics.csv").exists()
        metrics_f = open(out / "metrics.csv", "a" if resume else "w", newline="")
        timing_f = open(out / "timing.csv", "a" if resume else "w", newline="")
        if not resume:
            metrics_f.write("step,task,loss,acc\n")
            timing_f.write("step,task,ms\n")
    rows = []
    try:
        while state.step < cfg.steps:
            step = state.step
            t0 = time.perf_counter()
            reports = train_step(state, examples)
            ms = (time.perf_counter() - t0) * 1000.0
            for rep in reports:
                loss = rep.value if rep.weight else float("nan")
                row = (step, rep.task, loss, rep.acc)
                rows.append(row)
                if metrics_f is not None:
                    metrics_f.write(f"{step},{rep.task},{_fmt(loss)},{_fmt(rep.acc)}\n")
                    timing_f.write(f"{step},{rep.task},{ms:.3f}\n")
            if on_step is not None:
                on_step(state, reports)
            k = cfg.checkpoint_every
            if out is not None and k and state.step % k == 0 and state.step < cfg.steps:
                save_checkpoint(out / f"checkpoint-{state.step:06d}.bin", state)
    finally:
        if metrics_f is not None:
            metrics_f.close()
            timing_f.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", state)
    return rows


def read_metrics(path) -> list[tuple]:
    with open(path, newline="") as f:
        return [(int(r["step"]), r["task"], float(r["loss"]), float(r["acc"])) for r in csv.DictReader(f)]


def descent_ratios(rows: Sequence[tuple], window: int = 50) -> dict[str, float]:
    """Per task: mean loss over the trailing ``window`` steps divided by the
    mean over the leading ``window`` steps (steps counted over the whole run)."""
    last = max(r[0] for r in rows)
    out = {}
    for task in TASKS:
        lead = [r[2] for r in rows if r[1] == task and r[0] < window and math.isfinite(r[2])]
        trail = [r[2] for r in rows if r[1] == task and r[0] > last - window and math.isfinite(r[2])]
        if lead and trail:
            out[task] = float(np.mean(trail) / np.mean(lead))
    return out


# -----------------------------------------------------------------------------
# probes
# -----------------------------------------------------------------------------


def _cosine_rows(a: np.ndarray, b: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    na = np.maximum(np.linalg.norm(a, axis=1), eps)
    nb = np.maximum(np.linalg.norm(b, axis=1), eps)
    return np.sum(a * b, axis=1) / (na * nb)


def retrieval_scores(S: np.ndarray, atol: float = 1e-12) -> tuple[float, float]:
    """Image-to-text accuracy with fractional credit for ties, and the tie rate."""
    N = S.shape[0]
    acc = ties = 0.0
    for i in range(N):
        top = S[i].max()
        at_top = np.abs(S[i] - top) <= atol
        count = int(at_top.sum())
        ties += count > 1
        if at_top[i]:
            acc += 1.0 / count
    return acc / N, ties / N


def summaries(params, cfg: ModelConfig, pairs) -> tuple[np.ndarray, np.ndarray]:
    vis = encode_visual_batch([p.regions for p in pairs], params, cfg)
    txt = encode_textual_batch([p.caption.tokens for p in pairs], params, cfg)
    return vis.summaries().value, txt.summaries().value


def alignment_probe(params: dict, cfg: ModelConfig, examples: Sequence[Example]) -> dict:
    """Anchor alignment, retrieval and anchor-recovery metrics on held-out pairs."""
    if not examples:
        raise ContractError("alignment probe needs a non-empty held-out set")
    anchored = [ex for ex in examples if len(ex.anchors)]
    if not anchored:
        raise ContractError("held-out pairs have no anchors")
    pairs = [ex.pair for ex in examples]

    img, txt = summaries(params, cfg, pairs)
    S = vtc_similarity(E.constant(img), E.constant(txt)).value
    retrieval, tie_rate = retrieval_scores(S)

    # every anchor of every pair: plain hybrid for alignment, forced swap for recovery
    items = [(ex, a) for ex in anchored for a in ex.anchors]
    regions = [ex.pair.regions for ex, _ in items]
    tokens = [ex.pair.caption.tokens for ex, _ in items]
    vis = encode_visual_batch(regions, params, cfg)
    tx = encode_textual_batch(tokens, params, cfg)

    plain = build_hybrid_batch(vis, tx, [PromptSpec(a, PLAIN) for _, a in items], params, cfg)
    out = interact_rows(plain.states, plain.segments, params, cfg).value
    rows = [plain.anchor_rows(k) for k in range(len(items))]
    alignment = float(np.mean(_cosine_rows(out[[r[0] for r in rows]], out[[r[1] for r in rows]])))

    swap = build_hybrid_batch(vis, tx, [PromptSpec(a, SWAP) for _, a in items], params, cfg)
    out = interact_rows(swap.states, swap.segments, params, cfg)
    rows = [swap.anchor_rows(k) for k in range(len(items))]
    wl = predict_word(E.take_rows(out, [r[0] for r in rows]), params, cfg).value
    rl = predict_region(E.take_rows(out, [r[1] for r in rows]), params).value
    word_t = np.array([ex.pair.caption.tokens[a.token_idx] for ex, a in items])
    class_t = np.array([ex.pair.regions[a.region_idx].top_tag for ex, a in items])
    word_acc = float(np.mean(wl.argmax(1) == word_t))
    class_acc = float(np.mean(rl.argmax(1) == class_t))
    return {
        "pairs": len(examples),
        "anchors": len(items),
        "alignment": alignment,
        "retrieval": retrieval,
        "tie_rate": tie_rate,
        "recovery": 0.5 * (word_acc + class_acc),
        "recovery_word": word_acc,
        "recovery_class": class_acc,
    }


def anchor_embeddings(params: dict, cfg: ModelConfig, examples: Sequence[Example]) -> list[tuple]:
    """``(pair_id, concept, modality, vector)`` for every anchor, taken from the
    plain hybrid sequence after the interaction backbone."""
    items = [(ex, a) for ex in examples for a in ex.anchors]
    if not items:
        raise ContractError("no anchors to export")
    vis = encode_visual_batch([ex.pair.regions for ex, _ in items], params, cfg)
    tx = encode_textual_batch([ex.pair.caption.tokens for ex, _ in items], params, cfg)
    hb = build_hybrid_batch(vis, tx, [PromptSpec(a, PLAIN) for _, a in items], params, cfg)
    out = interact_rows(hb.states, hb.segments, params, cfg).value
    rows = []
    for k, (ex, a) in enumerate(items):
        rv, rt = hb.anchor_rows(k)
        rows.append((ex.pair.pair_id, a.concept, "visual", out[rv]))
        rows.append((ex.pair.pair_id, a.concept, "textual", out[rt]))
    return rows


# -----------------------------------------------------------------------------
# ablation ladder
# -----------------------------------------------------------------------------

DEFAULT_LADDER = (
    ("ITM",),
    ("ITM", "MLM"),
    ("ITM", "MLM", "MRM"),
    ("ITM", "MLM", "MRM", "VTC"),
    ("ITM", "MLM", "MRM", "VTC", "AMC"),
)


def parse_ladder(text: str) -> list[tuple[str, ...]]:
    """One rung per line, tasks joined by '+'; '#' starts a comment.

    ``none`` stands for the untrained model.
    """
    rungs = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower() == "none":
            rungs.append(())
            continue
        tasks = tuple(t.strip().upper() for t in line.split("+"))
        for t in tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r} in ladder line {raw!r}")
        if len(set(tasks)) != len(tasks):
            raise ConfigError(f"duplicate task in ladder line {raw!r}")
        rungs.append(tasks)
    if not rungs:
        raise ConfigError("ladder has no rungs")
    return rungs


def rung_gamma(tasks: Sequence[str], base: Sequence[float] = DEFAULT_GAMMA) -> tuple[float, ...]:
    if not tasks:
        raise ConfigError("empty task subset")
    total = sum(g for t, g in zip(TASKS, base) if t in tasks)
    if total <= 0:
        raise ConfigError(f"subset {'+'.join(tasks)} has zero total weight")
    return tuple((g / total if t in tasks else 0.0) for t, g in zip(TASKS, base))


def rung_name(tasks: Sequence[str]) -> str:
    return "+".join(tasks) if tasks else "none"


ABLATION_FIELDS = ("rung", "steps", "retrieval", "tie_rate", "alignment", "recovery", "recovery_word", "recovery_class")


def ablation_run(
    train: Sequence[Example],
    heldout: Sequence[Example],
    ladder: Sequence[Sequence[str]],
    cfg: TrainConfig,
    base_gamma: Sequence[float] = DEFAULT_GAMMA,
) -> list[dict]:
    """Train one model per rung (shared seed, init and step budget) and probe
    each on the shared held-out set. ``()`` rungs are probed untrained."""
    table = []
    for tasks in ladder:
        tasks = tuple(tasks)
        if tasks:
            rcfg = TrainConfig.from_dict({**cfg.to_dict(), "gamma": list(rung_gamma(tasks, base_gamma))})
            steps = rcfg.steps
        else:
            rcfg = TrainConfig.from_dict({**cfg.to_dict(), "steps": 0})
            steps = 0
        state = TrainState.fresh(rcfg)
        pretrain(train, state)
        probe = alignment_probe(state.params, rcfg.model, heldout)
        row = {"rung": rung_name(tasks), "steps": steps}
        row.update({k: probe[k] for k in ABLATION_FIELDS[2:]})
        table.append(row)
    return table


def write_table(path, table: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(ABLATION_FIELDS) + "\n")
        for row in table:
            f.write(",".join(str(row[k]) if k in ("rung", "steps") else _fmt(row[k]) for k in ABLATION_FIELDS) + "\n")

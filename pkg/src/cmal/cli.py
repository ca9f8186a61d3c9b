"""
Command-line entry point.

Subcommands: synth, detect-anchors, pretrain, probe, ablate,
export-embeddings. Every output directory receives a ``manifest.json`` with
the resolved config, input digests, seed and tool version.

Exit codes: 0 success, 2 config/usage error, 3 input or state mismatch,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .anchors import corpus_anchor_stats, detect_anchors
from .config import DEFAULT_GAMMA, TASKS, ConfigError, ModelConfig, TrainConfig
from .corpus import NUM_RESERVED, CorpusError, TagCatalog, Thesaurus, Vocabulary, read_corpus, synth_corpus, write_sidecar
from .engine import ContractError
from .trainer import (
    CheckpointError,
    DEFAULT_LADDER,
    NumericError,
    TrainState,
    ablation_run,
    alignment_probe,
    anchor_embeddings,
    file_digest,
    load_checkpoint,
    parse_ladder,
    pretrain,
    prepare_examples,
    write_table,
)

log = logging.getLogger("cmal")

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_NUMERIC = 0, 2, 3, 4

MODEL_KEYS = {"d_v", "hidden", "ffn", "uni_heads", "heads", "layers", "max_len", "activation", "ln_eps", "init_std"}

# flag dest -> config key
TRAIN_FLAGS = {
    "lr": "lr",
    "weight_decay": "weight_decay",
    "steps": "steps",
    "batch_size": "batch_size",
    "gamma": "gamma",
    "mix": "mix",
    "swap_prob": "swap_prob",
    "mask_prob": "mask_prob",
    "tau": "tau",
    "checkpoint_every": "checkpoint_every",
    "hidden": "hidden",
    "ffn": "ffn",
    "heads": "heads",
    "layers": "layers",
}


# -----------------------------------------------------------------------------
# config resolution
# -----------------------------------------------------------------------------


def parse_gamma(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"bad --gamma {text!r}; expected {len(TASKS)} comma-separated numbers")


def read_config_file(path) -> dict:
    """Flat ``key = value`` pairs; model keys may also sit under ``[model]``."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    out = dict(raw.pop("model", {}))
    out.update(raw)
    return out


def resolve_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for dest, key in TRAIN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
    if args.seed is not None:
        values["seed"] = args.seed
    if isinstance(values.get("gamma"), str):
        values["gamma"] = parse_gamma(values["gamma"])
    model = {k: values.pop(k) for k in list(values) if k in MODEL_KEYS}
    values["model"] = model
    try:
        cfg = TrainConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc))
    return cfg


def write_manifest(out: Path, command: str, config: dict, inputs: dict, seed) -> None:
    manifest = {
        "subcommand": command,
        "config": config,
        "inputs": {k: file_digest(v) for k, v in sorted(inputs.items()) if v is not None},
        "seed": seed,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_inputs(corpus, tags, thesaurus, vocab: Vocabulary | None = None):
    catalog = TagCatalog.load(tags)
    thes = Thesaurus.load(thesaurus) if thesaurus else None
    pairs, vocab = read_corpus(corpus, vocab)
    if not pairs:
        raise CorpusError(f"{corpus}: no valid pairs")
    if pairs[0].regions[0].tag_scores.size != len(catalog):
        raise CorpusError(f"{corpus}: tag_scores length does not match {len(catalog)} catalog tags")
    return pairs, vocab, catalog, thes


def _split(examples, heldout: int):
    if heldout < 0 or heldout >= len(examples):
        raise ConfigError(f"--heldout {heldout} must be in [0, {len(examples)})")
    if heldout == 0:
        return list(examples), []
    return list(examples[:-heldout]), list(examples[-heldout:])


def _finish_model(cfg: TrainConfig, pairs, vocab, catalog) -> TrainConfig:
    cfg.model.vocab_size = len(vocab)
    cfg.model.num_tags = len(catalog)
    cfg.model.d_v = int(pairs[0].regions[0].features.size)
    cfg.validate()
    cfg.model.validate()
    return cfg


def _checkpoint_inputs(args):
    state = load_checkpoint(args.checkpoint)
    vocab = Vocabulary(state.vocab[NUM_RESERVED:])
    if state.vocab != vocab.words:
        raise CheckpointError("checkpoint vocabulary is malformed")
    pairs, _, catalog, thes = load_inputs(args.corpus, args.tags, args.thesaurus, vocab)
    if catalog.names != state.tags:
        raise CheckpointError("tag catalog differs from the one the checkpoint was trained with")
    expected = ModelConfig(**{**vars(state.config.model), "d_v": int(pairs[0].regions[0].features.size)})
    if expected.digest() != state.config.model.digest():
        raise CheckpointError("corpus feature width does not match the checkpoint config")
    examples = prepare_examples(pairs, thes, catalog)
    if args.heldout:
        examples = examples[-args.heldout :]
    return state, examples


# -----------------------------------------------------------------------------
# subcommands
# -----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.pairs < 0:
        raise ConfigError("--pairs must be >= 0")
    paths = synth_corpus(out, args.pairs, args.concepts, args.seed or 0, args.d_v, args.variants)
    config = {"pairs": args.pairs, "concepts": args.concepts, "d_v": args.d_v, "variants": args.variants}
    write_manifest(out, "synth", config, {}, args.seed or 0)
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_detect_anchors(args) -> int:
    out = Path(args.out)
    pairs, _, catalog, thes = load_inputs(args.corpus, args.tags, args.thesaurus)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = [(p.pair_id, detect_anchors(p, thes, catalog).as_rows()) for p in pairs]
    write_sidecar(out, rows)
    stats = corpus_anchor_stats(pairs, thes, catalog)
    stats_path = Path(args.stats) if args.stats else out.with_name("stats.json")
    stats_path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    inputs = {"corpus": args.corpus, "tags": args.tags, "thesaurus": args.thesaurus}
    write_manifest(out.parent, "detect-anchors", {}, inputs, args.seed)
    print(json.dumps({k: stats[k] for k in ("num_pairs", "meta_mappings", "coverage")}, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out = Path(args.out)
    if args.resume:
        state = load_checkpoint(args.resume)
        vocab = Vocabulary(state.vocab[NUM_RESERVED:])
        pairs, _, catalog, thes = load_inputs(args.corpus, args.tags, args.thesaurus, vocab)
        if catalog.names != state.tags:
            raise CheckpointError("tag catalog differs from the checkpoint's")
        if args.steps is not None:
            state.config.steps = args.steps
        cfg = state.config
        fresh = resolve_config(args)
        _finish_model(fresh, pairs, vocab, catalog)
        if fresh.model.digest() != cfg.model.digest():
            raise CheckpointError(f"model config {fresh.model.digest()} differs from checkpoint {cfg.model.digest()}")
    else:
        pairs, vocab, catalog, thes = load_inputs(args.corpus, args.tags, args.thesaurus)
        cfg = _finish_model(resolve_config(args), pairs, vocab, catalog)
        state = TrainState.fresh(cfg, vocab.words, catalog.names)
    examples, _ = _split(prepare_examples(pairs, thes, catalog), args.heldout or 0)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(
        out,
        "pretrain",
        {**cfg.to_dict(), "heldout": args.heldout or 0},
        {"corpus": args.corpus, "tags": args.tags, "thesaurus": args.thesaurus, "resume": args.resume},
        cfg.seed,
    )

    def progress(st, reports):
        if args.verbose and st.step % 10 == 0:
            log.info("step %d %s", st.step, " ".join(f"{r.task}={r.value:.4f}" for r in reports))

    pretrain(examples, state, out, progress)
    print(out / "checkpoint.bin")
    return EXIT_OK


def cmd_probe(args) -> int:
    out = Path(args.out)
    state, examples = _checkpoint_inputs(args)
    report = alignment_probe(state.params, state.config.model, examples)
    report["step"] = state.step
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(
        out,
        "probe",
        {"heldout": args.heldout or 0},
        {"checkpoint": args.checkpoint, "corpus": args.corpus, "tags": args.tags, "thesaurus": args.thesaurus},
        state.config.seed,
    )
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = Path(args.out)
    ladder = parse_ladder(Path(args.ladder).read_text(encoding="utf-8")) if args.ladder else list(DEFAULT_LADDER)
    pairs, vocab, catalog, thes = load_inputs(args.corpus, args.tags, args.thesaurus)
    cfg = _finish_model(resolve_config(args), pairs, vocab, catalog)
    train, heldout = _split(prepare_examples(pairs, thes, catalog), args.heldout)
    if not heldout:
        raise ConfigError("ablate needs --heldout > 0")
    table = ablation_run(train, heldout, ladder, cfg, DEFAULT_GAMMA)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "ablation.csv", table)
    write_manifest(
        out,
        "ablate",
        {**cfg.to_dict(), "heldout": args.heldout},
        {"corpus": args.corpus, "tags": args.tags, "thesaurus": args.thesaurus, "ladder": args.ladder},
        cfg.seed,
    )
    print((out / "ablation.csv").read_text(), end="")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    out = Path(args.out)
    state, examples = _checkpoint_inputs(args)
    rows = anchor_embeddings(state.params, state.config.model, examples)
    out.mkdir(parents=True, exist_ok=True)
    H = state.config.model.hidden
    with open(out / "embeddings.csv", "w") as fh:
        fh.write(",".join(["pair_id", "concept", "modality"] + [f"h{k}" for k in range(H)]) + "\n")
        for pair_id, concept, modality, vec in rows:
            fh.write(",".join([pair_id, concept, modality] + [repr(float(x)) for x in vec]) + "\n")
    write_manifest(
        out,
        "export-embeddings",
        {"heldout": args.heldout or 0},
        {"checkpoint": args.checkpoint, "corpus": args.corpus, "tags": args.tags, "thesaurus": args.thesaurus},
        state.config.seed,
    )
    print(out / "embeddings.csv")
    return EXIT_OK


# -----------------------------------------------------------------------------
# parser
# -----------------------------------------------------------------------------


def _add_inputs(p):
    p.add_argument("--corpus", required=True, help="corpus JSONL")
    p.add_argument("--tags", required=True, help="tag catalog, one name per line")
    p.add_argument("--thesaurus", help="variant<TAB>canonical<TAB>category file")


def _add_training(p):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--gamma", type=parse_gamma, help="five weights for AMC,MLM,MRM,ITM,VTC")
    p.add_argument("--mix", choices=("sample", "weighted"))
    p.add_argument("--swap-prob", dest="swap_prob", type=float)
    p.add_argument("--mask-prob", dest="mask_prob", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--ffn", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmal", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--concepts", type=int, required=True)
    p.add_argument("--d-v", dest="d_v", type=int, default=64)
    p.add_argument("--variants", action="store_true", help="use surface variants and write a thesaurus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("detect-anchors", help="write per-pair anchor points and corpus statistics")
    _add_inputs(p)
    p.add_argument("--out", required=True, help="anchor sidecar JSONL")
    p.add_argument("--stats", help="statistics JSON (default: stats.json beside --out)")
    p.set_defaults(func=cmd_detect_anchors)

    p = sub.add_parser("pretrain", help="train and checkpoint")
    _add_inputs(p)
    _add_training(p)
    p.add_argument("--heldout", type=int, default=0, help="exclude the last N pairs from training")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    for name, func, what in (
        ("probe", cmd_probe, "alignment, retrieval and anchor-recovery metrics"),
        ("export-embeddings", cmd_export_embeddings, "per-anchor hidden states as CSV"),
    ):
        p = sub.add_parser(name, help=what)
        p.add_argument("--checkpoint", required=True)
        _add_inputs(p)
        p.add_argument("--heldout", type=int, default=0, help="use only the last N pairs (default: all)")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train one model per ladder rung and tabulate probes")
    _add_inputs(p)
    _add_training(p)
    p.add_argument("--ladder", help="one rung per line, tasks joined by '+' (default: the cumulative ITM..AMC ladder)")
    p.add_argument("--heldout", type=int, required=True, help="last N pairs form the shared held-out set")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    for sp in sub.choices.values():
        sp.add_argument("--seed", type=int, help="the single source of randomness")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, ContractError, CorpusError, FileNotFoundError, IndexError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

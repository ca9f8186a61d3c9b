"""
Image-text pair records, vocabularies, the variant thesaurus and the
synthetic corpus generator.

Corpus files are JSON-Lines, one pair per line::

    {"pair_id": "p0", "caption": "a dog near a tree",
     "regions": [{"features": [...], "box": [x1, y1, x2, y2], "tag_scores": [...]}]}
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

log = logging.getLogger(__name__)

SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[MASK]", "[IMG]", "[TXT]")
CLS_ID, SEP_ID, MASK_ID, IMG_ID, TXT_ID = range(5)
UNK_TOKEN = "[UNK]"
UNK_ID = 5
NUM_RESERVED = 6

THESAURUS_CATEGORIES = ("case", "plurality", "synonym", "subword", "abbreviation")
REJECT_LIMIT = 0.10
_WORD_RE = re.compile(r"[a-z0-9]+")


class CorpusError(ValueError):
    pass


@dataclass
class RegionRecord:
    features: np.ndarray
    box: tuple[float, float, float, float]
    tag_scores: np.ndarray

    @property
    def top_tag(self) -> int:
        return int(np.argmax(self.tag_scores))

    def __eq__(self, other):
        return (
            isinstance(other, RegionRecord)
            and tuple(self.box) == tuple(other.box)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.tag_scores, other.tag_scores)
        )


@dataclass
class CaptionRecord:
    tokens: list[int]
    surface: list[str]

    def __len__(self):
        return len(self.tokens)


@dataclass
class PairRecord:
    pair_id: str
    regions: list[RegionRecord]
    caption: CaptionRecord

    @property
    def m(self) -> int:
        return len(self.regions)

    @property
    def n(self) -> int:
        return len(self.caption)


# -----------------------------------------------------------------------------
# vocabularies
# -----------------------------------------------------------------------------


class Vocabulary:
    """Word <-> index map; indices 0-4 are the special tokens, 5 is [UNK]."""

    def __init__(self, words: Iterable[str] = ()):
        self.words: list[str] = list(SPECIAL_TOKENS) + [UNK_TOKEN]
        self.index: dict[str, int] = {w: i for i, w in enumerate(self.words)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.index:
            self.index[word] = len(self.words)
            self.words.append(word)
        return self.index[word]

    def encode(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        seen = set()
        for t in texts:
            seen.update(split_words(t))
        return cls(sorted(seen))


class TagCatalog:
    def __init__(self, names: Iterable[str]):
        self.names = list(names)
        self.index = {n: i for i, n in enumerate(self.names)}
        if len(self.index) != len(self.names):
            raise CorpusError("duplicate tag names in catalog")

    def __len__(self):
        return len(self.names)

    def name(self, idx: int) -> str:
        return self.names[idx]

    @classmethod
    def load(cls, path) -> "TagCatalog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line.strip() for line in lines if line.strip() and not line.startswith("#"))

    def save(self, path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")


# -----------------------------------------------------------------------------
# tokenizer and thesaurus
# -----------------------------------------------------------------------------


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> CaptionRecord:
    surface = split_words(text)
    if not surface:
        raise CorpusError(f"empty caption: {text!r}")
    return CaptionRecord([vocab.encode(w) for w in surface], surface)


@dataclass
class Thesaurus:
    """Variant -> (canonical, category). Keys may span several words."""

    entries: dict[str, tuple[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        norm = {}
        for variant, (canon, cat) in self.entries.items():
            if cat not in THESAURUS_CATEGORIES:
                raise CorpusError(f"unknown thesaurus category {cat!r} for {variant!r}")
            norm[" ".join(split_words(variant))] = (" ".join(split_words(canon)), cat)
        for variant, (canon, _) in norm.items():
            if canon in norm and norm[canon][0] != canon:
                raise CorpusError(f"canonical {canon!r} (from {variant!r}) is itself a variant of {norm[canon][0]!r}")
        self.entries = norm
        self.max_span = max((len(k.split()) for k in norm), default=1)

    def canonicalize(self, term: str) -> str:
        key = " ".join(split_words(term)) or term.lower()
        hit = self.entries.get(key)
        return hit[0] if hit else key

    def __contains__(self, term):
        return " ".join(split_words(term)) in self.entries

    def __len__(self):
        return len(self.entries)

    @classmethod
    def load(cls, path) -> "Thesaurus":
        entries = {}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cols = raw.rstrip("\n").split("\t")
            if len(cols) != 3:
                raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}")
            entries[cols[0].strip()] = (cols[1].strip(), cols[2].strip())
        return cls(entries)

    def save(self, path) -> None:
        lines = ["# variant\tcanonical\tcategory"]
        lines += [f"{v}\t{c}\t{cat}" for v, (c, cat) in sorted(self.entries.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def canonicalize(term: str, thesaurus: Thesaurus | None) -> str:
    if thesaurus is None:
        return " ".join(split_words(term)) or term.lower()
    return thesaurus.canonicalize(term)


# -----------------------------------------------------------------------------
# corpus io
# -----------------------------------------------------------------------------


def _parse_region(obj, d_v, num_tags) -> RegionRecord:
    feats = np.asarray(obj["features"], dtype=np.float64)
    box = tuple(float(x) for x in obj["box"])
    scores = np.asarray(obj["tag_scores"], dtype=np.float64)
    if feats.ndim != 1 or (d_v is not None and feats.size != d_v):
        raise CorpusError(f"feature length {feats.size} != d_v {d_v}")
    if len(box) != 4:
        raise CorpusError("box must have 4 coordinates")
    x1, y1, x2, y2 = box
    if not (0.0 <= x1 <= x2 <= 1.0 and 0.0 <= y1 <= y2 <= 1.0):
        raise CorpusError(f"box not normalized: {list(box)}")
    if scores.ndim != 1 or (num_tags is not None and scores.size != num_tags):
        raise CorpusError(f"tag_scores length {scores.size} != {num_tags}")
    if np.any(scores < 0) or abs(scores.sum() - 1.0) > 1e-6:
        raise CorpusError("tag_scores not normalized")
    if not (np.all(np.isfinite(feats)) and np.all(np.isfinite(scores))):
        raise CorpusError("non-finite values")
    return RegionRecord(feats, box, scores)


def parse_pair(line: str, vocab: Vocabulary, d_v=None, num_tags=None, max_regions=64, max_tokens=64) -> PairRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"malformed JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise CorpusError("line is not a JSON object")
    try:
        pair_id = str(obj["pair_id"])
        caption = tokenize(obj["caption"], vocab)
        if obj["regions"] and d_v is None:
            d_v = len(obj["regions"][0]["features"])
        if obj["regions"] and num_tags is None:
            num_tags = len(obj["regions"][0]["tag_scores"])
        regions = [_parse_region(r, d_v, num_tags) for r in obj["regions"]]
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"schema error: {exc!r}") from None
    if not 1 <= len(regions) <= max_regions:
        raise CorpusError(f"region count {len(regions)} outside [1, {max_regions}]")
    if len(caption) > max_tokens:
        raise CorpusError(f"caption length {len(caption)} exceeds {max_tokens}")
    return PairRecord(pair_id, regions, caption)


def load_pairs(
    path,
    vocab: Vocabulary,
    d_v: int | None = None,
    num_tags: int | None = None,
    rejects: list | None = None,
    max_regions: int = 64,
    max_tokens: int = 64,
) -> Iterator[PairRecord]:
    """Yield validated pairs in file order.

    Bad lines are skipped and appended to ``rejects`` as ``(lineno, reason)``.
    ``d_v`` / ``num_tags`` default to the first valid record's sizes. Raises
    :class:`CorpusError` at end of file when more than 10% of lines failed.
    """
    if rejects is None:
        rejects = []
    total = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            total += 1
            try:
                pair = parse_pair(line, vocab, d_v, num_tags, max_regions, max_tokens)
            except CorpusError as exc:
                rejects.append((lineno, str(exc)))
                log.warning("%s:%d rejected: %s", path, lineno, exc)
                continue
            if d_v is None:
                d_v = pair.regions[0].features.size
            if num_tags is None:
                num_tags = pair.regions[0].tag_scores.size
            yield pair
    if total and len(rejects) / total > REJECT_LIMIT:
        raise CorpusError(f"{path}: {len(rejects)}/{total} lines rejected (limit {REJECT_LIMIT:.0%}); first: {rejects[0]}")


def read_captions(path) -> list[str]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                out.append(str(json.loads(line)["caption"]))
            except (json.JSONDecodeError, KeyError, TypeError):
                continue
    return out


def read_corpus(path, vocab: Vocabulary | None = None, **kw) -> tuple[list[PairRecord], Vocabulary]:
    """Load a whole corpus, building the vocabulary from its captions when not given."""
    if vocab is None:
        vocab = Vocabulary.from_texts(read_captions(path))
    return list(load_pairs(path, vocab, **kw)), vocab


def pair_to_json(pair: PairRecord) -> str:
    obj = {
        "pair_id": pair.pair_id,
        "caption": " ".join(pair.caption.surface),
        "regions": [
            {
                "features": [float(x) for x in r.features],
                "box": [float(x) for x in r.box],
                "tag_scores": [float(x) for x in r.tag_scores],
            }
            for r in pair.regions
        ],
    }
    return json.dumps(obj, separators=(",", ":"))


def write_pairs(path, pairs: Iterable[PairRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(pair_to_json(p) + "\n")


def write_sidecar(path, rows: Iterable[tuple[str, list]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair_id, anchors in rows:
            fh.write(json.dumps({"pair_id": pair_id, "anchors": [list(a) for a in anchors]}, separators=(",", ":")) + "\n")


def read_sidecar(path) -> dict[str, list[tuple[int, int, str]]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj["pair_id"]] = [(int(a[0]), int(a[1]), str(a[2])) for a in obj["anchors"]]
    return out


# -----------------------------------------------------------------------------
# synthetic corpus
# -----------------------------------------------------------------------------

CONCEPT_NAMES = (
    "dog", "cat", "horse", "girl", "boy", "car", "bus", "tree", "table", "chair",
    "cup", "bird", "boat", "clock", "kite", "bike", "train", "sheep", "cow", "pizza",
    "bench", "lamp", "phone", "book", "vase", "sofa", "bed", "bottle", "bowl", "laptop",
    "carpet", "umbrella", "elephant", "giraffe", "zebra", "banana", "apple", "sandwich",
    "cake", "donut", "truck", "plane", "fence", "window", "door", "flower", "hat", "shirt",
)

# synonym / abbreviation / sub-word renderings used when variants are enabled
_VARIANTS = {
    "carpet": [("rug", "synonym")],
    "laptop": [("laptop computer", "subword")],
    "bike": [("bicycle", "synonym")],
    "sofa": [("couch", "synonym")],
    "phone": [("cell phone", "subword")],
    "plane": [("airplane", "synonym")],
    "television": [("tv", "abbreviation")],
}

_TEMPLATES = (
    ("a photo of a {0}", 1),
    ("a picture showing a {0}", 1),
    ("there is a {0} in this image", 1),
    ("a {0} next to a {1}", 2),
    ("the {0} is near the {1}", 2),
    ("there is a {0} and a {1} in the scene", 2),
    ("a {0} beside a {1} and a {2}", 3),
)


def concept_names(count: int) -> list[str]:
    names = list(CONCEPT_NAMES[:count])
    names += [f"object{k}" for k in range(len(names), count)]
    return names


def _round(a: np.ndarray, places: int = 5) -> np.ndarray:
    return np.round(a, places) + 0.0


@dataclass
class SynthSpec:
    num_pairs: int
    concepts: int
    seed: int
    d_v: int = 64
    variants: bool = False
    feature_noise: float = 0.25
    box_jitter: float = 0.03


def synth_pairs(spec: SynthSpec):
    """Generate ``(records, sidecar_rows, tag_names, thesaurus)`` in memory.

    Every pair names 1-3 concepts that each own exactly one region, plus 1-2
    distractor regions whose concepts are absent from the caption. Concepts
    have a feature prototype and a characteristic box.
    """
    if spec.concepts < 4:
        raise CorpusError("synthetic corpus needs at least 4 concepts")
    rng = np.random.default_rng(spec.seed)
    names = concept_names(spec.concepts)
    C = spec.concepts
    protos = rng.normal(size=(C, spec.d_v))
    centers = rng.uniform(0.15, 0.85, size=(C, 2))
    sizes = rng.uniform(0.1, 0.5, size=(C, 2))
    order = rng.permutation(C)

    thes_entries: dict[str, tuple[str, str]] = {}
    if spec.variants:
        for name in names:
            thes_entries[name + "s"] = (name, "plurality")
            thes_entries[name.capitalize()] = (name, "case")
            for var, cat in _VARIANTS.get(name, []):
                thes_entries[var] = (name, cat)

    records, sidecar = [], []
    for p in range(spec.num_pairs):
        template, k = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
        first = int(order[p % C])
        others = [int(c) for c in rng.permutation(C) if c != first]
        caption_concepts = [first] + others[: k - 1]
        n_distract = int(rng.integers(1, 3))
        distract = others[k - 1 : k - 1 + n_distract]

        words = []
        for c in caption_concepts:
            word = names[c]
            if spec.variants and rng.random() < 0.5:
                choices = [name for name, (canon, _) in thes_entries.items() if canon == names[c]]
                word = choices[int(rng.integers(len(choices)))].lower()
            words.append(word)
        text = template.format(*words)

        surface = split_words(text)
        # first token of each rendered concept phrase
        token_idx, cursor = [], 0
        for w in words:
            span = split_words(w)
            while surface[cursor : cursor + len(span)] != span:
                cursor += 1
            token_idx.append(cursor)
            cursor += len(span)

        region_concepts = caption_concepts + distract
        perm = rng.permutation(len(region_concepts))
        regions, anchors = [], []
        for slot, src in enumerate(perm):
            c = region_concepts[int(src)]
            feats = _round(protos[c] + spec.feature_noise * rng.normal(size=spec.d_v))
            cx, cy = centers[c] + rng.uniform(-spec.box_jitter, spec.box_jitter, size=2)
            w, h = sizes[c]
            box = tuple(float(v) for v in _round(np.clip([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], 0.0, 1.0)))
            logits = rng.normal(scale=0.5, size=C)
            logits[c] = np.max(np.delete(logits, c)) + 1.5 + abs(rng.normal())
            scores = np.exp(logits - logits.max())
            scores /= scores.sum()
            regions.append({"features": feats.tolist(), "box": list(box), "tag_scores": scores.tolist()})
            if int(src) < len(caption_concepts):
                anchors.append((slot, token_idx[int(src)], names[c]))
        anchors.sort()
        pair_id = f"p{p:05d}"
        records.append({"pair_id": pair_id, "caption": text, "regions": regions})
        sidecar.append((pair_id, anchors))
    return records, sidecar, names, Thesaurus(thes_entries)


def synth_corpus(out_dir, num_pairs: int, concepts: int, seed: int, d_v: int = 64, variants: bool = False) -> dict:
    """Write ``corpus.jsonl``, ``anchors.jsonl``, ``tags.txt`` (and
    ``thesaurus.tsv`` when variants are on) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, sidecar, names, thes = synth_pairs(SynthSpec(num_pairs, concepts, seed, d_v, variants))
    paths = {"corpus": out / "corpus.jsonl", "anchors": out / "anchors.jsonl", "tags": out / "tags.txt"}
    with open(paths["corpus"], "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    write_sidecar(paths["anchors"], sidecar)
    TagCatalog(names).save(paths["tags"])
    if variants:
        paths["thesaurus"] = out / "thesaurus.tsv"
        thes.save(paths["thesaurus"])
    return paths

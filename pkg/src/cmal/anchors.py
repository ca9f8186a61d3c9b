"""Anchor points: (region, token) pairs naming the same canonical concept."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, NamedTuple

from .corpus import PairRecord, TagCatalog, Thesaurus, canonicalize


class AnchorPoint(NamedTuple):
    region_idx: int
    token_idx: int
    concept: str


@dataclass
class AnchorSet:
    anchors: list[AnchorPoint]

    def __iter__(self):
        return iter(self.anchors)

    def __len__(self):
        return len(self.anchors)

    def __getitem__(self, k):
        return self.anchors[k]

    @property
    def concepts(self) -> set[str]:
        return {a.concept for a in self.anchors}

    def as_rows(self) -> list[list]:
        return [[a.region_idx, a.token_idx, a.concept] for a in self.anchors]


def region_concepts(pair: PairRecord, thesaurus: Thesaurus | None, catalog: TagCatalog) -> list[tuple[str, float]]:
    """Canonical top-tag concept and its detector confidence for every region."""
    out = []
    for r in pair.regions:
        top = r.top_tag
        out.append((canonicalize(catalog.name(top), thesaurus), float(r.tag_scores[top])))
    return out


def _phrases(thesaurus: Thesaurus | None, catalog: TagCatalog) -> set[str]:
    found = set()
    if thesaurus is not None:
        for variant, (canon, _) in thesaurus.entries.items():
            found.add(variant)
            found.add(canon)
    for name in catalog.names:
        found.add(canonicalize(name, thesaurus))
    return {p for p in found if " " in p}


def word_concepts(surface: list[str], thesaurus: Thesaurus | None, catalog: TagCatalog) -> list[tuple[int, str]]:
    """Concept occurrences in a caption as ``(first_token_idx, concept)``.

    Multi-word thesaurus entries and tag names are matched longest-first,
    scanning left to right; a matched span is consumed whole.
    """
    phrases = _phrases(thesaurus, catalog)
    longest = max((len(p.split()) for p in phrases), default=1)
    out, j = [], 0
    while j < len(surface):
        span = 1
        for L in range(min(longest, len(surface) - j), 1, -1):
            if " ".join(surface[j : j + L]) in phrases:
                span = L
                break
        out.append((j, canonicalize(" ".join(surface[j : j + span]), thesaurus)))
        j += span
    return out


def detect_anchors(pair: PairRecord, thesaurus: Thesaurus | None, tag_catalog: TagCatalog) -> AnchorSet:
    """Intersect canonical region tags with canonical caption words.

    Each shared concept pairs its regions (highest tag confidence first, ties
    to the lower index) with its tokens (left to right) until one side runs
    out. The result is sorted by region index.
    """
    regions = region_concepts(pair, thesaurus, tag_catalog)
    words = word_concepts(pair.caption.surface, thesaurus, tag_catalog)

    by_region: dict[str, list[tuple[float, int]]] = defaultdict(list)
    for i, (concept, conf) in enumerate(regions):
        by_region[concept].append((-conf, i))
    by_token: dict[str, list[int]] = defaultdict(list)
    for j, concept in words:
        by_token[concept].append(j)

    anchors = []
    for concept in by_region.keys() & by_token.keys():
        ranked = [i for _, i in sorted(by_region[concept])]
        for i, j in zip(ranked, by_token[concept]):
            anchors.append(AnchorPoint(i, j, concept))
    anchors.sort()
    return AnchorSet(anchors)


def corpus_anchor_stats(pairs: Iterable[PairRecord], thesaurus: Thesaurus | None, tag_catalog: TagCatalog) -> dict:
    """Corpus-wide anchor report: distinct concepts (meta-mappings), per-pair
    anchor-count histogram and the fraction of pairs with any anchor."""
    concepts: set[str] = set()
    hist: Counter = Counter()
    total = 0
    for pair in pairs:
        found = detect_anchors(pair, thesaurus, tag_catalog)
        concepts |= found.concepts
        hist[len(found)] += 1
        total += 1
    covered = total - hist.get(0, 0)
    return {
        "num_pairs": total,
        "meta_mappings": len(concepts),
        "concepts": sorted(concepts),
        "histogram": {str(k): hist[k] for k in sorted(hist)},
        "coverage": covered / total if total else 0.0,
    }

import numpy as np
import pytest

from cmal.config import ModelConfig, TrainConfig
from cmal.corpus import SynthSpec, TagCatalog, Vocabulary, parse_pair, synth_pairs
from cmal.model import init_params
from cmal.trainer import prepare_examples

import json


def build_corpus(num_pairs=24, concepts=6, seed=0, d_v=6, variants=False):
    records, sidecar, names, thes = synth_pairs(SynthSpec(num_pairs, concepts, seed, d_v, variants))
    vocab = Vocabulary.from_texts(r["caption"] for r in records)
    pairs = [parse_pair(json.dumps(r), vocab) for r in records]
    return pairs, vocab, TagCatalog(names), thes, sidecar


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus()


@pytest.fixture(scope="session")
def small_examples(small_corpus):
    pairs, vocab, catalog, thes, _ = small_corpus
    return prepare_examples(pairs, thes if len(thes) else None, catalog)


@pytest.fixture
def tiny_cfg(small_corpus):
    _, vocab, catalog, _, _ = small_corpus
    return ModelConfig(d_v=6, hidden=8, ffn=16, uni_heads=1, heads=2, layers=2, max_len=32, vocab_size=len(vocab), num_tags=len(catalog))


@pytest.fixture
def tiny_params(tiny_cfg):
    params = init_params(tiny_cfg, seed=3)
    # larger weights than the training init so gradients are well away from zero
    rng = np.random.default_rng(11)
    for name, p in params.items():
        if not name.endswith((".g", ".b")):
            p.value[...] = rng.normal(scale=0.4, size=p.shape)
    return params


@pytest.fixture
def train_cfg(tiny_cfg):
    return TrainConfig(steps=6, batch_size=4, model=tiny_cfg)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

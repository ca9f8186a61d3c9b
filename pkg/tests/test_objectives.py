import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmal import engine as E
from cmal.config import DEFAULT_GAMMA, TASKS, ConfigError
from cmal.corpus import MASK_ID, NUM_RESERVED
from cmal.engine import ContractError
from cmal.objectives import (
    TaskBatch,
    amc_from_states,
    block_counts,
    compute_loss,
    loss_amc,
    loss_itm,
    loss_mlm,
    loss_mrm,
    loss_vtc,
    mask_plan_regions,
    mask_plan_tokens,
    plan_batch,
    schedule_tasks,
    selection_count,
    vtc_loss_from_summaries,
)

from . import oracles


def uniform_heads(P):
    for k in ("head.word.fc2.w", "head.word.fc2.b", "head.region.w", "head.region.b", "head.itm.w", "head.itm.b"):
        P[k].value[...] = 0.0
    return P


def plan(task, examples, cfg, seed=0, **kw):
    return plan_batch(task, examples, np.random.default_rng(seed), 4, cfg.vocab_size, **kw)


def fd_params(P):
    return [p for k, p in sorted(P.items()) if not k.endswith(".attn.k.b")]


# ----------------------------------------------------------------------------- AMC


def test_amc_uniform_heads(small_examples, tiny_cfg, tiny_params):
    P = uniform_heads(tiny_params)
    batch = plan("AMC", small_examples, tiny_cfg, swap_prob=1.0)
    rep = loss_amc(P, tiny_cfg, small_examples, batch, swapped_only=True)
    assert rep.value == pytest.approx(math.log(tiny_cfg.vocab_size) + math.log(tiny_cfg.num_tags), abs=1e-6)
    assert rep.objective.item() == pytest.approx(rep.value, abs=1e-12)


def test_amc_saturated_heads(tiny_cfg, tiny_params):
    P = tiny_params
    for k in ("head.word.fc2.w", "head.region.w"):
        P[k].value[...] = 0.0
    P["head.word.fc2.b"].value[...] = -50.0
    P["head.word.fc2.b"].value[7] = 50.0
    P["head.region.b"].value[...] = -50.0
    P["head.region.b"].value[2] = 50.0
    h = E.constant(np.random.default_rng(0).normal(size=(1, tiny_cfg.hidden)))
    total, _, _, acc = amc_from_states(h, h, [7], [2], P, tiny_cfg)
    assert total.item() == pytest.approx(0.0, abs=1e-12) and acc == 1.0


def test_amc_batch_is_mean_of_singletons(small_examples, tiny_cfg, tiny_params):
    batch = plan("AMC", small_examples, tiny_cfg, swap_prob=1.0)
    two = TaskBatch("AMC", batch.indices[:2], anchors=batch.anchors[:2], swap_draws=(0.0, 0.0), swapped=(True, True))
    singles = [
        loss_amc(tiny_params, tiny_cfg, small_examples, TaskBatch("AMC", (two.indices[k],), anchors=(two.anchors[k],), swap_draws=(0.0,), swapped=(True,))).value
        for k in range(2)
    ]
    assert loss_amc(tiny_params, tiny_cfg, small_examples, two).value == pytest.approx(np.mean(singles), abs=1e-12)


def test_amc_rejects_unswapped_when_strict(small_examples, tiny_cfg, tiny_params):
    batch = plan("AMC", small_examples, tiny_cfg, swap_prob=0.0)
    with pytest.raises(ContractError):
        loss_amc(tiny_params, tiny_cfg, small_examples, batch, swapped_only=True)


def test_amc_mixed_batch_reports_swapped_part(small_examples, tiny_cfg, tiny_params):
    batch = plan("AMC", small_examples, tiny_cfg)
    b2 = TaskBatch("AMC", batch.indices, anchors=batch.anchors, swap_draws=(0.1, 0.9, 0.1, 0.9), swapped=(True, False, True, False))
    rep = loss_amc(tiny_params, tiny_cfg, small_examples, b2)
    only = TaskBatch("AMC", batch.indices[::2], anchors=batch.anchors[::2], swap_draws=(0.1, 0.1), swapped=(True, True))
    assert rep.value == pytest.approx(loss_amc(tiny_params, tiny_cfg, small_examples, only).value, abs=1e-12)
    assert rep.extra["swapped"] == 2
    assert rep.objective.item() == pytest.approx(0.5 * rep.value + 0.5 * rep.extra["l_masked_anchor"], abs=1e-12)


def test_amc_only_samples_anchored_pairs(small_examples, tiny_cfg):
    batch = plan("AMC", small_examples, tiny_cfg)
    for k, a in zip(batch.indices, batch.anchors):
        assert a in list(small_examples[k].anchors)


# ----------------------------------------------------------------------------- MLM / MRM


def test_twenty_tokens_select_three():
    assert selection_count(20) == 3
    _, positions, _ = mask_plan_tokens(list(range(NUM_RESERVED, NUM_RESERVED + 20)), set(), np.random.default_rng(0), 40)
    assert len(positions) == 3


def test_twenty_regions_select_three():
    assert len(mask_plan_regions(20, set(), np.random.default_rng(0))) == 3


@pytest.mark.parametrize("eligible,count", [(0, 0), (1, 1), (3, 1), (4, 1), (10, 2), (13, 2), (17, 3), (30, 5)])
def test_selection_rounding(eligible, count):
    assert selection_count(eligible) == count


def test_bucket_fractions_concentrate():
    rng = np.random.default_rng(123)
    counts = Counter()
    tokens = list(range(NUM_RESERVED, NUM_RESERVED + 7))  # 7 eligible -> one position per plan
    for _ in range(10_000):
        _, _, buckets = mask_plan_tokens(tokens, set(), rng, 50)
        counts.update(buckets)
    n = sum(counts.values())
    for name, p in (("mask", 0.8), ("random", 0.1), ("keep", 0.1)):
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(counts[name] / n - p) < 3 * sigma


def test_random_bucket_uses_plain_words():
    rng = np.random.default_rng(5)
    for _ in range(500):
        new, pos, buckets = mask_plan_tokens([10, 11, 12], set(), rng, 20)
        for j, b in zip(pos, buckets):
            if b == "mask":
                assert new[j] == MASK_ID
            elif b == "random":
                assert NUM_RESERVED <= new[j] < 20
            else:
                assert new[j] == [10, 11, 12][j]


def test_region_selection_is_uniform():
    # 4 eligible regions, one selected each time: every region near 1/4
    rng = np.random.default_rng(9)
    hits = Counter(mask_plan_regions(5, {2}, rng)[0] for _ in range(10_000))
    assert 2 not in hits
    sigma = math.sqrt(0.25 * 0.75 / 10_000)
    assert all(abs(hits[i] / 10_000 - 0.25) < 3 * sigma for i in (0, 1, 3, 4))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=20), st.data())
def test_mask_plans_avoid_anchors_and_specials(tokens, data):
    excluded = set(data.draw(st.lists(st.integers(0, len(tokens) - 1), max_size=3)))
    _, positions, _ = mask_plan_tokens(tokens, excluded, np.random.default_rng(data.draw(st.integers(0, 999))), 31)
    assert not set(positions) & excluded
    assert all(tokens[j] >= NUM_RESERVED - 1 for j in positions)
    m = data.draw(st.integers(1, 8))
    ex_r = set(data.draw(st.lists(st.integers(0, m - 1), max_size=3)))
    assert not set(mask_plan_regions(m, ex_r, np.random.default_rng(0))) & ex_r


def test_mlm_selected_positions_exclude_anchor_tokens(small_examples, tiny_cfg):
    batch = plan("MLM", small_examples, tiny_cfg, seed=3)
    for k, sel in zip(batch.indices, batch.selected):
        assert not set(sel) & {a.token_idx for a in small_examples[k].anchors}


def test_mlm_mask_everything_uniform(small_examples, tiny_cfg, tiny_params):
    P = uniform_heads(tiny_params)
    batch = plan("MLM", small_examples, tiny_cfg, mask_prob=1.0)
    assert sum(len(s) for s in batch.selected) > 4
    rep = loss_mlm(P, tiny_cfg, small_examples, batch)
    assert rep.value == pytest.approx(math.log(tiny_cfg.vocab_size), abs=1e-6)


def test_mrm_uniform(small_examples, tiny_cfg, tiny_params):
    P = uniform_heads(tiny_params)
    rep = loss_mrm(P, tiny_cfg, small_examples, plan("MRM", small_examples, tiny_cfg))
    assert rep.value == pytest.approx(math.log(tiny_cfg.num_tags), abs=1e-6)


def test_mlm_nothing_eligible_is_zero_weight(small_examples, tiny_cfg, tiny_params):
    batch = plan("MLM", small_examples, tiny_cfg)
    empty = TaskBatch("MLM", batch.indices, tokens=batch.tokens, selected=((),) * 4, buckets=((),) * 4)
    rep = loss_mlm(tiny_params, tiny_cfg, small_examples, empty)
    assert rep.weight == 0.0 and rep.value == 0.0


def test_mrm_zeroes_features_but_not_location(small_examples, tiny_cfg, tiny_params):
    from cmal.umse import visual_inputs

    pair = small_examples[0].pair
    X = visual_inputs([pair.regions], tiny_cfg.d_v, [[True] + [False] * (pair.m - 1)])
    assert not X[0, : tiny_cfg.d_v].any() and X[0, tiny_cfg.d_v :].any()
    assert X[1:, : tiny_cfg.d_v].any()


# ----------------------------------------------------------------------------- ITM


def test_itm_balanced_and_untrained_is_ln2(small_examples, tiny_cfg, tiny_params):
    P = uniform_heads(tiny_params)
    batch = plan("ITM", small_examples, tiny_cfg)
    assert sum(batch.labels) == 2
    for k, c, y in zip(batch.indices, batch.captions, batch.labels):
        assert (k == c) == (y == 1)
    assert loss_itm(P, tiny_cfg, small_examples, batch).value == pytest.approx(math.log(2), abs=1e-9)


def test_itm_saturated(small_examples, tiny_cfg, tiny_params):
    P = uniform_heads(tiny_params)
    batch = plan("ITM", small_examples, tiny_cfg)
    pos = TaskBatch("ITM", batch.indices, captions=batch.indices, labels=(1, 1, 1, 1))
    P["head.itm.b"].value[...] = 40.0
    assert loss_itm(P, tiny_cfg, small_examples, pos).value == pytest.approx(0.0, abs=1e-15)


def test_itm_two_pair_hand_computation(small_examples, tiny_cfg, tiny_params):
    from cmal.cmai import interact_rows
    from cmal.cmap import PromptSpec, build_hybrid_batch
    from cmal.umse import encode_textual_batch, encode_visual_batch

    batch = plan_batch("ITM", small_examples, np.random.default_rng(4), 2, tiny_cfg.vocab_size)
    rep = loss_itm(tiny_params, tiny_cfg, small_examples, batch)
    regions = [small_examples[k].pair.regions for k in batch.indices]
    tokens = [small_examples[k].pair.caption.tokens for k in batch.captions]
    probs = []
    for r, t in zip(regions, tokens):
        vb = encode_visual_batch([r], tiny_params, tiny_cfg)
        tb = encode_textual_batch([t], tiny_params, tiny_cfg)
        hb = build_hybrid_batch(vb, tb, [PromptSpec()], tiny_params, tiny_cfg)
        cls = interact_rows(hb.states, hb.segments, tiny_params, tiny_cfg).value[0]
        z = float(cls @ tiny_params["head.itm.w"].value[:, 0] + tiny_params["head.itm.b"].value[0])
        probs.append(1 / (1 + math.exp(-z)))
    assert rep.value == pytest.approx(oracles.bce(probs, batch.labels), abs=1e-12)


def test_itm_needs_two_pairs(small_examples, tiny_cfg):
    with pytest.raises(ContractError):
        plan_batch("ITM", small_examples, np.random.default_rng(0), 4, tiny_cfg.vocab_size, indices=[3])


# ----------------------------------------------------------------------------- VTC


def test_vtc_identical_summaries_is_ln_n():
    row = np.random.default_rng(0).normal(size=(1, 5))
    for N in (2, 3, 8):
        s = E.constant(np.repeat(row, N, axis=0))
        assert vtc_loss_from_summaries(s, s, 0.07).item() == pytest.approx(math.log(N), abs=1e-9)


def test_vtc_separation_limit():
    img = E.constant([[1.0, 0.0], [-1.0, 0.0]])
    txt = E.constant([[1.0, 0.0], [-1.0, 0.0]])
    assert vtc_loss_from_summaries(img, txt, 0.01).item() < 1e-80


def test_vtc_matches_direct_oracle():
    rng = np.random.default_rng(1)
    img, txt = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    got = vtc_loss_from_summaries(E.constant(img), E.constant(txt), 0.07).item()
    assert got == pytest.approx(oracles.info_nce(img, txt, 0.07), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_vtc_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    img, txt = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    a = vtc_loss_from_summaries(E.constant(img), E.constant(txt), 0.1).item()
    b = vtc_loss_from_summaries(E.constant(img * c), E.constant(txt * c), 0.1).item()
    assert a == pytest.approx(b, abs=1e-9)


def test_vtc_needs_two():
    with pytest.raises(ContractError):
        vtc_loss_from_summaries(E.constant(np.ones((1, 3))), E.constant(np.ones((1, 3))), 0.1)


# ----------------------------------------------------------------------------- scheduler


def test_default_block_multiset():
    tasks = [schedule_tasks(s, DEFAULT_GAMMA, 3) for s in range(10)]
    assert Counter(tasks) == {"AMC": 4, "MLM": 2, "MRM": 2, "ITM": 1, "VTC": 1}
    for block in range(1, 20):
        assert Counter(schedule_tasks(s, DEFAULT_GAMMA, 3) for s in range(10 * block, 10 * block + 10)) == Counter(tasks)


def test_single_task_schedule():
    assert {schedule_tasks(s, (1, 0, 0, 0, 0), 0) for s in range(50)} == {"AMC"}


def test_schedule_deterministic_and_seed_dependent():
    a = [schedule_tasks(s, DEFAULT_GAMMA, 7) for s in range(100)]
    assert a == [schedule_tasks(s, DEFAULT_GAMMA, 7) for s in range(100)]
    assert a != [schedule_tasks(s, DEFAULT_GAMMA, 8) for s in range(100)]


def test_schedule_rejects_bad_gamma():
    with pytest.raises(ConfigError):
        schedule_tasks(0, (0.5, 0.2, 0.2, 0.1, 0.1), 0)


def test_renormalized_rung_counts():
    g = (0, 0.2 / 0.6, 0.2 / 0.6, 0.1 / 0.6, 0.1 / 0.6)
    assert block_counts(g) == [0, 3, 3, 2, 2]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5).filter(lambda g: sum(g) > 0.1))
def test_block_counts_sum_to_ten(raw):
    g = [x / sum(raw) for x in raw]
    g[-1] = 1.0 - sum(g[:-1])
    if g[-1] < 0:
        return
    counts = block_counts(g)
    assert sum(counts) == 10
    assert all(abs(c - 10 * x) < 1.0 for c, x in zip(counts, g))


# ----------------------------------------------------------------------------- gradients


@pytest.mark.parametrize("task", TASKS)
def test_loss_gradients_end_to_end(task, small_examples, tiny_cfg, tiny_params):
    batch = plan(task, small_examples, tiny_cfg, seed=2)
    f = lambda: compute_loss(task, tiny_params, tiny_cfg, small_examples, batch, tau=0.5).objective
    assert E.finite_difference_check(f, fd_params(tiny_params), samples=30, step=1e-5) < 1e-3


def test_total_loss_gradient(small_examples, tiny_cfg, tiny_params):
    batches = {t: plan(t, small_examples, tiny_cfg, seed=5) for t in TASKS}

    def total():
        out = None
        for t, g in zip(TASKS, DEFAULT_GAMMA):
            term = compute_loss(t, tiny_params, tiny_cfg, small_examples, batches[t], tau=0.5).objective * g
            out = term if out is None else out + term
        return out

    assert E.finite_difference_check(total, fd_params(tiny_params), samples=25, step=1e-4) < 1e-3


@pytest.mark.parametrize("task", TASKS)
def test_losses_finite_and_nonnegative(task, small_examples, tiny_cfg, tiny_params):
    for seed in range(3):
        rep = compute_loss(task, tiny_params, tiny_cfg, small_examples, plan(task, small_examples, tiny_cfg, seed=seed))
        assert (not math.isnan(rep.value)) and rep.value >= 0 or (task == "AMC" and rep.extra["swapped"] == 0)

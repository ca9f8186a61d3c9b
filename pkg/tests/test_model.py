import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmal import engine as E
from cmal.anchors import AnchorPoint
from cmal.cmai import interact, interact_rows, itm_score, predict_region, predict_word, vtc_similarity
from cmal.cmap import (
    FROM_IMAGE,
    FROM_TEXT,
    MASK,
    MASKED,
    NATIVE,
    PLAIN,
    SWAP,
    TYPE_CLS,
    TYPE_SEP,
    TYPE_TEXTUAL,
    TYPE_VISUAL,
    PromptSpec,
    build_hybrid_batch,
    exchange_anchor_slots,
    fill_swap,
    integrate,
    mask_anchor,
    plain_prompt,
)
from cmal.config import ModelConfig
from cmal.corpus import RegionRecord
from cmal.engine import ContractError, DimensionError
from cmal.model import init_params, param_count, param_shapes
from cmal.umse import encode_textual, encode_textual_batch, encode_visual, encode_visual_batch, embed_visual

from . import oracles


def cfg4(**kw):
    base = dict(d_v=3, hidden=4, ffn=8, uni_heads=1, heads=2, layers=1, max_len=16, vocab_size=9, num_tags=5)
    base.update(kw)
    return ModelConfig(**base)


def random_params(cfg, seed=0, scale=0.5):
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for name, p in params.items():
        p.value[...] = rng.normal(scale=scale, size=p.shape) + (1.0 if name.endswith(".g") else 0.0)
    return params


def regions(m, seed=0, d_v=3):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(m):
        x1, y1 = rng.uniform(0, 0.5, size=2)
        out.append(RegionRecord(rng.normal(size=d_v), (x1, y1, x1 + 0.3, y1 + 0.4), np.full(5, 0.2)))
    return out


def values(p):
    return {k: v.value for k, v in p.items()}


# ----------------------------------------------------------------------------- registry


def test_init_conventions():
    cfg = cfg4()
    params = init_params(cfg, 0)
    assert set(params) == set(param_shapes(cfg))
    for name, p in params.items():
        if name.endswith(".b"):
            assert not p.value.any()
        elif name.endswith(".g"):
            assert np.all(p.value == 1.0)
        else:
            assert np.abs(p.value).max() <= 2 * cfg.init_std
    assert param_count(params) == sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def test_init_is_seeded():
    a, b = init_params(cfg4(), 5), init_params(cfg4(), 5)
    assert all(np.array_equal(a[k].value, b[k].value) for k in a)


# ----------------------------------------------------------------------------- encoders


def test_single_region_attention_rows():
    cfg = cfg4()
    P = random_params(cfg)
    batch = encode_visual_batch([regions(1)], P, cfg)
    (probs,) = batch.attention
    assert probs.shape == (2, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_identical_regions_permutation_leaves_summary():
    cfg = cfg4()
    P = random_params(cfg)
    r = regions(3, seed=1)
    swapped = [r[1], r[0], r[2]]
    twin = [r[0], r[0], r[2]]
    a = encode_visual(embed_visual(twin, P, cfg), P, cfg).summary.value
    b = encode_visual(embed_visual([twin[1], twin[0], twin[2]], P, cfg), P, cfg).summary.value
    np.testing.assert_array_equal(a, b)
    # a distinct permutation is also order-free for the summary (no positions in the visual stream)
    c = encode_visual(embed_visual(r, P, cfg), P, cfg).summary.value
    d = encode_visual(embed_visual(swapped, P, cfg), P, cfg).summary.value
    np.testing.assert_allclose(c, d, atol=1e-12)


def test_visual_hand_trace():
    cfg = cfg4()
    P = random_params(cfg, 1)
    r = regions(2, seed=2)
    got = encode_visual(embed_visual(r, P, cfg), P, cfg).hidden.value
    np.testing.assert_allclose(got, oracles.encode_visual(r, values(P)), atol=1e-12)


def test_textual_single_token_length():
    cfg = cfg4()
    assert encode_textual([7], random_params(cfg), cfg).hidden.shape == (2, 4)


def test_textual_position_sensitivity():
    cfg = cfg4()
    P = random_params(cfg)
    a = encode_textual([6, 7], P, cfg).hidden.value
    b = encode_textual([7, 6], P, cfg).hidden.value
    assert not np.allclose(a[1:], b[[2, 1]])


def test_textual_hand_trace():
    cfg = cfg4()
    P = random_params(cfg, 2)
    got = encode_textual([6, 8], P, cfg).hidden.value
    np.testing.assert_allclose(got, oracles.encode_textual([6, 8], values(P)), atol=1e-12)


def test_textual_out_of_vocab():
    cfg = cfg4()
    with pytest.raises(IndexError):
        encode_textual([9], random_params(cfg), cfg)
    with pytest.raises(DimensionError):
        encode_textual([6] * 17, random_params(cfg), cfg)


def test_packed_batch_equals_individual_sequences():
    cfg = cfg4(uni_heads=2)
    P = random_params(cfg, 3)
    rl = [regions(2, 4), regions(3, 5), regions(1, 6)]
    tl = [[6, 7, 8], [8], [7, 6]]
    vb = encode_visual_batch(rl, P, cfg)
    tb = encode_textual_batch(tl, P, cfg)
    for p in range(3):
        np.testing.assert_allclose(vb.state(p).hidden.value, encode_visual(embed_visual(rl[p], P, cfg), P, cfg).hidden.value, atol=1e-12)
        np.testing.assert_allclose(tb.state(p).hidden.value, encode_textual(tl[p], P, cfg).hidden.value, atol=1e-12)
    for probs in vb.attention + tb.attention:
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_encoder_gradients_end_to_end():
    cfg = cfg4(hidden=8, ffn=16, layers=2)
    P = random_params(cfg, 4)
    rl, tl = [regions(2, 7), regions(3, 8)], [[6, 7], [8, 6, 7]]
    w = E.constant(np.random.default_rng(0).normal(size=(8, 1)))

    def f():
        img = encode_visual_batch(rl, P, cfg).summaries()
        txt = encode_textual_batch(tl, P, cfg).summaries()
        return E.sum_all(E.matmul(E.tanh(img + txt), w))

    used = fd_params(P, ("vis.", "txt."))
    assert E.finite_difference_check(f, used, samples=40, step=1e-5) < 1e-4


# ----------------------------------------------------------------------------- prompts


def fd_params(P, prefixes):
    # key biases shift every score in a row equally, so their gradient is exactly
    # zero and a relative finite-difference error there only measures round-off
    return [p for k, p in sorted(P.items()) if k.startswith(prefixes) and not k.endswith(".attn.k.b")]


def states(m, n, H=4, seed=0):
    rng = np.random.default_rng(seed)
    return E.constant(rng.normal(size=(m, H))), E.constant(rng.normal(size=(n, H)))


def test_mask_changes_two_slots():
    hv, ht = states(3, 4)
    mask = E.constant(np.full((1, 4), 9.0))
    pr = mask_anchor(hv, ht, AnchorPoint(1, 2, "x"), mask)
    diff = (~np.all(pr.visual.value == hv.value, axis=1)).sum() + (~np.all(pr.textual.value == ht.value, axis=1)).sum()
    assert diff == 2


def test_zero_mask_embedding_gives_zero_rows():
    hv, ht = states(3, 4)
    pr = mask_anchor(hv, ht, AnchorPoint(0, 3, "x"), E.constant(np.zeros((1, 4))))
    assert not pr.visual.value[0].any() and not pr.textual.value[3].any()


def test_mask_is_idempotent():
    hv, ht = states(3, 4)
    mask = E.constant(np.ones((1, 4)))
    a = AnchorPoint(2, 1, "x")
    once = mask_anchor(hv, ht, a, mask)
    twice = mask_anchor(once.visual, once.textual, a, mask)
    np.testing.assert_array_equal(once.visual.value, twice.visual.value)
    np.testing.assert_array_equal(once.textual.value, twice.textual.value)


def test_mask_out_of_range():
    hv, ht = states(2, 2)
    with pytest.raises(ContractError):
        mask_anchor(hv, ht, AnchorPoint(2, 0, "x"), E.constant(np.ones((1, 4))))


def test_forced_swap_copies_bitwise():
    hv, ht = states(3, 4)
    a = AnchorPoint(1, 2, "x")
    pr = fill_swap(mask_anchor(hv, ht, a, E.constant(np.ones((1, 4)))), hv, ht, a, 0.99, swap_prob=1.0)
    assert pr.swapped
    assert np.array_equal(pr.visual.value[1], ht.value[2]) and np.array_equal(pr.textual.value[2], hv.value[1])
    assert pr.visual_origin[1] == FROM_TEXT and pr.textual_origin[2] == FROM_IMAGE


def test_never_swap_keeps_masked_prompt():
    hv, ht = states(3, 4)
    a = AnchorPoint(1, 2, "x")
    masked = mask_anchor(hv, ht, a, E.constant(np.ones((1, 4))))
    assert fill_swap(masked, hv, ht, a, 0.0, swap_prob=0.0) is masked


def test_swap_anchor_mismatch():
    hv, ht = states(3, 4)
    masked = mask_anchor(hv, ht, AnchorPoint(1, 2, "x"), E.constant(np.ones((1, 4))))
    with pytest.raises(ContractError):
        fill_swap(masked, hv, ht, AnchorPoint(0, 2, "x"), 0.1)


def test_swap_rate_concentration():
    hv, ht = states(2, 2)
    a = AnchorPoint(0, 1, "x")
    masked = mask_anchor(hv, ht, a, E.constant(np.ones((1, 4))))
    draws = np.random.default_rng(2024).random(10_000)
    rate = np.mean([fill_swap(masked, hv, ht, a, float(d)).swapped for d in draws])
    assert 0.58 <= rate <= 0.62


def test_exchange_is_involution():
    hv, ht = states(3, 2)
    pr = plain_prompt(hv, ht)
    pr.anchor = AnchorPoint(2, 0, "x")
    back = exchange_anchor_slots(exchange_anchor_slots(pr))
    np.testing.assert_array_equal(back.visual.value, hv.value)
    np.testing.assert_array_equal(back.textual.value, ht.value)
    assert back.visual_origin == pr.visual_origin and not back.swapped


def test_integrate_layout_small():
    cfg = cfg4()
    P = random_params(cfg)
    hv, ht = states(2, 3)
    hyb = integrate(plain_prompt(hv, ht), P, cfg)
    assert hyb.states.shape == (7, 4)
    assert hyb.slot_meta[0].modality == "cls" and hyb.slot_meta[3].modality == "sep"


def test_integrate_feature_only_when_other_fcs_zero():
    cfg = cfg4()
    P = random_params(cfg)
    for k in ("cmap.posfc.w", "cmap.posfc.b", "cmap.typefc.w", "cmap.typefc.b"):
        P[k].value[...] = 0.0
    hv, ht = states(2, 3)
    hyb = integrate(plain_prompt(hv, ht), P, cfg)
    rows = np.vstack([P["cmap.cls"].value, hv.value, P["cmap.sep"].value, ht.value])
    expected = oracles.layer_norm(rows @ P["cmap.feat.w"].value + P["cmap.feat.b"].value, P["cmap.ln.g"].value, P["cmap.ln.b"].value)
    np.testing.assert_allclose(hyb.states.value, expected, atol=1e-12)


@pytest.mark.parametrize("mode", [PLAIN, MASK, SWAP])
def test_integrate_hand_trace(mode):
    cfg = cfg4()
    P = random_params(cfg, 6)
    hv, ht = states(2, 3, seed=1)
    a = AnchorPoint(1, 0, "x")
    if mode == PLAIN:
        pr = plain_prompt(hv, ht)
    else:
        pr = mask_anchor(hv, ht, a, P["cmap.mask"])
        if mode == SWAP:
            pr = fill_swap(pr, hv, ht, a, 0.0, 1.0)
    got = integrate(pr, P, cfg).states.value
    np.testing.assert_allclose(got, oracles.hybrid(hv.value, ht.value, values(P), (1, 0), mode), atol=1e-12)


def check_layout(metas, m, n, mode, anchor):
    assert len(metas) == m + n + 2
    assert [s.position for s in metas] == list(range(m + n + 2))
    assert metas[0].type_id == TYPE_CLS and metas[m + 1].type_id == TYPE_SEP
    assert all(s.modality == "visual" for s in metas[1 : m + 1])
    assert all(s.modality == "textual" for s in metas[m + 2 :])
    changed = [k for k, s in enumerate(metas) if s.origin != NATIVE]
    if mode == PLAIN:
        assert changed == []
        return
    i, j = anchor
    assert changed == [1 + i, m + 2 + j]
    vs, ts = metas[1 + i], metas[m + 2 + j]
    if mode == SWAP:
        assert (vs.origin, vs.type_id) == (FROM_TEXT, TYPE_TEXTUAL)
        assert (ts.origin, ts.type_id) == (FROM_IMAGE, TYPE_VISUAL)
    else:
        assert vs.origin == ts.origin == MASKED
        assert (vs.type_id, ts.type_id) == (TYPE_VISUAL, TYPE_TEXTUAL)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data(), st.sampled_from([PLAIN, MASK, SWAP]))
def test_layout_invariants(m, n, data, mode):
    cfg = cfg4()
    P = init_params(cfg, 0)
    i, j = data.draw(st.integers(0, m - 1)), data.draw(st.integers(0, n - 1))
    hv, ht = states(m, n)
    a = AnchorPoint(i, j, "x")
    pr = plain_prompt(hv, ht) if mode == PLAIN else mask_anchor(hv, ht, a, P["cmap.mask"])
    if mode == SWAP:
        pr = fill_swap(pr, hv, ht, a, 0.0)
    hyb = integrate(pr, P, cfg)
    check_layout(hyb.slot_meta, m, n, mode, (i, j))
    if mode != PLAIN:
        assert hyb.anchor_slots == (1 + i, m + 2 + j)


def test_batched_hybrid_matches_single():
    cfg = cfg4()
    P = random_params(cfg, 7)
    rl, tl = [regions(2, 1), regions(3, 2), regions(1, 3)], [[6, 7, 8], [8, 6], [7]]
    specs = [PromptSpec(AnchorPoint(1, 2, "x"), SWAP), PromptSpec(AnchorPoint(0, 1, "y"), MASK), PromptSpec()]
    vb, tb = encode_visual_batch(rl, P, cfg), encode_textual_batch(tl, P, cfg)
    hb = build_hybrid_batch(vb, tb, specs, P, cfg)
    for p, spec in enumerate(specs):
        hv, ht = vb.state(p).tokens, tb.state(p).tokens
        if spec.mode == PLAIN:
            pr = plain_prompt(hv, ht)
        else:
            pr = mask_anchor(hv, ht, spec.anchor, P["cmap.mask"])
            if spec.mode == SWAP:
                pr = fill_swap(pr, hv, ht, spec.anchor, 0.0)
        single = integrate(pr, P, cfg)
        lo = hb.starts[p]
        np.testing.assert_allclose(hb.states.value[lo : lo + single.states.shape[0]], single.states.value, atol=1e-13)
        assert hb.metas[p] == single.slot_meta


# ----------------------------------------------------------------------------- interaction and heads


def test_interact_hand_trace():
    cfg = cfg4(layers=1, heads=2)
    P = random_params(cfg, 8)
    hv, ht = states(1, 1, seed=3)
    hyb = integrate(plain_prompt(hv, ht), P, cfg)
    out = interact(hyb, P, cfg)
    ref = oracles.interact(hyb.states.value, values(P), 1, 2)
    np.testing.assert_allclose(out.all_states.value, ref, atol=1e-12)
    assert out.all_states.shape == (4, 4)


def test_interact_zero_residual_is_final_norm():
    cfg = cfg4(layers=2)
    P = random_params(cfg, 9)
    for k, p in P.items():
        if k.startswith("cmai.") and (".attn." in k or ".ffn" in k):
            p.value[...] = 0.0
    x = E.constant(np.random.default_rng(0).normal(size=(5, 4)))
    out = interact_rows(x, np.zeros(5, dtype=int), P, cfg).value
    np.testing.assert_allclose(out, oracles.layer_norm(x.value, P["cmai.ln_f.g"].value, P["cmai.ln_f.b"].value), atol=1e-12)


def test_anchor_states_read_from_slot_meta():
    cfg = cfg4()
    P = random_params(cfg, 10)
    hv, ht = states(2, 3)
    a = AnchorPoint(0, 1, "x")
    hyb = integrate(fill_swap(mask_anchor(hv, ht, a, P["cmap.mask"]), hv, ht, a, 0.0), P, cfg)
    out = interact(hyb, P, cfg)
    vis_slot = next(k for k, s in enumerate(hyb.slot_meta) if s.origin == FROM_TEXT)
    txt_slot = next(k for k, s in enumerate(hyb.slot_meta) if s.origin == FROM_IMAGE)
    assert (vis_slot, txt_slot) == out.anchor_slots == (1, 5)
    assert np.array_equal(out.anchor_visual_state.value[0], out.all_states.value[vis_slot])
    assert np.array_equal(out.anchor_textual_state.value[0], out.all_states.value[txt_slot])
    assert np.array_equal(out.cls_state.value[0], out.all_states.value[0])


def test_interact_relabel_equivariance():
    cfg = cfg4()
    P = random_params(cfg, 11)
    x = E.constant(np.random.default_rng(1).normal(size=(7, 4)))
    seg = np.array([0, 0, 0, 1, 1, 1, 1])
    a = interact_rows(x, seg, P, cfg).value
    b = interact_rows(x, 5 - seg, P, cfg).value
    np.testing.assert_array_equal(a, b)


def test_word_head_zero_weights_gives_bias():
    cfg = cfg4()
    P = random_params(cfg)
    P["head.word.fc2.w"].value[...] = 0.0
    h = E.constant(np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal(predict_word(h, P, cfg).value, np.tile(P["head.word.fc2.b"].value, (3, 1)))
    probs = E.softmax_rows(predict_word(h, random_params(cfg), cfg)).value
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_word_head_hand_trace():
    cfg = cfg4(vocab_size=6)
    P = random_params(cfg, 12)
    h = np.random.default_rng(2).normal(size=(2, 4))
    np.testing.assert_allclose(predict_word(E.constant(h), P, cfg).value, oracles.word_logits(h, values(P)), atol=1e-12)


def test_region_head_trio():
    cfg = cfg4()
    P = random_params(cfg, 13)
    h = np.random.default_rng(3).normal(size=(2, 4))
    np.testing.assert_allclose(predict_region(E.constant(h), P).value, oracles.region_logits(h, values(P)), atol=1e-12)
    np.testing.assert_allclose(E.softmax_rows(predict_region(E.constant(h), P)).value.sum(axis=1), 1.0, atol=1e-9)
    P["head.region.w"].value[...] = 0.0
    np.testing.assert_array_equal(predict_region(E.constant(h), P).value, np.tile(P["head.region.b"].value, (2, 1)))


def test_itm_score_cases():
    cfg = cfg4()
    P = random_params(cfg, 14)
    h = np.random.default_rng(4).normal(size=(3, 4))
    expected = 1.0 / (1.0 + np.exp(-(h @ P["head.itm.w"].value + P["head.itm.b"].value)))
    np.testing.assert_allclose(itm_score(E.constant(h), P).value, expected, atol=1e-14)
    P["head.itm.w"].value[...] = 0.0
    P["head.itm.b"].value[...] = 0.0
    np.testing.assert_array_equal(itm_score(E.constant(h), P).value, 0.5)
    P["head.itm.b"].value[...] = 30.0
    out = itm_score(E.constant(h), P).value
    assert np.all(np.abs(out - 1.0) < 1e-9) and np.all(out < 1.0 + 1e-15)


def test_vtc_similarity_cases():
    rows = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    S = vtc_similarity(E.constant(rows), E.constant(rows)).value
    np.testing.assert_array_equal(S, np.eye(2))
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    S = vtc_similarity(E.constant(a), E.constant(b)).value
    ref = np.array([[oracles.cosine(x, y) for y in b] for x in a])
    np.testing.assert_allclose(S, ref, atol=1e-12)
    assert np.all(np.abs(S) <= 1 + 1e-9)
    assert np.all(np.isfinite(vtc_similarity(E.constant(np.zeros((2, 3))), E.constant(a[:2, :3])).value))


def test_interaction_gradients_end_to_end():
    cfg = ModelConfig(d_v=3, hidden=8, ffn=16, heads=2, layers=2, max_len=16, vocab_size=9, num_tags=5)
    P = random_params(cfg, 15, scale=0.4)
    hv, ht = states(2, 3, H=8, seed=4)
    a = AnchorPoint(1, 2, "x")

    def f():
        pr = fill_swap(mask_anchor(hv, ht, a, P["cmap.mask"]), hv, ht, a, 0.0)
        out = interact(integrate(pr, P, cfg), P, cfg)
        return E.cross_entropy_logits(predict_word(out.anchor_visual_state, P, cfg), [4])

    used = fd_params(P, ("cmai.", "cmap.", "head.word"))
    assert E.finite_difference_check(f, used, samples=40, step=1e-5) < 1e-4

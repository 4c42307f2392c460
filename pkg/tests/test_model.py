import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from azlab import tensor as T
from azlab.model import (IDENTITY_SPEC, ModelConfig, Zone, ZoneSpec,
                         as_leaves, attention_layer, attention_probs, best_across_windows,
                         encode, init_params, layer_params, padding_mask, predict_span,
                         span_logits, zone_mask)
from azlab.text import Feature, Vocab, RESERVED, make_layout
from azlab.trainer import Checkpoint

ZONES4 = (Zone.Q2, Zone.Q2P, Zone.P2Q, Zone.P2)


def random_layout(r, max_len=24):
    q = int(r.integers(0, 6))
    p = int(r.integers(1, 10))
    n = q + p + 3 + int(r.integers(0, 5))
    return make_layout(q, p, min(max(n, q + p + 3), max_len + q + p))


def dropped(mask):
    return {tuple(c) for c in np.argwhere(mask < 0)}


def random_feature(r, q=None, p=None, pad=None, vocab_size=20):
    q = int(r.integers(0, 5)) if q is None else q
    p = int(r.integers(1, 8)) if p is None else p
    pad = int(r.integers(0, 4)) if pad is None else pad
    n = q + p + 3 + pad
    layout = make_layout(q, p, n)
    ids = [2] + list(r.integers(4, vocab_size, q)) + [3] + list(r.integers(4, vocab_size, p)) \
        + [3] + [0] * pad
    segs = [0] * (q + 2) + [1] * (p + 1) + [0] * pad
    p0 = layout.passage_range[0]
    return Feature("x", 0, [int(i) for i in ids], segs, layout,
                   {p0 + i: (3 * i, 3 * i + 2) for i in range(p)})


def tiny_checkpoint(seed=0, n_layers=2, vocab_size=20, n=24):
    vocab = Vocab(list(RESERVED) + [f"t{i}" for i in range(vocab_size - 4)])
    cfg = ModelConfig(vocab_size=vocab_size, n_layers=n_layers, n_heads=2, d_model=8, d_ff=16,
                      max_positions=n)
    params = init_params(cfg, seed)
    # larger weights than the 0.02 init so masking effects are far above rounding
    params = {k: v * 20 if v.ndim == 2 else v for k, v in params.items()}
    return Checkpoint(cfg, params, vocab)


# ---------------------------------------------------------------- zone masks

def test_q2_block_cells():
    lay = make_layout(0, 1, 4)  # cls=0, sep1=1 | passage=2, sep2=3
    assert dropped(zone_mask(lay, Zone.Q2)) == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_four_zones_cover_small_layout():
    lay = make_layout(0, 1, 4)
    sets = [dropped(zone_mask(lay, z)) for z in ZONES4]
    assert set().union(*sets) == set(itertools.product(range(4), range(4)))
    assert sum(len(s) for s in sets) == 16


def test_none_zone_is_all_zero():
    assert not zone_mask(make_layout(2, 3, 10), Zone.NONE).any()


def test_zone_parse():
    assert Zone.parse("P2Q") is Zone.P2Q
    with pytest.raises(ValueError):
        Zone.parse("q3")


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zone_partition_property(seed):
    lay = random_layout(np.random.default_rng(seed))
    masks = [zone_mask(lay, z) for z in ZONES4]
    total = sum(masks)
    assert (total == zone_mask(lay, Zone.ALL)).all()
    sets = [dropped(m) for m in masks]
    for a, b in itertools.combinations(sets, 2):
        assert not a & b
    non_pad = lay.pad_range[0]
    assert set().union(*sets) == set(itertools.product(range(non_pad), range(non_pad)))


def test_zone_spec_validation():
    with pytest.raises(ValueError):
        ZoneSpec(-1, Zone.Q2)
    with pytest.raises(ValueError):
        ZoneSpec(4, Zone.Q2).check(4)
    assert ZoneSpec(None, Zone.Q2).applies_to(3)
    assert not ZoneSpec(1, Zone.Q2).applies_to(0)
    assert not IDENTITY_SPEC.applies_to(0)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, n_layers=0)


# ---------------------------------------------------------------- attention layer

def layer_setup(seed=0, n=9, d=8, heads=2):
    r = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=10, n_layers=1, n_heads=heads, d_model=d, d_ff=16)
    params = {k: v * 30 if v.ndim == 2 else v for k, v in init_params(cfg, seed).items()}
    leaves = as_leaves(params)
    x = T.Tensor(r.standard_normal((n, d)))
    lay = make_layout(2, 4, n)  # question block 0..3, passage block 4..8, no pad
    return layer_params(leaves, 0), x, lay, cfg


def test_none_zone_is_bit_identical_to_unmasked():
    p, x, lay, cfg = layer_setup()
    a = attention_layer(x, p, None, padding_mask(lay), cfg.n_heads)
    b = attention_layer(x, p, zone_mask(lay, Zone.NONE), padding_mask(lay), cfg.n_heads)
    assert a.data.tobytes() == b.data.tobytes()


def test_all_zone_leaves_only_residual_path():
    p, x, lay, cfg = layer_setup()
    out = attention_layer(x, p, zone_mask(lay, Zone.ALL), padding_mask(lay), cfg.n_heads)
    # attention output is zero, so the sublayer sees x + output bias only
    h = T.layer_norm(T.add(x, T.Tensor(np.broadcast_to(p["attn.output.bias"].data, x.shape))),
                     p["attn.ln.gamma"], p["attn.ln.beta"])
    ff = T.linear(T.gelu(T.linear(h, p["ffn.in.weight"], p["ffn.in.bias"])),
                  p["ffn.out.weight"], p["ffn.out.bias"])
    expected = T.layer_norm(T.add(h, ff), p["ffn.ln.gamma"], p["ffn.ln.beta"])
    assert np.allclose(out.data, expected.data, rtol=0, atol=1e-12)


def _probs(p, x, lay, zone, heads):
    mask = (zone_mask(lay, zone) + padding_mask(lay)[None, :])[None]
    probs, _ = attention_probs(T.reshape(x, (1,) + x.shape), p, mask, heads)
    return probs.data[0]


@pytest.mark.parametrize("zone", ZONES4 + (Zone.ALL,))
def test_masking_changes_only_that_zones_rows(zone):
    p, x, lay, cfg = layer_setup(seed=3)
    base = _probs(p, x, lay, Zone.NONE, cfg.n_heads)
    masked = _probs(p, x, lay, zone, cfg.n_heads)
    rows = set(np.argwhere(zone_mask(lay, zone) < 0)[:, 0])
    for i in range(lay.length):
        same = np.array_equal(base[:, i], masked[:, i])
        assert same == (i not in rows), i


def test_masking_q2_leaves_passage_rows_unchanged():
    p, x, lay, cfg = layer_setup(seed=5)
    base = _probs(p, x, lay, Zone.NONE, cfg.n_heads)
    masked = _probs(p, x, lay, Zone.Q2, cfg.n_heads)
    pb = lay.passage_block
    assert np.array_equal(base[:, pb.start:pb.stop], masked[:, pb.start:pb.stop])
    assert not np.array_equal(base[:, :pb.start], masked[:, :pb.start])


def test_attention_layer_shape_errors():
    p, x, lay, cfg = layer_setup()
    with pytest.raises(ValueError):
        attention_layer(T.Tensor(np.zeros((9, 7))), p, None, None, cfg.n_heads)


# ---------------------------------------------------------------- encode

def test_encode_spec_behaviour():
    ck = tiny_checkpoint()
    f = random_feature(np.random.default_rng(1), q=3, p=5, pad=2)
    base = encode(f, ck, IDENTITY_SPEC).data
    assert encode(f, ck, ZoneSpec(0, Zone.NONE)).data.tobytes() == base.tobytes()
    assert not np.array_equal(encode(f, ck, ZoneSpec(0, Zone.Q2)).data, base)


def test_every_layer_equals_composing_each_layer():
    ck = tiny_checkpoint(n_layers=3)
    f = random_feature(np.random.default_rng(2), q=2, p=6, pad=1)
    every = encode(f, ck, ZoneSpec(None, Zone.P2)).data
    # manual forward with the mask injected into every layer
    leaves = as_leaves(ck.params)
    from azlab.model import encode_batch
    single = encode_batch(leaves, ck.config, [f], ZoneSpec(0, Zone.P2)).data[0]
    assert not np.array_equal(single, every)
    ids = np.array([f.input_ids])
    x = T.add(T.add(T.embedding(leaves["embeddings.word"], ids),
                    T.embedding(leaves["embeddings.position"], np.arange(len(f.input_ids))[None])),
              T.embedding(leaves["embeddings.segment"], np.array([f.segment_ids])))
    x = T.layer_norm(x, leaves["embeddings.ln.gamma"], leaves["embeddings.ln.beta"])
    for i in range(3):
        x = attention_layer(x, layer_params(leaves, i), zone_mask(f.layout, Zone.P2)[None],
                            padding_mask(f.layout)[None], ck.config.n_heads)
    assert x.data[0].tobytes() == every.tobytes()


def test_encode_rejects_out_of_vocab_id():
    ck = tiny_checkpoint()
    f = random_feature(np.random.default_rng(0), q=1, p=2, pad=0)
    f.input_ids[1] = 999
    with pytest.raises(ValueError, match="out of range"):
        encode(f, ck)


def test_encode_rejects_bad_layer():
    ck = tiny_checkpoint(n_layers=2)
    f = random_feature(np.random.default_rng(0), q=1, p=2, pad=0)
    with pytest.raises(ValueError):
        encode(f, ck, ZoneSpec(2, Zone.Q2))


def test_encode_is_deterministic():
    ck = tiny_checkpoint()
    f = random_feature(np.random.default_rng(4))
    spec = ZoneSpec(1, Zone.P2Q)
    assert encode(f, ck, spec).data.tobytes() == encode(f, ck, spec).data.tobytes()


# ---------------------------------------------------------------- span head

def test_zero_head_gives_equal_passage_logits():
    f = random_feature(np.random.default_rng(0), q=2, p=5, pad=2)
    hidden = T.Tensor(np.random.default_rng(1).standard_normal((f.layout.length, 8)))
    from azlab.model import passage_logit_mask
    s, e = span_logits(hidden, T.Tensor(np.zeros((8, 2))), T.Tensor(np.zeros(2)),
                       passage_logit_mask(f.layout))
    p0, p1 = f.layout.passage_range
    assert len(set(s.data[p0:p1])) == 1
    preds = predict_span(s.data, e.data, f, "x" * 40)
    assert (preds[0].start, preds[0].end) == (p0, p0)


def test_hand_set_head_picks_token():
    f = random_feature(np.random.default_rng(0), q=2, p=6, pad=0)
    n = f.layout.length
    hidden = np.zeros((n, 3))
    hidden[5, 0] = 1.0
    w = np.zeros((3, 2))
    w[0, 0] = 10.0
    from azlab.model import passage_logit_mask
    s, e = span_logits(T.Tensor(hidden), T.Tensor(w), T.Tensor(np.zeros(2)),
                       passage_logit_mask(f.layout))
    assert int(np.argmax(s.data)) == 5
    p0, p1 = f.layout.passage_range
    assert np.isfinite(s.data[p0:p1]).all()
    outside = [i for i in range(n) if not p0 <= i < p1]
    assert (s.data[outside] == T.NEG_INF).all()


# ---------------------------------------------------------------- predict_span

def brute_force(start, end, feature, max_len):
    p0, p1 = feature.layout.passage_range
    pairs = [(start[s] + end[e], s, e) for s in range(p0, p1) for e in range(s, p1)
             if e - s < max_len]
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(s, e) for _, s, e in pairs]


def test_predict_peaks():
    f = random_feature(np.random.default_rng(0), q=1, p=8, pad=0)
    n = f.layout.length
    s, e = np.zeros(n), np.zeros(n)
    s[3 + 1], e[5 + 1] = 5.0, 5.0  # p0 == 3 with one question token
    assert f.layout.passage_range[0] == 3
    best = predict_span(s, e, f, "abcdefghijklmnopqrstuvwxyz" * 2, max_answer_length=10)[0]
    assert (best.start, best.end) == (4, 6)
    assert best.text == ("abcdefghijklmnopqrstuvwxyz" * 2)[f.token_to_orig[4][0]:f.token_to_orig[6][1]]


def test_predict_all_equal_logits_tie_rule():
    f = random_feature(np.random.default_rng(0), q=2, p=4, pad=1)
    n = f.layout.length
    best = predict_span(np.ones(n), np.ones(n), f, "x" * 20)[0]
    p0 = f.layout.passage_range[0]
    assert (best.start, best.end) == (p0, p0)


def test_predict_rejects_bad_arguments():
    f = random_feature(np.random.default_rng(0))
    n = f.layout.length
    with pytest.raises(ValueError):
        predict_span(np.zeros(n), np.zeros(n), f, "", max_answer_length=0)


def test_predict_matches_brute_force_small():
    r = np.random.default_rng(9)
    f = random_feature(r, q=2, p=6, pad=0)
    n = f.layout.length
    s, e = r.standard_normal(n), r.standard_normal(n)
    got = [(p.start, p.end) for p in predict_span(s, e, f, "x" * 40, 4, n_best=100)]
    assert got == brute_force(s, e, f, 4)


def test_best_across_windows():
    from azlab.model import SpanPrediction
    a = SpanPrediction("a", 3, 3, 1.0, 0)
    b = SpanPrediction("b", 4, 4, 2.0, 1)
    c = SpanPrediction("c", 3, 3, 2.0, 2)
    assert best_across_windows([a, b, c]) is b

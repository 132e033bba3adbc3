"""Fusion encoder: mask construction, modality isolation, causality, decoding."""

import itertools

import numpy as np
import pytest

from uvlp import autodiff as ad
from uvlp import nn
from uvlp.autodiff import Tensor
from uvlp.fusion import (FusionConfig, FusionEncoder, MaskKind, beam_decode,
                         build_mask, build_masks, decode_step, greedy_decode)
from uvlp.gradcheck import max_rel_error
from uvlp.text import DEC, EOS

from oracles import mask_allows


# -- mask fixtures ----------------------------------------------------------------


def test_unimodal_mask_is_block_diagonal():
    allow = build_mask(MaskKind.UNIMODAL, 2, np.array([True, True]))
    want = np.array([
        [1, 1, 0, 0],
        [1, 1, 0, 0],
        [0, 0, 1, 1],
        [0, 0, 1, 1],
    ], dtype=bool)
    assert np.array_equal(allow, want)


def test_multimodal_causal_fixture():
    allow = build_mask(MaskKind.MULTIMODAL_CAUSAL, 1, np.array([True] * 3))
    assert allow[0].tolist() == [True, False, False, False]   # query row
    assert allow[1].tolist() == [True, True, False, False]    # text position 0
    assert allow[3].tolist() == [True, True, True, True]      # text position 2


def test_bidirectional_pad_column_disallowed():
    allow = build_mask(MaskKind.BIDIRECTIONAL, 2, np.array([True, True, False]))
    assert np.all(~allow[:, 4])
    keep = np.delete(allow, 4, axis=1)
    assert np.all(keep)


def test_unimodal_pad_column_disallowed():
    allow = build_mask(MaskKind.UNIMODAL, 2, np.array([True, False]))
    assert not allow[:, 3].any()
    assert np.array_equal(allow[2:, 2], np.array([True, True]))


def test_build_mask_matches_independent_rule():
    patterns = {1: [[True]], 3: [[True] * 3, [True, True, False]]}
    for kind, l_q, l_t in itertools.product(MaskKind, (1, 2), (1, 3)):
        for valid in patterns[l_t]:
            allow = build_mask(kind, l_q, np.array(valid))
            s = l_q + l_t
            for i in range(s):
                for j in range(s):
                    assert allow[i, j] == mask_allows(kind.value, l_q, valid, i, j)


def test_build_masks_batching_and_mixed_kinds():
    valid = np.array([[True, True], [True, False]])
    stacked = build_masks(MaskKind.UNIMODAL, 2, valid)
    assert stacked.shape == (2, 4, 4)
    assert np.array_equal(stacked[0], build_mask(MaskKind.UNIMODAL, 2, valid[0]))
    mixed = build_masks([MaskKind.UNIMODAL, MaskKind.BIDIRECTIONAL], 2, valid)
    assert np.array_equal(mixed[1], build_mask(MaskKind.BIDIRECTIONAL, 2, valid[1]))
    with pytest.raises(ValueError):
        build_masks([MaskKind.UNIMODAL], 2, valid)


# -- encoder behavior --------------------------------------------------------------


@pytest.fixture()
def enc_setup(rng):
    cfg = FusionConfig(l_q=2, d_q=16, num_blocks=2, num_heads=2,
                       cross_attn_every=1, l_t=6, vocab_size=20, d_v=16)
    enc = FusionEncoder(cfg, np.random.default_rng(1))
    kv = Tensor(rng.normal(size=(2, 5, 16)))
    ids = np.array([[3, 7, 9, 11, 6, 8], [3, 9, 9, 0, 0, 0]], dtype=np.int64)
    valid = ids != 0
    return cfg, enc, kv, ids, valid


def test_unimodal_queries_ignore_text(enc_setup):
    cfg, enc, kv, ids, valid = enc_setup
    out_a = enc(ids, valid, kv, MaskKind.UNIMODAL)
    other = ids.copy()
    other[:, 1:] = np.array([[12, 13, 14, 15, 16], [14, 0, 0, 0, 0]])
    out_b = enc(other, other != 0, kv, MaskKind.UNIMODAL)
    assert np.array_equal(out_a.f_q.data, out_b.f_q.data)
    assert not np.array_equal(out_a.f_t.data, out_b.f_t.data)


def test_causal_rows_before_perturbation_unchanged(enc_setup):
    cfg, enc, kv, ids, _ = enc_setup
    ids = ids[:1]
    base = enc(ids, ids != 0, kv[:1], MaskKind.MULTIMODAL_CAUSAL)
    for k in range(1, cfg.l_t):
        bumped = ids.copy()
        bumped[0, k] = 5 if ids[0, k] != 5 else 4  # stay non-PAD
        out = enc(bumped, bumped != 0, kv[:1], MaskKind.MULTIMODAL_CAUSAL)
        assert np.array_equal(out.f_t.data[:, :k], base.f_t.data[:, :k])
        assert not np.array_equal(out.f_t.data[:, k], base.f_t.data[:, k])
        assert np.array_equal(out.f_q.data, base.f_q.data)


def test_zero_visual_equals_self_attention_only_path(enc_setup):
    cfg, enc, _, ids, valid = enc_setup
    zero_kv = Tensor(np.zeros((2, 5, 16)))
    with_zero = enc(ids, valid, zero_kv, MaskKind.UNIMODAL)
    without = enc(ids, valid, None, MaskKind.UNIMODAL)
    assert np.array_equal(with_zero.f_q.data, without.f_q.data)
    assert np.array_equal(with_zero.f_t.data, without.f_t.data)


def test_recorded_attention_respects_masks(enc_setup):
    cfg, enc, kv, ids, valid = enc_setup
    for kind in MaskKind:
        record = []
        enc(ids, valid, kv, kind, record_attn=record)
        allow = build_masks(kind, cfg.l_q, valid)
        assert len(record) == cfg.num_blocks
        for probs in record:
            assert probs.shape == (2, cfg.num_heads, 8, 8)
            assert np.all(probs[~np.broadcast_to(allow[:, None], probs.shape)] == 0.0)
            assert np.allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_mixed_kind_batch_matches_separate_passes(enc_setup):
    cfg, enc, kv, ids, valid = enc_setup
    kinds = [MaskKind.UNIMODAL, MaskKind.MULTIMODAL_CAUSAL]
    mixed = enc(ids, valid, kv, kinds)
    uni = enc(ids[:1], valid[:1], kv[:1], MaskKind.UNIMODAL)
    cau = enc(ids[1:], valid[1:], kv[1:], MaskKind.MULTIMODAL_CAUSAL)
    assert np.allclose(mixed.f_q.data[0], uni.f_q.data[0], rtol=1e-12, atol=1e-13)
    assert np.allclose(mixed.f_t.data[1], cau.f_t.data[0], rtol=1e-12, atol=1e-13)


def test_encoder_rejects_wrong_text_length(enc_setup):
    cfg, enc, kv, ids, valid = enc_setup
    with pytest.raises(ValueError):
        enc(ids[:, :4], valid[:, :4], kv, MaskKind.UNIMODAL)


def test_parameters_have_single_storage(enc_setup):
    _, enc, _, _, _ = enc_setup
    params = dict(enc.named_parameters())
    assert len({id(p) for p in params.values()}) == len(params)
    assert len({id(p.data) for p in params.values()}) == len(params)


def test_views_share_weights(enc_setup):
    # the causal generator view and the contrastive view are one module:
    # an in-place weight change must show up under every mask regime
    cfg, enc, kv, ids, valid = enc_setup
    before_uni = enc(ids, valid, kv, MaskKind.UNIMODAL).f_t.data
    before_cau = enc(ids, valid, kv, MaskKind.MULTIMODAL_CAUSAL).f_t.data
    enc.word_embed.weight.data[ids[0, 1]] += 0.5
    after_uni = enc(ids, valid, kv, MaskKind.UNIMODAL).f_t.data
    after_cau = enc(ids, valid, kv, MaskKind.MULTIMODAL_CAUSAL).f_t.data
    assert not np.array_equal(before_uni, after_uni)
    assert not np.array_equal(before_cau, after_cau)


def test_fusion_gradients_match_finite_differences(rng):
    cfg = FusionConfig(l_q=2, d_q=8, num_blocks=1, num_heads=2,
                       cross_attn_every=1, l_t=4, vocab_size=12, d_v=8)
    enc = FusionEncoder(cfg, np.random.default_rng(2))
    kv = Tensor(rng.normal(size=(2, 3, 8)))
    ids = np.array([[3, 7, 9, 0], [3, 5, 0, 0]], dtype=np.int64)
    valid = ids != 0
    wq = Tensor(rng.normal(size=(2, 2, 8)))
    wt = Tensor(rng.normal(size=(2, 4, 8)))

    def fn():
        out = enc(ids, valid, kv, MaskKind.MULTIMODAL_CAUSAL)
        return ad.add(ad.sum_(ad.mul(out.f_q, wq)), ad.sum_(ad.mul(out.f_t, wt)))

    params = [p for _, p in enc.named_parameters()]
    err = max_rel_error(fn, params)
    assert err < 1e-4, f"max relative error {err:.3e}"


# -- decoding ----------------------------------------------------------------------


@pytest.fixture()
def dec_setup(rng):
    cfg = FusionConfig(l_q=2, d_q=16, num_blocks=2, num_heads=2,
                       cross_attn_every=1, l_t=6, vocab_size=20, d_v=16)
    enc = FusionEncoder(cfg, np.random.default_rng(4))
    head = nn.Linear(16, 20, np.random.default_rng(5))
    head.weight.data[:] = np.random.default_rng(6).normal(size=(16, 20))
    kv = Tensor(rng.normal(size=(2, 5, 16)))
    return cfg, enc, head, kv


def test_decode_step_distribution_normalized(dec_setup):
    cfg, enc, head, kv = dec_setup
    ids = np.array([[DEC, 7, 9, 0, 0, 0], [DEC, 8, 0, 0, 0, 0]], dtype=np.int64)
    probs = decode_step(enc, head, ids, ids != 0, kv)
    assert probs.shape == (2, 20)
    assert np.all(probs >= 0.0)
    assert np.allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-6)


def test_decode_step_pad_append_is_noop(dec_setup):
    from uvlp.fusion import _pad_prefixes

    cfg, enc, head, kv = dec_setup
    ids_a, valid_a = _pad_prefixes([[DEC, 7, 9]], cfg.l_t)
    ids_b, valid_b = _pad_prefixes([[DEC, 7, 9, 0]], cfg.l_t)
    base = decode_step(enc, head, ids_a, valid_a, kv[:1])
    assert np.array_equal(base, decode_step(enc, head, ids_b, valid_b, kv[:1]))
    # garbage in a position marked invalid must not leak into the output
    ids_c = ids_a.copy()
    ids_c[0, 4] = 9
    assert np.array_equal(base, decode_step(enc, head, ids_c, valid_a, kv[:1]))


def test_greedy_decode_is_deterministic(dec_setup):
    cfg, enc, head, kv = dec_setup
    a = greedy_decode(enc, head, kv)
    b = greedy_decode(enc, head, kv)
    assert a == b
    for seq in a:
        assert seq[0] == DEC
        assert len(seq) <= cfg.l_t
        assert seq[-1] == EOS or len(seq) == cfg.l_t


def test_beam_width_one_equals_greedy(dec_setup):
    cfg, enc, head, kv = dec_setup
    kv1 = Tensor(kv.data[:1])
    assert beam_decode(enc, head, kv1, width=1) == greedy_decode(enc, head, kv1)[0]


def test_beam_decode_rejects_batches(dec_setup):
    cfg, enc, head, kv = dec_setup
    with pytest.raises(ValueError):
        beam_decode(enc, head, kv, width=2)


def test_beam_decode_prefers_higher_logprob(dec_setup):
    cfg, enc, head, kv = dec_setup
    kv1 = Tensor(kv.data[:1])
    best = beam_decode(enc, head, kv1, width=3, max_len=4)
    assert best[0] == DEC and len(best) <= 4

from pathlib import Path

import numpy as np
import pytest

from dubkit.errors import InvalidArgument
from dubkit.isochrony import IsochronyTrack
from dubkit.numerics import SeededRng, layer_norm, logsumexp, softmax
from dubkit.rvq import CodeSequence, FeatureSequence
from dubkit.toy_model import (
    ToyDims,
    VocabLayout,
    attention,
    cross_memory,
    decoder_logprobs,
    encode_acoustic,
    init_toy_model,
    joint_scorer_step,
    nar_input_embeddings,
    nar_layer_logits,
    named_arrays,
    parameter_count,
    pool_acoustic_embedding,
    rebuild,
)

GOLDEN = Path(__file__).parent / "data" / "nar_logits_seed5_layer3.txt"


@pytest.fixture(scope="module")
def models():
    return init_toy_model(3)


def feats(seed, n, d=64):
    return FeatureSequence(SeededRng(seed).normal(n * d).reshape(n, d))


def codes(seed, layers, frames, c=16):
    return CodeSequence(SeededRng(seed).integers(c, layers * frames).reshape(layers, frames), c)


# ---------------------------------------------------------------- vocabulary


def test_vocab_layout():
    v = VocabLayout(5, 7)
    assert (v.sep_id, v.codec_base, v.eos_id, v.size) == (5, 6, 13, 14)
    kinds = [v.is_text(t) + 2 * (t == v.sep_id) + 4 * v.is_codec(t) + 8 * (t == v.eos_id) for t in range(v.size)]
    assert all(k in (1, 2, 4, 8) for k in kinds)


def test_bad_dims_rejected():
    with pytest.raises(InvalidArgument):
        ToyDims(d_model=30, n_heads=4)
    with pytest.raises(InvalidArgument):
        ToyDims(n_text=0)


# ---------------------------------------------------------------- init


def test_same_seed_same_weights():
    a, _ = init_toy_model(7)
    b, _ = init_toy_model(7)
    c, _ = init_toy_model(8)
    assert a.sem_in_w[0, 0] == b.sem_in_w[0, 0]
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(named_arrays(a), named_arrays(b)))
    assert not np.array_equal(a.sem_in_w, c.sem_in_w)


def test_weights_are_float32_exact(models):
    for _, arr in named_arrays(models[0]):
        assert np.array_equal(arr, arr.astype(np.float32).astype(np.float64))


def test_parameter_count_by_hand(models):
    joint, nar = models
    d, ff, f, h = 32, 64, 64, 2
    v = 8 + 16 + 2
    ln = 2 * d
    attn = 4 * d * d
    ffn = d * ff + ff + ff * d + d
    enc_block = ln + attn + ln + ffn
    dec_block = ln + attn + ln + attn + ln + ffn
    joint_want = (
        (f * d + d) + h * enc_block + ln  # semantic encoder
        + (f * d + d) + 2 * enc_block + ln  # acoustic encoder
        + 2 * 128 * d + 2 * d  # isochrony tables
        + v * d + d  # token table and start vector
        + 2 * dec_block + ln + (d * v + v)
    )
    ada = 2 * (d * d + d)
    nar_want = 16 * 16 * d + 16 * d + 2 * (ada + attn + ada + ffn) + ada + (d * 16 + 16)
    assert parameter_count(joint) == joint_want == 73146
    assert parameter_count(nar) == nar_want == 36368


def test_rebuild_roundtrip(models):
    joint, nar = models
    dims = joint.dims
    again = rebuild("nar", dims, [a.copy() for _, a in named_arrays(nar)])
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(named_arrays(nar), named_arrays(again)))
    with pytest.raises(InvalidArgument):
        rebuild("nar", dims, [])


# ---------------------------------------------------------------- acoustic pooling


def test_single_frame_pool_is_that_frame(models):
    joint = models[0]
    f = feats(1, 1)
    assert np.array_equal(pool_acoustic_embedding(f, joint), encode_acoustic(f, joint)[0])


def test_pool_matches_loop_oracle(models):
    joint = models[0]
    f = feats(2, 5)
    enc = encode_acoustic(f, joint)
    want = np.zeros(32)
    for t in range(5):
        want = want + enc[t]
    assert np.allclose(pool_acoustic_embedding(f, joint), want, atol=1e-10, rtol=0)


def test_pool_permutation_symmetric_without_positions():
    dims = ToyDims(n_acoustic_blocks=1, acoustic_positions=False)
    joint, _ = init_toy_model(4, dims)
    # attention-only: zero the feed-forward so the block is attention plus residual
    blk = joint.ac_blocks[0]
    for arr in (blk.ffn.w1, blk.ffn.w2):
        arr[...] = 0
    f = feats(3, 6)
    perm = FeatureSequence(f.frames[[3, 0, 5, 1, 4, 2]])
    assert np.allclose(pool_acoustic_embedding(f, joint), pool_acoustic_embedding(perm, joint), atol=1e-12)


def test_empty_prompt_rejected(models):
    with pytest.raises(InvalidArgument):
        pool_acoustic_embedding(FeatureSequence(np.zeros((0, 64))), models[0])


# ---------------------------------------------------------------- joint scorer


def test_memory_lengths(models):
    joint = models[0]
    assert cross_memory(feats(4, 7), None, joint).shape == (7, 32)
    assert cross_memory(feats(4, 7), IsochronyTrack([1, 0, 1]), joint).shape == (10, 32)


def test_step_is_log_distribution(models):
    joint = models[0]
    lp = joint_scorer_step([1, 2, joint.layout.sep_id, 10], feats(5, 4), IsochronyTrack([1, 1]), None, joint)
    assert lp.shape == (joint.layout.size,)
    assert abs(logsumexp(lp)) < 1e-9


def test_all_positions_are_log_distributions(models):
    joint = models[0]
    toks = SeededRng(6).integers(joint.layout.size, 4 * 9).reshape(4, 9)
    lp = decoder_logprobs(toks, cross_memory(feats(6, 5), None, joint), None, joint)
    assert lp.shape == (4, 10, joint.layout.size)
    assert np.all(np.abs(logsumexp(lp)) < 1e-9)


def test_acoustic_injection_is_observable(models):
    joint = models[0]
    sep = joint.layout.sep_id
    sem = feats(7, 4)
    without = joint_scorer_step([0, sep], sem, None, None, joint)
    with_zero = joint_scorer_step([0, sep], sem, None, np.zeros(32), joint)
    assert not np.array_equal(without, with_zero)


def test_prefix_before_sep_ignores_acoustic(models):
    joint = models[0]
    sep = joint.layout.sep_id
    mem = cross_memory(feats(8, 4), IsochronyTrack([1, 0]), joint)
    seq = np.array([1, 3, sep, 12, 14])
    a = decoder_logprobs(seq, mem, None, joint)
    b = decoder_logprobs(seq, mem, SeededRng(9).normal(32), joint)
    assert np.array_equal(a[:3], b[:3])
    assert not np.array_equal(a[3:], b[3:])


def test_causality_by_probing(models):
    joint = models[0]
    mem = cross_memory(feats(10, 3), None, joint)
    base = np.array([1, 2, 3, 4, 5, 6])
    ref = decoder_logprobs(base, mem, None, joint)
    for t in range(6):
        probe = base.copy()
        probe[t] = (probe[t] + 7) % joint.layout.size
        out = decoder_logprobs(probe, mem, None, joint)
        # row i sees tokens[:i], so rows 0..t are unaffected
        assert np.array_equal(out[: t + 1], ref[: t + 1])


def test_batched_equals_single(models):
    joint = models[0]
    mem = cross_memory(feats(11, 3), None, joint)
    toks = SeededRng(12).integers(joint.layout.size, 15).reshape(3, 5)
    batch = decoder_logprobs(toks, mem, None, joint)
    for i in range(3):
        assert np.allclose(batch[i], decoder_logprobs(toks[i], mem, None, joint), atol=1e-12)


def test_bad_token_rejected(models):
    joint = models[0]
    with pytest.raises(InvalidArgument):
        joint_scorer_step([joint.layout.size], feats(13, 2), None, None, joint)


def test_attention_matches_loop():
    from dubkit.toy_model import Attention

    r = SeededRng(14)
    d = 4
    p = Attention(*[r.normal(d * d).reshape(d, d) for _ in range(4)])
    xq, xkv = r.normal(2 * d).reshape(2, d), r.normal(3 * d).reshape(3, d)
    got = attention(xq, xkv, p, 1)
    q, k, v = xq @ p.wq, xkv @ p.wk, xkv @ p.wv
    want = np.array([softmax(q[i] @ k.T / 2.0) @ v for i in range(2)]) @ p.wo
    assert np.allclose(got, want, atol=1e-12)


def test_layer_norm_rows():
    x = SeededRng(15).normal(8).reshape(2, 4)
    y = layer_norm(x, np.ones(4), np.zeros(4))
    assert np.allclose(y.mean(axis=1), 0, atol=1e-12)


# ---------------------------------------------------------------- NAR predictor


def test_nar_logits_golden():
    _, nar = init_toy_model(5)
    r = SeededRng(5, 1)
    c = CodeSequence(r.integers(16, 18).reshape(3, 6), 16)
    prompt = CodeSequence(r.integers(16, 64).reshape(16, 4), 16)
    got = nar_layer_logits(c, prompt, 3, nar)
    assert np.allclose(got, np.loadtxt(GOLDEN), atol=1e-6, rtol=0)


def test_nar_shape_and_empty_prompt(models):
    nar = models[1]
    c = codes(16, 2, 5)
    empty = CodeSequence(np.zeros((16, 0), dtype=np.int64), 16)
    assert nar_layer_logits(c, empty, 2, nar).shape == (5, 16)
    assert nar_layer_logits(c, codes(17, 16, 3), 2, nar).shape == (5, 16)


def test_adding_a_layer_adds_its_embeddings(models):
    nar = models[1]
    c = codes(18, 3, 5)
    prompt = codes(19, 16, 2)
    two = nar_input_embeddings(c, prompt, 2, nar)
    three = nar_input_embeddings(c, prompt, 3, nar)
    assert np.allclose(three[2:] - two[2:], nar.code_emb[2][c.codes[2]], atol=1e-12)
    assert np.array_equal(three[:2], two[:2])


def test_layer_index_range_checked(models):
    nar = models[1]
    c = codes(20, 16, 3)
    prompt = codes(21, 16, 2)
    for bad in (0, 16):
        with pytest.raises(InvalidArgument):
            nar_layer_logits(c, prompt, bad, nar)
    with pytest.raises(InvalidArgument):
        nar_layer_logits(c, codes(22, 15, 2), 3, nar)


def test_layer_conditioning_non_degenerate():
    distinct = 0
    for seed in range(100):
        _, nar = init_toy_model(seed, ToyDims(n_codebooks=4))
        # zero layer 1's table so layer indices 1 and 2 see identical input sums
        nar.code_emb[1][...] = 0
        c = codes(seed, 2, 4)
        prompt = codes(seed + 1000, 4, 2)
        assert np.array_equal(nar_input_embeddings(c, prompt, 1, nar), nar_input_embeddings(c, prompt, 2, nar))
        a = nar_layer_logits(c, prompt, 1, nar)
        b = nar_layer_logits(c, prompt, 2, nar)
        distinct += not np.array_equal(a, b)
    assert distinct >= 99


def test_nar_deterministic(models):
    nar = models[1]
    c, prompt = codes(23, 2, 4), codes(24, 16, 2)
    assert np.array_equal(nar_layer_logits(c, prompt, 1, nar), nar_layer_logits(c, prompt, 1, nar))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dubkit.errors import InvalidArgument
from dubkit.numerics import (
    AdaLnParams,
    SeededRng,
    ada_layer_norm,
    categorical_sample,
    categorical_sample_rows,
    gelu,
    inverse_cdf,
    layer_norm,
    log_softmax,
    logsumexp,
    normalize,
    sinusoidal_positions,
    softmax,
    top_k_rows,
    top_k_select,
)

finite = st.floats(-50, 50, allow_nan=False)


# ---------------------------------------------------------------- rng


def test_same_seed_and_stream_repeat():
    a = SeededRng(42, 3).next_u64(16)
    b = SeededRng(42, 3).next_u64(16)
    assert np.array_equal(a, b)


def test_streams_and_seeds_differ():
    base = SeededRng(42).uniform(8)
    assert not np.array_equal(base, SeededRng(43).uniform(8))
    assert not np.array_equal(base, SeededRng(42, 1).uniform(8))


M64 = (1 << 64) - 1


def _splitmix(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


def _reference_draws(seed, stream, n):
    key = _splitmix(seed ^ _splitmix(stream ^ 0xD1B54A32D192ED03))
    return [_splitmix((key + (i + 1) * 0x9E3779B97F4A7C15) & M64) for i in range(n)]


def test_frozen_first_draws():
    want = [18234092126783654676, 17376767606553080, 12734645227322977365]
    assert SeededRng(0).next_u64(3).tolist() == want
    assert _reference_draws(0, 0, 3) == want


@given(st.integers(0, M64), st.integers(0, M64))
@settings(max_examples=50)
def test_draws_match_pure_python_reference(seed, stream):
    assert SeededRng(seed, stream).next_u64(4).tolist() == _reference_draws(seed, stream, 4)


def test_split_rule_matches_reference():
    child = _splitmix((3 * 0x9E3779B97F4A7C15 + 5 + 1) & M64)
    assert SeededRng(11, 3).split(5).next_u64(2).tolist() == _reference_draws(11, child, 2)


def test_counter_advances_like_one_long_draw():
    r = SeededRng(7)
    a = np.concatenate([r.uniform(3), r.uniform(5)])
    assert np.array_equal(a, SeededRng(7).uniform(8))


def test_split_ignores_parent_and_sibling_draws():
    r = SeededRng(9)
    before = r.split(2).uniform(4)
    r.uniform(100)
    r.split(1).uniform(50)
    assert np.array_equal(before, r.split(2).uniform(4))


@given(st.integers(0, 2**64 - 1), st.lists(st.integers(0, 10_000), min_size=1, max_size=6), st.integers(1, 9))
@settings(max_examples=40, deadline=None)
def test_split_uniform_matches_split(seed, indices, n):
    r = SeededRng(seed, 5)
    want = np.array([r.split(i).uniform(n) for i in indices])
    assert np.array_equal(r.split_uniform(indices, n), want)


def test_uniform_range_and_moments():
    u = SeededRng(1).uniform(100_000)
    assert u.min() >= 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.005


def test_normal_moments():
    z = SeededRng(2).normal(100_000)
    assert np.all(np.isfinite(z))
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_integers_cover_range():
    x = SeededRng(3).integers(5, 10_000)
    assert set(x.tolist()) == {0, 1, 2, 3, 4}


def test_bad_seed_rejected():
    with pytest.raises(InvalidArgument):
        SeededRng(-1)


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)
    assert np.allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)
    assert np.allclose(softmax([1000.0, 1000.0]), [0.5, 0.5], atol=1e-15)


def test_softmax_empty_rejected():
    with pytest.raises(InvalidArgument):
        softmax([])
    with pytest.raises(InvalidArgument):
        log_softmax(np.zeros((3, 0)))


@given(st.lists(finite, min_size=1, max_size=20), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(xs, c):
    x = np.array(xs)
    p = softmax(x)
    assert abs(p.sum() - 1) <= 1e-12
    assert np.allclose(softmax(x + c), p, atol=1e-12, rtol=0)


@given(st.lists(finite, min_size=1, max_size=20))
def test_log_softmax_is_log_of_softmax(xs):
    x = np.array(xs)
    lp = log_softmax(x)
    assert np.allclose(np.exp(lp), softmax(x), atol=1e-12)
    assert abs(logsumexp(lp)) < 1e-12


# ---------------------------------------------------------------- top-k


def test_top_k_examples():
    assert top_k_select([0.1, 0.5, 0.3], 2).tolist() == [1, 2]
    assert top_k_select([0.5, 0.5, 0.1], 1).tolist() == [0]
    assert top_k_select([0.2], 5).tolist() == [0]


def test_top_k_zero_rejected():
    with pytest.raises(InvalidArgument):
        top_k_select([1.0], 0)
    with pytest.raises(InvalidArgument):
        top_k_rows(np.zeros((2, 2)), 0)


@given(st.lists(st.integers(-3, 3).map(float), min_size=1, max_size=12), st.integers(1, 14), st.integers(0, 4))
def test_top_k_order_and_neg_inf_padding(xs, k, pad):
    got = top_k_select(xs, k)
    want = sorted(range(len(xs)), key=lambda i: (-xs[i], i))[:k]
    assert got.tolist() == want
    padded = xs + [-math.inf] * pad
    assert top_k_select(padded, min(k, len(xs))).tolist() == want[: min(k, len(xs))]


def test_top_k_rows_matches_per_row():
    s = SeededRng(4).integers(4, 30).reshape(5, 6).astype(float)
    rows = top_k_rows(s, 3)
    for i in range(5):
        assert rows[i].tolist() == top_k_select(s[i], 3).tolist()


# ---------------------------------------------------------------- sampling


def test_point_mass_always_zero():
    for seed in range(20):
        assert categorical_sample([1.0, 0.0, 0.0], SeededRng(seed)) == 0


def test_sample_is_deterministic_and_uses_one_draw():
    r1, r2 = SeededRng(5, 1), SeededRng(5, 1)
    assert categorical_sample([0.2, 0.3, 0.5], r1) == categorical_sample([0.2, 0.3, 0.5], r2)
    assert r1.counter == 1


def test_sample_frequency():
    r = SeededRng(6)
    draws = categorical_sample_rows(np.tile([0.25, 0.75], (100_000, 1)), r)
    assert abs(np.mean(draws == 1) - 0.75) <= 0.01


def test_eight_bucket_frequencies():
    p = softmax(SeededRng(7).normal(8))
    draws = categorical_sample_rows(np.tile(p, (100_000, 1)), SeededRng(8))
    freq = np.bincount(draws, minlength=8) / 100_000
    assert np.all(np.abs(freq - p) <= 0.01)


def test_inverse_cdf_skips_zero_mass():
    p = np.array([[0.5, 0.5, 0.0]])
    assert inverse_cdf(p, np.array([0.999999999])).tolist() == [1]
    assert inverse_cdf(np.array([[0.0, 1.0]]), np.array([0.0])).tolist() == [1]


def test_bad_probabilities_rejected():
    with pytest.raises(InvalidArgument):
        categorical_sample([1.5, -0.5], SeededRng(0))
    with pytest.raises(InvalidArgument):
        categorical_sample([0.3, 0.3], SeededRng(0))


# ---------------------------------------------------------------- layer norm


def _scalar_ada_ln(x, cond, p, eps=1e-5):
    d = len(x)
    mu = sum(x) / d
    var = sum((v - mu) ** 2 for v in x) / d
    out = []
    for j in range(d):
        scale = p.scale_b[j] + sum(cond[i] * p.scale_w[i][j] for i in range(len(cond)))
        shift = p.shift_b[j] + sum(cond[i] * p.shift_w[i][j] for i in range(len(cond)))
        out.append((1 + scale) * (x[j] - mu) / math.sqrt(var + eps) + shift)
    return out


def test_ada_ln_matches_scalar_loop():
    r = SeededRng(10)
    p = AdaLnParams(r.normal(12).reshape(3, 4), r.normal(4), r.normal(12).reshape(3, 4), r.normal(4))
    x, cond = r.normal(4), r.normal(3)
    assert np.allclose(ada_layer_norm(x, cond, p), _scalar_ada_ln(x.tolist(), cond.tolist(), p), atol=1e-10, rtol=0)


def test_ada_ln_zero_maps_is_plain_layer_norm():
    x = SeededRng(11).normal(6)
    out = ada_layer_norm(x, np.zeros(3), AdaLnParams.zeros(3, 6))
    assert np.array_equal(out, layer_norm(x, np.ones(6), np.zeros(6)))


def test_constant_row_normalizes_to_zero():
    assert np.array_equal(normalize(np.full(5, 3.0)), np.zeros(5))


def test_ada_ln_output_moments():
    r = SeededRng(12)
    p = AdaLnParams(np.zeros((2, 8)), np.full(8, 0.5), np.zeros((2, 8)), np.full(8, -1.0))
    x = r.normal(8)
    y = ada_layer_norm(x, r.normal(2), p)
    # scale and shift are constant across features here, so they set the moments
    assert abs(y.mean() + 1.0) < 1e-8
    assert abs(np.var(y) - 1.5**2 * np.var(normalize(x))) < 1e-8


def test_ada_ln_dimension_mismatch():
    with pytest.raises(InvalidArgument):
        ada_layer_norm(np.zeros(5), np.zeros(3), AdaLnParams.zeros(3, 4))
    with pytest.raises(InvalidArgument):
        ada_layer_norm(np.zeros(4), np.zeros(2), AdaLnParams.zeros(3, 4))


def test_positions_and_gelu():
    pe = sinusoidal_positions(3, 4)
    assert np.allclose(pe[0], [0, 1, 0, 1])
    assert np.allclose(sinusoidal_positions(2, 4, offset=1), pe[1:])
    with pytest.raises(InvalidArgument):
        sinusoidal_positions(2, 3)
    assert gelu(np.array([0.0]))[0] == 0.0
    assert abs(gelu(np.array([10.0]))[0] - 10.0) < 1e-9

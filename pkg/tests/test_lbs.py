from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from dubkit.errors import InvalidArgument
from dubkit.lbs import (
    LbsBeamEntry,
    LbsConfig,
    exhaustive_nar_oracle,
    greedy_generate,
    layer_logprobs,
    lbs_generate,
    lbs_search,
    lbs_step,
    score_codes,
)
from dubkit.numerics import SeededRng
from dubkit.rvq import CodeSequence
from dubkit.selftest import nar_instance


def test_bad_config():
    for kw in (dict(beam_size=0), dict(n_sample=0), dict(top_k=0), dict(n_codebook=0)):
        with pytest.raises(InvalidArgument):
            LbsConfig(**kw)


def test_one_codebook_returns_input():
    inst = nar_instance(0, 6, 16, 4)
    out = lbs_generate(inst.first, inst.prompt, inst.model, LbsConfig(n_codebook=1))
    assert np.array_equal(out.codes, inst.first.codes)


def test_first_layer_must_be_single():
    inst = nar_instance(0, 4, 16, 4)
    two = CodeSequence(np.zeros((2, 4), dtype=np.int64), 16)
    with pytest.raises(InvalidArgument):
        lbs_generate(two, inst.prompt, inst.model, LbsConfig(n_codebook=3))


def test_greedy_matches_scan_oracle():
    inst = nar_instance(1, 5, 16, 4)
    got = greedy_generate(inst.first, inst.prompt, inst.model, 4)
    codes = inst.first
    for layer in range(1, 4):
        lp = layer_logprobs(codes, inst.prompt, layer, inst.model)
        row = [max(range(16), key=lambda c: (lp[t][c], -c)) for t in range(5)]
        codes = CodeSequence(np.vstack([codes.codes, row]), 16)
    assert np.array_equal(got.codes, codes.codes)


@pytest.mark.parametrize("seed", range(5))
def test_degenerate_settings_equal_greedy(seed):
    inst = nar_instance(seed, 8, 16, 4)
    cfg = LbsConfig(4, 1, 1, 1, seed)
    assert np.array_equal(lbs_generate(inst.first, inst.prompt, inst.model, cfg).codes, greedy_generate(inst.first, inst.prompt, inst.model, 4).codes)


def test_step_count_and_shapes():
    inst = nar_instance(2, 4, 16, 16)
    calls = []
    import dubkit.lbs as lbs

    orig = lbs.lbs_step

    def counting(*a, **k):
        calls.append(a[1])
        return orig(*a, **k)

    lbs.lbs_step = counting
    try:
        beam = lbs_search(inst.first, inst.prompt, inst.model, LbsConfig(16, 3, 4, 3, 2))
    finally:
        lbs.lbs_step = orig
    assert calls == list(range(1, 16))
    assert len(beam) == 3 and all(e.codes.n_layers == 16 for e in beam)


def test_beam_sorted_and_scores_consistent():
    inst = nar_instance(3, 5, 16, 4)
    beam = lbs_search(inst.first, inst.prompt, inst.model, LbsConfig(4, 4, 6, 3, 3))
    scores = [e.total_score for e in beam]
    assert scores == sorted(scores, reverse=True)
    for e in beam:
        assert abs(e.total_score - score_codes(e.codes, inst.prompt, inst.model)) <= 1e-9
        assert np.array_equal(e.codes.codes[0], inst.first.codes[0])


def test_sampled_tokens_stay_in_top_k():
    inst = nar_instance(4, 6, 16, 2)
    cfg = LbsConfig(2, 5, 10, 2, 4)
    beam = lbs_step([LbsBeamEntry(inst.first, 0.0)], 1, inst.prompt, inst.model, cfg, SeededRng(4).split(1))
    lp = layer_logprobs(inst.first, inst.prompt, 1, inst.model)
    top2 = np.argsort(-lp, axis=1, kind="stable")[:, :2]
    for e in beam:
        for t, tok in enumerate(e.codes.codes[1]):
            assert tok in top2[t]


def test_deterministic_and_executor_invariant():
    inst = nar_instance(5, 6, 16, 6)
    cfg = LbsConfig(6, 4, 5, 3, 11)
    a = lbs_search(inst.first, inst.prompt, inst.model, cfg)
    b = lbs_search(inst.first, inst.prompt, inst.model, cfg)
    with ThreadPoolExecutor(4) as ex:
        c = lbs_search(inst.first, inst.prompt, inst.model, cfg, ex)
    for x, y, z in zip(a, b, c):
        assert np.array_equal(x.codes.codes, y.codes.codes) and np.array_equal(x.codes.codes, z.codes.codes)
        assert x.total_score == y.total_score == z.total_score


def test_seed_changes_samples():
    inst = nar_instance(6, 8, 16, 4)
    outs = {lbs_generate(inst.first, inst.prompt, inst.model, LbsConfig(4, 2, 3, 3, s)).codes.tobytes() for s in range(6)}
    assert len(outs) > 1


def test_empty_beam_rejected():
    inst = nar_instance(7, 3, 16, 2)
    with pytest.raises(InvalidArgument):
        lbs_step([], 1, inst.prompt, inst.model, LbsConfig(2), SeededRng(0))


@pytest.mark.parametrize("seed", range(4))
def test_oracle_bounds_search(seed):
    inst = nar_instance(seed, 4, 5, 2)
    codes, best = exhaustive_nar_oracle(inst.first, inst.prompt, inst.model, 2)
    assert abs(best - score_codes(codes, inst.prompt, inst.model)) <= 1e-9
    found = lbs_search(inst.first, inst.prompt, inst.model, LbsConfig(2, 10, 50, 5, seed))[0]
    assert found.total_score <= best + 1e-9


def test_three_layer_oracle_matches_brute_force():
    inst = nar_instance(8, 2, 3, 3)
    codes, best = exhaustive_nar_oracle(inst.first, inst.prompt, inst.model, 3)
    brute = max(
        score_codes(CodeSequence(np.vstack([inst.first.codes, [a, b], [c, d]]), 3), inst.prompt, inst.model)
        for a in range(3) for b in range(3) for c in range(3) for d in range(3)
    )
    assert abs(best - brute) <= 1e-12
    assert abs(score_codes(codes, inst.prompt, inst.model) - best) <= 1e-12


def test_oracle_refuses_large_space():
    inst = nar_instance(9, 8, 16, 2)
    with pytest.raises(InvalidArgument):
        exhaustive_nar_oracle(inst.first, inst.prompt, inst.model, 2)

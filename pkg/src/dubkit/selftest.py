"""Seeded toy instances and a quick run of every independent oracle check."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Utterance, build_example_asr, build_example_s2st, expected_masked_count, sample_prompt_region
from .fileio import codec_from_bytes, codec_to_bytes, codes_from_bytes, codes_to_bytes, model_from_bytes, model_to_bytes
from .isochrony import IsochronyTrack, IsoEmbeddings, build_icm_features, slc, vad_frames, window_rms
from .joint_decoder import BeamConfig, beam_search_joint, count_joint_sequences, enumerate_joint_oracle
from .lbs import LbsConfig, exhaustive_nar_oracle, greedy_generate, lbs_generate, lbs_search
from .numerics import SeededRng, log_softmax, softmax, top_k_select
from .rvq import CodeSequence, FeatureSequence, RvqConfig, decode, distillation_loss, encode, fit_codebooks
from .toy_model import JointScorer, NarPredictor, ToyDims, VocabLayout, init_toy_model, pool_acoustic_embedding

INSTANCE_STREAM = 99
JOINT_STREAM = 7


@dataclass
class NarInstance:
    model: NarPredictor
    first: CodeSequence
    prompt: CodeSequence


def nar_instance(seed: int, n_frames: int, codebook_size: int, n_codebooks: int, prompt_frames: int = 3) -> NarInstance:
    """Random toy NAR model with a random first layer and a random all-layer prompt."""
    dims = ToyDims(codebook_size=codebook_size, n_codebooks=n_codebooks)
    _, nar = init_toy_model(seed, dims)
    r = SeededRng(seed, INSTANCE_STREAM)
    first = CodeSequence(r.integers(codebook_size, n_frames)[None, :], codebook_size)
    prompt = CodeSequence(r.integers(codebook_size, prompt_frames * n_codebooks).reshape(n_codebooks, prompt_frames), codebook_size)
    return NarInstance(nar, first, prompt)


@dataclass
class JointInstance:
    scorer: JointScorer
    semantic: FeatureSequence
    iso: IsochronyTrack
    acoustic: np.ndarray


def joint_instance(seed: int, n_text: int = 3, codebook_size: int = 4) -> JointInstance:
    """Random toy joint scorer with random semantic input, VAD track and prompt."""
    dims = ToyDims(n_text=n_text, codebook_size=codebook_size, n_codebooks=4)
    joint, _ = init_toy_model(seed, dims)
    r = SeededRng(seed, JOINT_STREAM)
    f = dims.feature_dim
    semantic = FeatureSequence(r.normal(6 * f).reshape(6, f))
    iso = IsochronyTrack(r.integers(2, 3))
    acoustic = pool_acoustic_embedding(FeatureSequence(r.normal(5 * f).reshape(5, f)), joint)
    return JointInstance(joint, semantic, iso, acoustic)


def random_utterance(rng: SeededRng, n_text: int, codebook_size: int, feature_dim: int = 8) -> Utterance:
    n_tok = int(rng.integers(6, 1)[0])
    n_codes = 1 + int(rng.integers(40, 1)[0])
    return Utterance(
        tuple(int(t) for t in rng.integers(n_text, n_tok)),
        FeatureSequence(rng.normal(n_codes * feature_dim).reshape(n_codes, feature_dim)),
        CodeSequence(rng.integers(codebook_size, n_codes)[None, :], codebook_size),
    )


# -------------------------------------------------------------------- checks


def _rng_check():
    a = SeededRng(5).split(3).uniform(8)
    b = SeededRng(5).split_uniform([3], 8)[0]
    c = SeededRng(5).split(4).uniform(8)
    return np.array_equal(a, b) and not np.array_equal(a, c), "split streams reproducible and distinct"


def _softmax_check():
    r = SeededRng(1)
    x = r.normal(50) * 30
    ok = abs(softmax(x).sum() - 1) < 1e-12 and abs(np.logaddexp.reduce(log_softmax(x))) < 1e-12
    return ok and list(top_k_select([1.0, 3.0, 3.0, 2.0], 2)) == [1, 2], "normalization and stable top-k"


def _lbs_degenerate():
    hits = 0
    for s in range(10):
        inst = nar_instance(s, 8, 16, 4)
        g = greedy_generate(inst.first, inst.prompt, inst.model, 4)
        l = lbs_generate(inst.first, inst.prompt, inst.model, LbsConfig(4, 1, 1, 1, s))
        hits += g == l
    return hits == 10, f"{hits}/10 equal to greedy"


def _lbs_oracle():
    hits, bounded = 0, True
    for s in range(10):
        inst = nar_instance(s, 4, 5, 2)
        _, best = exhaustive_nar_oracle(inst.first, inst.prompt, inst.model, 2)
        got = lbs_search(inst.first, inst.prompt, inst.model, LbsConfig(2, 10, 200, 5, s))[0].total_score
        bounded &= got <= best + 1e-12
        hits += abs(got - best) <= 1e-9
    return hits >= 9 and bounded, f"{hits}/10 attain oracle"


def _joint_oracle():
    hits = 0
    cfg_limits = BeamConfig(max_text_len=2, max_codec_frames=2)
    for s in range(3):
        inst = joint_instance(s)
        total = count_joint_sequences(inst.scorer.layout, cfg_limits)
        cfg = BeamConfig(beam_size=total, max_text_len=2, max_codec_frames=2)
        top = beam_search_joint(inst.semantic, inst.iso, inst.acoustic, inst.scorer, cfg)[0]
        text, codes, score = enumerate_joint_oracle(inst.semantic, inst.iso, inst.acoustic, inst.scorer, cfg)
        layout = inst.scorer.layout
        hits += top.text(layout) == text and top.codes(layout) == codes and abs(top.joint_logp - score) <= 1e-9
    return hits == 3, f"{hits}/3 match enumeration"


def _rvq_capacity():
    r = SeededRng(11)
    x = FeatureSequence(r.normal(16 * 16).reshape(16, 16))
    codec = fit_codebooks(x, RvqConfig(1, 16, 16, 16), 10, r.split(1))
    err = float(np.max(np.abs(decode(encode(x, codec), codec).frames - x.frames)))
    return err <= 1e-6, f"max roundtrip error {err:.2e}"


def _distill_zero():
    r = SeededRng(12)
    x = FeatureSequence(r.normal(40 * 16).reshape(40, 16))
    codec = fit_codebooks(x, RvqConfig(2, 8, 16, 4), 5, r.split(1))
    codes = encode(x, codec)
    loss = distillation_loss(codes, codec, decode(codes, codec, 1)).total
    return loss <= 1e-12, f"loss {loss:.1e}"


def _icm_oracle():
    r = SeededRng(13)
    tables = IsoEmbeddings.random(20, 6, r)
    track = IsochronyTrack(r.integers(2, 17))
    got = build_icm_features(track, tables).frames
    want = np.array([tables.pos[i] + tables.rpos[track.n_frames - 1 - i] + tables.vad[track.vad[i]] for i in range(track.n_frames)])
    return float(np.max(np.abs(got - want))) <= 1e-12, "matches triple lookup"


def _slc_oracle():
    r = SeededRng(14)
    src = 0.5 + r.uniform(100) * 5
    gen = src * (0.5 + r.uniform(100))
    ok = True
    for p in (0.2, 0.4):
        count = sum(1 for a, b in zip(src, gen) if (1 - p) - 1e-12 <= b / a <= (1 + p) + 1e-12)
        ok &= slc(src, gen, p) == count / 100
    ok &= slc([1.0], [1.3], 0.2) == 0.0 and slc([1.0], [1.3], 0.4) == 1.0
    return ok, "counting oracle and 1.3 ratio"


def _vad_oracle():
    t = np.arange(16000) / 16000
    pcm = np.concatenate([np.round(16000 * np.sin(2 * np.pi * 440 * t)), np.zeros(16000)]).astype(np.int16)
    rms = [math.sqrt(sum((s / 32768.0) ** 2 for s in pcm[i : i + 2560].tolist()) / 2560) for i in range(0, 32000, 2560)]
    pad_last = pcm.size % 2560 != 0
    want = [int(v > max(max(rms) * 0.01, 1e-4)) for v in rms]
    got = vad_frames(pcm).tolist()
    return got == want and len(got) == 13 and pad_last and np.allclose(window_rms(pcm), rms), f"bits {''.join(map(str, got))}"


def _mask_counts():
    layout = VocabLayout(8, 16)
    r = SeededRng(15)
    ok = True
    for i in range(40):
        rr = r.split(i)
        src, tgt = random_utterance(rr, 8, 16), random_utterance(rr, 8, 16)
        if i % 2:
            region = sample_prompt_region(src.codes.n_frames, rr)
            ex = build_example_asr(src, region, layout)
            ok &= bool(np.all(ex.loss_mask[: len(src.tokens)] == 0))
            n_text = len(src.tokens)
        else:
            region = sample_prompt_region(tgt.codes.n_frames, rr)
            ex = build_example_s2st(src, tgt, region, "fwd", layout)
            n_text = len(tgt.tokens)
        ok &= int(np.sum(ex.loss_mask == 0)) == expected_masked_count(ex.kind, n_text, region)
    return ok, "40 random examples"


def _file_roundtrip():
    r = SeededRng(16)
    x = FeatureSequence(r.normal(30 * 16).reshape(30, 16))
    codec = fit_codebooks(x, RvqConfig(2, 8, 16, 4), 3, r.split(1))
    b1 = codec_to_bytes(codec)
    codes = encode(x, codec)
    c1 = codes_to_bytes(codes)
    m1 = model_to_bytes(*init_toy_model(3))
    ok = codec_to_bytes(codec_from_bytes(b1)) == b1 and codes_to_bytes(codes_from_bytes(c1)) == c1
    return ok and model_to_bytes(*model_from_bytes(m1)) == m1, "codec, codes and model bytes"


CHECKS: list[tuple[str, Callable]] = [
    ("rng_streams", _rng_check),
    ("softmax_topk", _softmax_check),
    ("lbs_degenerate_greedy", _lbs_degenerate),
    ("lbs_exhaustive_oracle", _lbs_oracle),
    ("joint_enumeration_oracle", _joint_oracle),
    ("rvq_capacity", _rvq_capacity),
    ("distillation_zero", _distill_zero),
    ("icm_lookup_oracle", _icm_oracle),
    ("slc_counting_oracle", _slc_oracle),
    ("vad_energy_oracle", _vad_oracle),
    ("loss_mask_counts", _mask_counts),
    ("file_roundtrip", _file_roundtrip),
]


def run_selftest(emit: Callable[[str], None] = print) -> bool:
    all_ok = True
    for name, check in CHECKS:
        try:
            ok, detail = check()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= bool(ok)
        emit(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok

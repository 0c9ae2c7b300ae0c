"""Layer beam search over the non-autoregressive predictor.

Each step fills one RVQ layer for every position at once. For every beam
entry the layer's log-probabilities are computed, each position is
restricted to its top-K logits, and ``n_sample`` complete layer fillings are
drawn by per-position sampling from the softmax over those K logits. A
candidate is scored by the mean over positions of its full-vocabulary
log-probability, added to its parent's accumulated score, and the best
``beam_size`` of all ``B * n_sample`` candidates form the next beam.
"""

from __future__ import annotations

import itertools
from concurrent.futures import Executor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .numerics import SeededRng, inverse_cdf, log_softmax, softmax, top_k_rows
from .rvq import CodeSequence
from .toy_model import NarPredictor, nar_layer_logits


@dataclass(frozen=True)
class LbsConfig:
    n_codebook: int = 16
    beam_size: int = 10
    n_sample: int = 20
    top_k: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.beam_size < 1 or self.n_sample < 1 or self.top_k < 1 or self.n_codebook < 1:
            raise InvalidArgument("beam_size, n_sample, top_k and n_codebook must be >= 1")


@dataclass
class LbsBeamEntry:
    codes: CodeSequence
    total_score: float


def _check_first(first_layer: CodeSequence):
    if first_layer.n_layers != 1:
        raise InvalidArgument("first_layer must hold exactly one layer")


def _with_layer(codes: CodeSequence, layer: np.ndarray) -> CodeSequence:
    return CodeSequence(np.vstack([codes.codes, layer[None, :]]), codes.codebook_size, codes.token_rate_hz)


def layer_logprobs(codes: CodeSequence, prompt: CodeSequence, layer: int, model: NarPredictor) -> np.ndarray:
    return log_softmax(nar_layer_logits(codes, prompt, layer, model))


def greedy_generate(first_layer: CodeSequence, prompt: CodeSequence, model: NarPredictor, n_codebook: int) -> CodeSequence:
    _check_first(first_layer)
    codes = first_layer
    for layer in range(1, n_codebook):
        logits = nar_layer_logits(codes, prompt, layer, model)
        codes = _with_layer(codes, np.argmax(logits, axis=1))
    return codes


def score_codes(codes: CodeSequence, prompt: CodeSequence, model: NarPredictor, n_codebook: int | None = None) -> float:
    """Accumulated per-layer mean log-probability of layers ``1..n_codebook-1``."""
    n_codebook = codes.n_layers if n_codebook is None else n_codebook
    total = 0.0
    pos = np.arange(codes.n_frames)
    for layer in range(1, n_codebook):
        lp = layer_logprobs(codes.layers(layer), prompt, layer, model)
        total += float(np.mean(lp[pos, codes.codes[layer]]))
    return total


def _expand(entry: LbsBeamEntry, b: int, layer: int, prompt, model, cfg: LbsConfig, rng: SeededRng):
    lp = layer_logprobs(entry.codes, prompt, layer, model)
    ids = top_k_rows(lp, cfg.top_k)
    pos = np.arange(lp.shape[0])
    probs = softmax(lp[pos[:, None], ids])
    # draws of child stream b * n_sample + s, one uniform per position
    u = rng.split_uniform(np.arange(cfg.n_sample) + b * cfg.n_sample, lp.shape[0])
    picks = inverse_cdf(probs[None, :, :], u)
    sampled = ids[pos[None, :], picks]
    scores = entry.total_score + np.mean(lp[pos[None, :], sampled], axis=1)
    return [(float(scores[s]), sampled[s]) for s in range(cfg.n_sample)]


def lbs_step(
    beam: list[LbsBeamEntry],
    layer: int,
    prompt: CodeSequence,
    model: NarPredictor,
    cfg: LbsConfig,
    rng: SeededRng,
    executor: Executor | None = None,
) -> list[LbsBeamEntry]:
    """Expand every entry by sampled fillings of ``layer``; keep the top ``beam_size``.

    Candidate ``(b, s)`` samples from ``rng.split(b * n_sample + s)``, so the
    result does not depend on the order in which entries are expanded.
    """
    if not beam:
        raise InvalidArgument("empty beam")
    jobs = [(entry, b, layer, prompt, model, cfg, rng) for b, entry in enumerate(beam)]
    if executor is None:
        expanded = [_expand(*job) for job in jobs]
    else:
        expanded = list(executor.map(lambda job: _expand(*job), jobs))
    candidates = []
    for b, group in enumerate(expanded):
        for score, sampled in group:
            candidates.append((score, b, sampled))
    # stable sort: equal scores keep generation order
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i][0])
    new_beam = []
    for i in order[: cfg.beam_size]:
        score, b, sampled = candidates[i]
        new_beam.append(LbsBeamEntry(_with_layer(beam[b].codes, sampled), score))
    return new_beam


def lbs_search(
    first_layer: CodeSequence,
    prompt: CodeSequence,
    model: NarPredictor,
    cfg: LbsConfig,
    executor: Executor | None = None,
) -> list[LbsBeamEntry]:
    """Run ``n_codebook - 1`` steps and return the final beam, best first."""
    _check_first(first_layer)
    rng = SeededRng(cfg.seed)
    beam = [LbsBeamEntry(first_layer, 0.0)]
    for layer in range(1, cfg.n_codebook):
        beam = lbs_step(beam, layer, prompt, model, cfg, rng.split(layer), executor)
    return beam


def lbs_generate(
    first_layer: CodeSequence,
    prompt: CodeSequence,
    model: NarPredictor,
    cfg: LbsConfig,
    executor: Executor | None = None,
) -> CodeSequence:
    return lbs_search(first_layer, prompt, model, cfg, executor)[0].codes


def exhaustive_nar_oracle(
    first_layer: CodeSequence,
    prompt: CodeSequence,
    model: NarPredictor,
    n_codebook: int,
    max_fillings: int = 100_000,
    max_layers: int = 3,
) -> tuple[CodeSequence, float]:
    """Best accumulated score over every joint filling of layers ``1..n_codebook-1``.

    Fillings are enumerated in lexicographic order; the first maximizer wins.
    """
    _check_first(first_layer)
    c = model.dims.codebook_size
    length = first_layer.n_frames
    if n_codebook > max_layers or c**length > max_fillings:
        raise InvalidArgument("search space too large for exhaustive enumeration")
    if n_codebook == 1:
        return first_layer, 0.0
    fillings = np.array(list(itertools.product(range(c), repeat=length)), dtype=np.int64).reshape(-1, length)
    pos = np.arange(length)

    def best(codes: CodeSequence, layer: int):
        lp = layer_logprobs(codes, prompt, layer, model)
        scores = np.mean(lp[pos[None, :], fillings], axis=1)
        if layer == n_codebook - 1:
            i = int(np.argmax(scores))
            return float(scores[i]), _with_layer(codes, fillings[i])
        best_score, best_codes = -np.inf, None
        for i in range(fillings.shape[0]):
            sub_score, sub_codes = best(_with_layer(codes, fillings[i]), layer + 1)
            if scores[i] + sub_score > best_score:
                best_score, best_codes = float(scores[i] + sub_score), sub_codes
        return best_score, best_codes

    score, codes = best(first_layer, 1)
    return codes, score

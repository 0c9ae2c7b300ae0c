"""Consecutive text-then-codec beam search over the joint scorer.

A hypothesis first emits text tokens, then the separation token, then
first-layer codec tokens and finally EOS. Every step's distribution is the
scorer's log-distribution renormalized over the tokens the phase (and the
length limits) allow, so the final ranking score is the joint
log-probability ``log P(text | x) + log P(codes | x, text)``.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DecodeTimeout, InvalidArgument
from .isochrony import CODEC_TOKENS_PER_FRAME, IsochronyTrack
from .numerics import log_softmax
from .rvq import FeatureSequence
from .toy_model import JointScorer, VocabLayout, cross_memory, decoder_logprobs

ORACLE_LIMIT = 1_000_000


class Phase(enum.Enum):
    TEXT = "text"
    CODEC = "codec"
    DONE = "done"


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 5
    max_text_len: int = 64
    max_codec_frames: int = 500
    force_frames: int | None = None
    min_text_len: int = 0
    min_codec_frames: int = 0
    length_normalize: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise InvalidArgument("beam_size must be >= 1")
        if self.min_text_len > self.max_text_len or self.min_codec_frames > self.max_codec_frames:
            raise InvalidArgument("minimum length exceeds maximum")
        if self.force_frames is not None and self.force_frames < 0:
            raise InvalidArgument("force_frames must be non-negative")

    @property
    def codec_bounds(self) -> tuple[int, int]:
        if self.force_frames is not None:
            n = self.force_frames * CODEC_TOKENS_PER_FRAME
            return n, n
        return self.min_codec_frames, self.max_codec_frames


@dataclass(frozen=True)
class JointHypothesis:
    tokens: tuple[int, ...] = ()
    phase: Phase = Phase.TEXT
    text_logp: float = 0.0
    codec_logp: float = 0.0
    step_logps: tuple[float, ...] = field(default=(), repr=False)
    n_text: int = 0
    n_codec: int = 0

    @property
    def joint_logp(self) -> float:
        return self.text_logp + self.codec_logp

    def text(self, layout: VocabLayout) -> tuple[int, ...]:
        return tuple(t for t in self.tokens if layout.is_text(t))

    def codes(self, layout: VocabLayout) -> tuple[int, ...]:
        return tuple(t - layout.codec_base for t in self.tokens if layout.is_codec(t))

    def extend(self, tok: int, logp: float, layout: VocabLayout) -> "JointHypothesis":
        if self.phase is Phase.TEXT:
            phase = Phase.CODEC if tok == layout.sep_id else Phase.TEXT
            return JointHypothesis(
                self.tokens + (tok,), phase, self.text_logp + logp, self.codec_logp,
                self.step_logps + (logp,), self.n_text + (tok != layout.sep_id), self.n_codec,
            )
        if self.phase is Phase.CODEC:
            phase = Phase.DONE if tok == layout.eos_id else Phase.CODEC
            return JointHypothesis(
                self.tokens + (tok,), phase, self.text_logp, self.codec_logp + logp,
                self.step_logps + (logp,), self.n_text, self.n_codec + (tok != layout.eos_id),
            )
        raise InvalidArgument("cannot extend a finished hypothesis")


def phase_mask(phase: Phase, layout: VocabLayout) -> np.ndarray:
    """Boolean mask of tokens legal in ``phase`` (Done allows nothing)."""
    mask = np.zeros(layout.size, dtype=bool)
    if phase is Phase.TEXT:
        mask[: layout.n_text] = True
        mask[layout.sep_id] = True
    elif phase is Phase.CODEC:
        mask[layout.codec_base : layout.eos_id] = True
        mask[layout.eos_id] = True
    return mask


def allowed_tokens(hyp: JointHypothesis, layout: VocabLayout, cfg: BeamConfig) -> np.ndarray:
    mask = phase_mask(hyp.phase, layout)
    if hyp.phase is Phase.TEXT:
        if hyp.n_text >= cfg.max_text_len:
            mask[: layout.n_text] = False
        if hyp.n_text < cfg.min_text_len:
            mask[layout.sep_id] = False
    elif hyp.phase is Phase.CODEC:
        lo, hi = cfg.codec_bounds
        if hyp.n_codec >= hi:
            mask[layout.codec_base : layout.eos_id] = False
        if hyp.n_codec < lo:
            mask[layout.eos_id] = False
    return mask


def masked_logprobs(raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Renormalize a log-distribution over the allowed tokens; others become -inf."""
    return log_softmax(np.where(mask, raw, -np.inf))


def _rank_key(hyp: JointHypothesis, cfg: BeamConfig) -> float:
    if cfg.length_normalize:
        return hyp.joint_logp / max(len(hyp.tokens), 1)
    return hyp.joint_logp


def beam_search_joint(
    semantic: FeatureSequence,
    iso: IsochronyTrack | None,
    acoustic: np.ndarray | None,
    scorer: JointScorer,
    cfg: BeamConfig = BeamConfig(),
) -> list[JointHypothesis]:
    """Finished hypotheses ranked by joint log-probability, best first."""
    layout = scorer.layout
    memory = cross_memory(semantic, iso, scorer)
    active = [JointHypothesis()]
    finished: list[JointHypothesis] = []
    max_steps = cfg.max_text_len + 1 + cfg.codec_bounds[1] + 1
    for _ in range(max_steps):
        if not active:
            break
        prefixes = np.array([h.tokens for h in active], dtype=np.int64).reshape(len(active), -1)
        raw = decoder_logprobs(prefixes, memory, acoustic, scorer)[:, -1]
        candidates = []
        for i, hyp in enumerate(active):
            lp = masked_logprobs(raw[i], allowed_tokens(hyp, layout, cfg))
            for tok in np.flatnonzero(np.isfinite(lp)):
                candidates.append((hyp.joint_logp + lp[tok], i, int(tok), float(lp[tok])))
        # stable: ties keep (hypothesis, token) order
        candidates.sort(key=lambda c: -c[0])
        next_active = []
        for _, i, tok, lp in candidates:
            if len(next_active) == cfg.beam_size:
                break
            ext = active[i].extend(tok, lp, layout)
            (finished if ext.phase is Phase.DONE else next_active).append(ext)
        active = next_active
        if not cfg.length_normalize and len(finished) >= cfg.beam_size and active:
            worst_kept = sorted(h.joint_logp for h in finished)[-cfg.beam_size]
            # scores only decrease, so no active hypothesis can overtake
            if max(h.joint_logp for h in active) <= worst_kept:
                break
    if not finished:
        raise DecodeTimeout("no hypothesis reached EOS within the configured limits")
    order = sorted(range(len(finished)), key=lambda i: -_rank_key(finished[i], cfg))
    return [finished[i] for i in order]


def count_joint_sequences(layout: VocabLayout, cfg: BeamConfig) -> int:
    text = sum(layout.n_text**n for n in range(cfg.min_text_len, cfg.max_text_len + 1))
    lo, hi = cfg.codec_bounds
    codec = sum(layout.codebook_size**n for n in range(lo, hi + 1))
    return text * codec


def _legal_sequences(layout: VocabLayout, cfg: BeamConfig):
    lo, hi = cfg.codec_bounds
    codec_ids = range(layout.codec_base, layout.eos_id)
    for nt in range(cfg.min_text_len, cfg.max_text_len + 1):
        for text in itertools.product(range(layout.n_text), repeat=nt):
            for nc in range(lo, hi + 1):
                for codes in itertools.product(codec_ids, repeat=nc):
                    yield text + (layout.sep_id,) + codes + (layout.eos_id,)


def score_sequence_batch(seqs: np.ndarray, memory: np.ndarray, acoustic, scorer: JointScorer, cfg: BeamConfig) -> np.ndarray:
    """Teacher-forced joint log-probability of complete, equal-length sequences."""
    layout = scorer.layout
    b, t = seqs.shape
    lp_all = decoder_logprobs(seqs, memory, acoustic, scorer)[:, :t]
    # legality of every vocabulary entry at every position, from the sequence layout alone
    sep_at = np.argmax(seqs == layout.sep_id, axis=1)[:, None]
    pos = np.arange(t)[None, :]
    in_text = pos <= sep_at
    n_text = np.where(in_text, pos, sep_at)
    n_codec = np.where(in_text, 0, pos - sep_at - 1)
    lo, hi = cfg.codec_bounds
    vocab = np.arange(layout.size)[None, None, :]
    is_text = vocab < layout.n_text
    is_sep = vocab == layout.sep_id
    is_codec = (vocab >= layout.codec_base) & (vocab < layout.eos_id)
    is_eos = vocab == layout.eos_id
    text_ok = (is_text & (n_text < cfg.max_text_len)[..., None]) | (is_sep & (n_text >= cfg.min_text_len)[..., None])
    codec_ok = (is_codec & (n_codec < hi)[..., None]) | (is_eos & (n_codec >= lo)[..., None])
    allowed = np.where(in_text[..., None], text_ok, codec_ok)
    lp = log_softmax(np.where(allowed, lp_all, -np.inf))
    picked = np.take_along_axis(lp, seqs[..., None], axis=2)[..., 0]
    return picked.sum(axis=1)


def enumerate_joint_oracle(
    semantic: FeatureSequence,
    iso: IsochronyTrack | None,
    acoustic: np.ndarray | None,
    scorer: JointScorer,
    limits: BeamConfig,
    batch: int = 512,
):
    """Exhaustive maximizer of the joint log-probability.

    Returns ``(text_tokens, codec_codes, joint_logp)``; the first sequence in
    enumeration order wins ties.
    """
    layout = scorer.layout
    total = count_joint_sequences(layout, limits)
    if total > ORACLE_LIMIT:
        raise InvalidArgument(f"{total} sequences exceed the oracle limit of {ORACLE_LIMIT}")
    memory = cross_memory(semantic, iso, scorer)
    by_len: dict[int, list[tuple[int, tuple]]] = {}
    for order, seq in enumerate(_legal_sequences(layout, limits)):
        by_len.setdefault(len(seq), []).append((order, seq))
    best = (-np.inf, -1, None)
    for length in sorted(by_len):
        items = by_len[length]
        for start in range(0, len(items), batch):
            chunk = items[start : start + batch]
            seqs = np.array([s for _, s in chunk], dtype=np.int64)
            scores = score_sequence_batch(seqs, memory, acoustic, scorer, limits)
            for (order, seq), score in zip(chunk, scores):
                if score > best[0] or (score == best[0] and order < best[1]):
                    best = (float(score), order, seq)
    score, _, seq = best
    sep = seq.index(layout.sep_id)
    text = tuple(seq[:sep])
    codes = tuple(t - layout.codec_base for t in seq[sep + 1 : -1])
    return text, codes, score

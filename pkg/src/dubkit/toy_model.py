"""Small seeded forward-only scorers.

``JointScorer`` is an encoder-decoder over the combined text + codec
vocabulary. Its decoder reads a start vector, then token embeddings; the SEP
position may carry a pooled acoustic embedding instead of its own embedding,
and cross-attention memory is the encoded semantic features optionally
followed by isochrony frame features.

``NarPredictor`` is a non-causal transformer whose layer norms are adaptive,
conditioned on an embedding of the RVQ layer being predicted.

Weights are drawn from :class:`SeededRng` in field order (the same order the
model file uses), scaled by ``1/sqrt(fan_in)``; embedding tables use unit
scale, biases start at zero and layer-norm gains at one. All weights are
rounded to float32 so model files round-trip exactly.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .errors import InvalidArgument
from .isochrony import IsochronyTrack, IsoEmbeddings, build_icm_features
from .numerics import AdaLnParams, SeededRng, ada_layer_norm, gelu, layer_norm, log_softmax, sinusoidal_positions, softmax
from .rvq import CodeSequence, FeatureSequence


@dataclass(frozen=True)
class VocabLayout:
    n_text: int
    codebook_size: int

    @property
    def sep_id(self) -> int:
        return self.n_text

    @property
    def codec_base(self) -> int:
        return self.n_text + 1

    @property
    def eos_id(self) -> int:
        return self.n_text + 1 + self.codebook_size

    @property
    def size(self) -> int:
        return self.n_text + self.codebook_size + 2

    def codec_token(self, code: int) -> int:
        return self.codec_base + int(code)

    def is_text(self, tok: int) -> bool:
        return 0 <= tok < self.n_text

    def is_codec(self, tok: int) -> bool:
        return self.codec_base <= tok < self.eos_id


@dataclass(frozen=True)
class ToyDims:
    d_model: int = 32
    n_heads: int = 2
    n_blocks: int = 2
    d_ff: int = 64
    n_acoustic_blocks: int = 2
    acoustic_positions: bool = True
    n_text: int = 8
    codebook_size: int = 16
    feature_dim: int = 64
    n_codebooks: int = 16
    iso_capacity: int = 128
    joint_logit_scale: float = 1.0
    nar_logit_scale: float = 4.0

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_blocks", "d_ff", "n_text", "codebook_size", "feature_dim", "n_codebooks", "iso_capacity"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if self.d_model % self.n_heads or self.d_model % 2:
            raise InvalidArgument("d_model must be even and divisible by n_heads")

    @property
    def layout(self) -> VocabLayout:
        return VocabLayout(self.n_text, self.codebook_size)


@dataclass
class Attention:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class FeedForward:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class EncoderBlock:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    attn: Attention
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    ffn: FeedForward


@dataclass
class DecoderBlock:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    self_attn: Attention
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    cross_attn: Attention
    ln3_g: np.ndarray
    ln3_b: np.ndarray
    ffn: FeedForward


@dataclass
class NarBlock:
    norm1: AdaLnParams
    attn: Attention
    norm2: AdaLnParams
    ffn: FeedForward


@dataclass
class JointScorer:
    dims: ToyDims
    sem_in_w: np.ndarray
    sem_in_b: np.ndarray
    enc_blocks: list[EncoderBlock]
    enc_ln_g: np.ndarray
    enc_ln_b: np.ndarray
    ac_in_w: np.ndarray
    ac_in_b: np.ndarray
    ac_blocks: list[EncoderBlock]
    ac_ln_g: np.ndarray
    ac_ln_b: np.ndarray
    iso: IsoEmbeddings
    tok_emb: np.ndarray
    bos: np.ndarray
    dec_blocks: list[DecoderBlock]
    dec_ln_g: np.ndarray
    dec_ln_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @property
    def layout(self) -> VocabLayout:
        return self.dims.layout


@dataclass
class NarPredictor:
    dims: ToyDims
    code_emb: np.ndarray  # (n_codebooks, C, d)
    layer_emb: np.ndarray  # (n_codebooks, d)
    blocks: list[NarBlock]
    final_norm: AdaLnParams
    head_w: np.ndarray
    head_b: np.ndarray


Draw = Callable[[tuple, float], np.ndarray]


def _seeded_draw(rng: SeededRng) -> Draw:
    def draw(shape, scale):
        n = int(np.prod(shape))
        return np.asarray(rng.normal(n) * scale, dtype=np.float32).astype(np.float64).reshape(shape)

    return draw


def _w(draw: Draw, fan_in: int, fan_out: int) -> np.ndarray:
    return draw((fan_in, fan_out), 1.0 / math.sqrt(fan_in))


def _attn(draw: Draw, d: int) -> Attention:
    return Attention(_w(draw, d, d), _w(draw, d, d), _w(draw, d, d), _w(draw, d, d))


def _ffn(draw: Draw, d: int, ff: int) -> FeedForward:
    return FeedForward(_w(draw, d, ff), np.zeros(ff), _w(draw, ff, d), np.zeros(d))


def _enc_block(draw: Draw, d: int, ff: int) -> EncoderBlock:
    return EncoderBlock(np.ones(d), np.zeros(d), _attn(draw, d), np.ones(d), np.zeros(d), _ffn(draw, d, ff))


def _dec_block(draw: Draw, d: int, ff: int) -> DecoderBlock:
    return DecoderBlock(
        np.ones(d), np.zeros(d), _attn(draw, d),
        np.ones(d), np.zeros(d), _attn(draw, d),
        np.ones(d), np.zeros(d), _ffn(draw, d, ff),
    )


def _ada(draw: Draw, d: int) -> AdaLnParams:
    return AdaLnParams(_w(draw, d, d), np.zeros(d), _w(draw, d, d), np.zeros(d))


def _build_joint(dims: ToyDims, draw: Draw) -> JointScorer:
    d, ff, f = dims.d_model, dims.d_ff, dims.feature_dim
    v = dims.layout.size
    return JointScorer(
        dims=dims,
        sem_in_w=_w(draw, f, d),
        sem_in_b=np.zeros(d),
        enc_blocks=[_enc_block(draw, d, ff) for _ in range(dims.n_blocks)],
        enc_ln_g=np.ones(d),
        enc_ln_b=np.zeros(d),
        ac_in_w=_w(draw, f, d),
        ac_in_b=np.zeros(d),
        ac_blocks=[_enc_block(draw, d, ff) for _ in range(dims.n_acoustic_blocks)],
        ac_ln_g=np.ones(d),
        ac_ln_b=np.zeros(d),
        iso=IsoEmbeddings(
            draw((dims.iso_capacity, d), 1.0),
            draw((dims.iso_capacity, d), 1.0),
            draw((2, d), 1.0),
        ),
        tok_emb=draw((v, d), 1.0),
        bos=draw((d,), 1.0),
        dec_blocks=[_dec_block(draw, d, ff) for _ in range(dims.n_blocks)],
        dec_ln_g=np.ones(d),
        dec_ln_b=np.zeros(d),
        head_w=_w(draw, d, v),
        head_b=np.zeros(v),
    )


def _build_nar(dims: ToyDims, draw: Draw) -> NarPredictor:
    d, ff = dims.d_model, dims.d_ff
    return NarPredictor(
        dims=dims,
        code_emb=draw((dims.n_codebooks, dims.codebook_size, d), 1.0),
        layer_emb=draw((dims.n_codebooks, d), 1.0),
        blocks=[NarBlock(_ada(draw, d), _attn(draw, d), _ada(draw, d), _ffn(draw, d, ff)) for _ in range(dims.n_blocks)],
        final_norm=_ada(draw, d),
        head_w=_w(draw, d, dims.codebook_size),
        head_b=np.zeros(dims.codebook_size),
    )


def init_toy_model(seed: int, dims: ToyDims = ToyDims()) -> tuple[JointScorer, NarPredictor]:
    rng = SeededRng(seed)
    joint = _build_joint(dims, _seeded_draw(rng.split(0)))
    nar = _build_nar(dims, _seeded_draw(rng.split(1)))
    return joint, nar


def named_arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Every weight array of a model, depth first in field order."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from named_arrays(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.name == "dims":
                continue
            yield from named_arrays(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


def parameter_count(model) -> int:
    return sum(a.size for _, a in named_arrays(model))


def zeros_like_model(kind: str, dims: ToyDims):
    """A model of the given kind whose random tensors are all zero."""
    builder = {"joint": _build_joint, "nar": _build_nar}[kind]
    return builder(dims, lambda shape, scale: np.zeros(shape))


def rebuild(kind: str, dims: ToyDims, arrays: list[np.ndarray]):
    """Inverse of :func:`named_arrays`: rebuild a model from arrays in field order."""
    skeleton = zeros_like_model(kind, dims)
    slots = list(named_arrays(skeleton))
    if len(arrays) != len(slots):
        raise InvalidArgument(f"expected {len(slots)} tensors, got {len(arrays)}")
    for (name, slot), value in zip(slots, arrays):
        if slot.shape != value.shape:
            raise InvalidArgument(f"tensor {name} has shape {value.shape}, expected {slot.shape}")
        slot[...] = value
    return skeleton


# ---------------------------------------------------------------- forward ops


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, h, d // h).swapaxes(-2, -3)


def _merge(x: np.ndarray) -> np.ndarray:
    x = x.swapaxes(-2, -3)
    *lead, t, h, dh = x.shape
    return x.reshape(*lead, t, h * dh)


def attention(xq: np.ndarray, xkv: np.ndarray, p: Attention, n_heads: int, mask: np.ndarray | None = None) -> np.ndarray:
    q = _heads(xq @ p.wq, n_heads)
    k = _heads(xkv @ p.wk, n_heads)
    v = _heads(xkv @ p.wv, n_heads)
    scores = q @ k.swapaxes(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    return _merge(softmax(scores) @ v) @ p.wo


def feed_forward(x: np.ndarray, p: FeedForward) -> np.ndarray:
    return gelu(x @ p.w1 + p.b1) @ p.w2 + p.b2


def _encoder_stack(x: np.ndarray, blocks: list[EncoderBlock], n_heads: int) -> np.ndarray:
    for b in blocks:
        x = x + attention(layer_norm(x, b.ln1_g, b.ln1_b), layer_norm(x, b.ln1_g, b.ln1_b), b.attn, n_heads)
        x = x + feed_forward(layer_norm(x, b.ln2_g, b.ln2_b), b.ffn)
    return x


def _check_features(feat: FeatureSequence, dims: ToyDims, what: str):
    if feat.feature_dim != dims.feature_dim:
        raise InvalidArgument(f"{what} feature_dim {feat.feature_dim} != {dims.feature_dim}")


def encode_semantic(semantic: FeatureSequence, scorer: JointScorer) -> np.ndarray:
    _check_features(semantic, scorer.dims, "semantic")
    x = semantic.frames @ scorer.sem_in_w + scorer.sem_in_b
    x = x + sinusoidal_positions(x.shape[0], scorer.dims.d_model)
    x = _encoder_stack(x, scorer.enc_blocks, scorer.dims.n_heads)
    return layer_norm(x, scorer.enc_ln_g, scorer.enc_ln_b)


def encode_acoustic(prompt_feat: FeatureSequence, scorer: JointScorer) -> np.ndarray:
    """Per-frame acoustic encoder output, before pooling."""
    _check_features(prompt_feat, scorer.dims, "prompt")
    x = prompt_feat.frames @ scorer.ac_in_w + scorer.ac_in_b
    if scorer.dims.acoustic_positions:
        x = x + sinusoidal_positions(x.shape[0], scorer.dims.d_model)
    x = _encoder_stack(x, scorer.ac_blocks, scorer.dims.n_heads)
    return layer_norm(x, scorer.ac_ln_g, scorer.ac_ln_b)


def pool_acoustic_embedding(prompt_feat: FeatureSequence, scorer: JointScorer) -> np.ndarray:
    if prompt_feat.n_frames < 1:
        raise InvalidArgument("empty acoustic prompt")
    return encode_acoustic(prompt_feat, scorer).sum(axis=0)


def cross_memory(semantic: FeatureSequence, iso: IsochronyTrack | None, scorer: JointScorer) -> np.ndarray:
    mem = encode_semantic(semantic, scorer)
    if iso is not None:
        mem = np.concatenate([mem, build_icm_features(iso, scorer.iso).frames], axis=0)
    return mem


def _check_tokens(tokens: np.ndarray, layout: VocabLayout):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= layout.size):
        raise InvalidArgument("token id outside the combined vocabulary")


def decoder_logprobs(tokens, memory: np.ndarray, acoustic: np.ndarray | None, scorer: JointScorer) -> np.ndarray:
    """Teacher-forced log-probabilities.

    ``tokens`` is ``(T,)`` or ``(B, T)``; row ``i`` of the result is the
    distribution of token ``i`` given the start vector and ``tokens[:i]``,
    so the output has ``T + 1`` rows per sequence.
    """
    toks = np.asarray(tokens, dtype=np.int64)
    single = toks.ndim == 1
    if single:
        toks = toks[None, :]
    layout = scorer.layout
    _check_tokens(toks, layout)
    d = scorer.dims.d_model
    b, t = toks.shape
    x = np.empty((b, t + 1, d))
    x[:, 0] = scorer.bos
    x[:, 1:] = scorer.tok_emb[toks]
    if acoustic is not None:
        acoustic = np.asarray(acoustic, dtype=np.float64)
        if acoustic.shape != (d,):
            raise InvalidArgument(f"acoustic embedding must have dim {d}")
        rows, cols = np.nonzero(toks == layout.sep_id)
        x[rows, cols + 1] = acoustic
    x = x + sinusoidal_positions(t + 1, d)
    causal = np.tril(np.ones((t + 1, t + 1), dtype=bool))
    h = scorer.dims.n_heads
    for blk in scorer.dec_blocks:
        y = layer_norm(x, blk.ln1_g, blk.ln1_b)
        x = x + attention(y, y, blk.self_attn, h, causal)
        x = x + attention(layer_norm(x, blk.ln2_g, blk.ln2_b), memory, blk.cross_attn, h)
        x = x + feed_forward(layer_norm(x, blk.ln3_g, blk.ln3_b), blk.ffn)
    x = layer_norm(x, scorer.dec_ln_g, scorer.dec_ln_b)
    logits = (x @ scorer.head_w + scorer.head_b) * scorer.dims.joint_logit_scale
    out = log_softmax(logits)
    return out[0] if single else out


def joint_scorer_step(
    prefix,
    semantic: FeatureSequence,
    iso: IsochronyTrack | None,
    acoustic: np.ndarray | None,
    scorer: JointScorer,
) -> np.ndarray:
    """Log-distribution over the combined vocabulary for the token after ``prefix``."""
    memory = cross_memory(semantic, iso, scorer)
    return decoder_logprobs(np.asarray(prefix, dtype=np.int64), memory, acoustic, scorer)[-1]


def nar_input_embeddings(codes: CodeSequence, prompt: CodeSequence, layer_index: int, model: NarPredictor) -> np.ndarray:
    """Prompt rows (sum over all layers) followed by target rows (sum over the first n layers)."""
    dims = model.dims
    n = layer_index
    if not 1 <= n <= dims.n_codebooks - 1:
        raise InvalidArgument(f"layer_index must be in [1, {dims.n_codebooks - 1}]")
    if codes.n_layers < n:
        raise InvalidArgument(f"need {n} target layers, got {codes.n_layers}")
    if prompt.n_layers != dims.n_codebooks:
        raise InvalidArgument(f"prompt must carry all {dims.n_codebooks} layers")
    if codes.codebook_size != dims.codebook_size or prompt.codebook_size != dims.codebook_size:
        raise InvalidArgument("codebook size mismatch")
    d = dims.d_model
    target = np.zeros((codes.n_frames, d))
    for layer in range(n):
        target += model.code_emb[layer][codes.codes[layer]]
    pr = np.zeros((prompt.n_frames, d))
    for layer in range(dims.n_codebooks):
        pr += model.code_emb[layer][prompt.codes[layer]]
    return np.concatenate([pr, target], axis=0)


def nar_layer_logits(codes: CodeSequence, prompt: CodeSequence, layer_index: int, model: NarPredictor) -> np.ndarray:
    """Logits ``(frames, C)`` for RVQ layer ``layer_index`` of the target positions."""
    x = nar_input_embeddings(codes, prompt, layer_index, model)
    dims = model.dims
    x = x + sinusoidal_positions(x.shape[0], dims.d_model)
    cond = model.layer_emb[layer_index]
    for blk in model.blocks:
        x = x + attention(ada_layer_norm(x, cond, blk.norm1), ada_layer_norm(x, cond, blk.norm1), blk.attn, dims.n_heads)
        x = x + feed_forward(ada_layer_norm(x, cond, blk.norm2), blk.ffn)
    x = ada_layer_norm(x[prompt.n_frames :], cond, model.final_norm)
    return (x @ model.head_w + model.head_b) * dims.nar_logit_scale

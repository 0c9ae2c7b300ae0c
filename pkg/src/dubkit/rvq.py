"""Residual vector quantization with factorized, unit-norm codebooks.

Each layer projects its residual into a small code space (``in_proj``),
L2-normalizes it, snaps it to the nearest unit-norm codebook entry and maps
the entry back to feature space (``out_proj``). Fitting is gradient free:
principal directions of the residual give ``in_proj``, k-means with EMA
centroid updates gives the entries, and least squares gives ``out_proj``.

Codec parameters are kept float32-representable so a codec written to disk
and read back behaves identically to the in-memory one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgument
from .numerics import SeededRng, inverse_cdf

SAMPLE_RATE = 16000
NORM_EPS = 1e-9
EMA_DECAY = 0.99
DEAD_THRESHOLD = 1.0
_CHUNK = 2048


@dataclass(frozen=True)
class RvqConfig:
    n_layers: int = 16
    codebook_size: int = 256
    feature_dim: int = 64
    code_dim: int = 8
    token_rate_hz: int = 50
    downsample: int = 320
    distill_weight: float = 1.0

    def __post_init__(self):
        if self.n_layers < 1:
            raise InvalidArgument("n_layers must be >= 1")
        if self.codebook_size < 1:
            raise InvalidArgument("codebook_size must be >= 1")
        if not 1 <= self.code_dim <= self.feature_dim:
            raise InvalidArgument("code_dim must be in [1, feature_dim]")
        if self.token_rate_hz * self.downsample != SAMPLE_RATE:
            raise InvalidArgument("token_rate_hz * downsample must equal 16000")


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (n_frames, feature_dim)
    rate_hz: float = 50.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise InvalidArgument("frames must be a 2-D array")
        if not np.all(np.isfinite(self.frames)):
            raise InvalidArgument("frames must be finite")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]

    def slice(self, start: int, stop: int) -> "FeatureSequence":
        return FeatureSequence(self.frames[start:stop].copy(), self.rate_hz)


@dataclass
class CodeSequence:
    codes: np.ndarray  # (n_layers, n_frames), layer-major
    codebook_size: int
    token_rate_hz: float = 50.0

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise InvalidArgument("codes must be a (layers, frames) grid")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.codebook_size):
            raise InvalidArgument("code index out of range")

    @property
    def n_layers(self) -> int:
        return self.codes.shape[0]

    @property
    def n_frames(self) -> int:
        return self.codes.shape[1]

    def layers(self, n: int) -> "CodeSequence":
        return CodeSequence(self.codes[:n].copy(), self.codebook_size, self.token_rate_hz)

    def __eq__(self, other):
        return (
            isinstance(other, CodeSequence)
            and self.codebook_size == other.codebook_size
            and self.token_rate_hz == other.token_rate_hz
            and np.array_equal(self.codes, other.codes)
        )


@dataclass
class Codebook:
    layer: int
    entries: np.ndarray  # (C, code_dim), unit rows
    in_proj: np.ndarray  # (feature_dim, code_dim)
    out_proj: np.ndarray  # (code_dim, feature_dim)
    ema_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ema_counts is None:
            self.ema_counts = np.ones(self.entries.shape[0])


@dataclass
class RvqCodec:
    config: RvqConfig
    books: list[Codebook]


def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with rounding that does not depend on how many rows ``a`` has."""
    a = np.atleast_2d(a)
    out = np.empty((a.shape[0], b.shape[1]))
    for start in range(0, a.shape[0], _CHUNK):
        blk = a[start : start + _CHUNK]
        out[start : start + _CHUNK] = (blk[:, :, None] * b[None, :, :]).sum(axis=1)
    return out


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _unit_rows(x: np.ndarray):
    """Normalized rows plus a mask of rows too small to normalize."""
    norms = np.sqrt(np.sum(x * x, axis=-1))
    ok = norms > NORM_EPS
    out = np.zeros_like(x)
    out[ok] = x[ok] / norms[ok, None]
    return out, ok


def _nearest(units: np.ndarray, entries: np.ndarray) -> np.ndarray:
    idx = np.empty(units.shape[0], dtype=np.int64)
    for start in range(0, units.shape[0], _CHUNK):
        blk = units[start : start + _CHUNK]
        d = np.sum((blk[:, None, :] - entries[None, :, :]) ** 2, axis=-1)
        idx[start : start + _CHUNK] = np.argmin(d, axis=1)
    return idx


def _lookup(residual: np.ndarray, book: Codebook) -> np.ndarray:
    units, ok = _unit_rows(rowwise_matmul(residual, book.in_proj))
    idx = _nearest(units, book.entries)
    idx[~ok] = 0
    return idx


def quantize_layer(residual, book: Codebook):
    """Quantize one residual vector against one codebook.

    Returns ``(index, quantized, new_residual)``. A residual whose projection
    has norm below 1e-9 maps to entry 0.
    """
    r = np.asarray(residual, dtype=np.float64)
    if r.shape != (book.in_proj.shape[0],):
        raise InvalidArgument(f"residual must have dim {book.in_proj.shape[0]}")
    idx = int(_lookup(r[None, :], book)[0])
    q = rowwise_matmul(book.entries[idx][None, :], book.out_proj)[0]
    return idx, q, r - q


def encode(feat: FeatureSequence, codec: RvqCodec, n_layers: int | None = None) -> CodeSequence:
    n_layers = codec.config.n_layers if n_layers is None else n_layers
    if n_layers < 1:
        raise InvalidArgument("n_layers must be >= 1")
    if n_layers > len(codec.books):
        raise InvalidArgument(f"codec has only {len(codec.books)} layers")
    if feat.feature_dim != codec.config.feature_dim:
        raise InvalidArgument("feature_dim mismatch")
    residual = feat.frames.copy()
    codes = np.zeros((n_layers, feat.n_frames), dtype=np.int64)
    for layer in range(n_layers):
        book = codec.books[layer]
        idx = _lookup(residual, book)
        codes[layer] = idx
        residual = residual - rowwise_matmul(book.entries[idx], book.out_proj)
    return CodeSequence(codes, codec.config.codebook_size, codec.config.token_rate_hz)


def decode(codes: CodeSequence, codec: RvqCodec, n_layers: int | None = None) -> FeatureSequence:
    n_layers = codes.n_layers if n_layers is None else n_layers
    if not 1 <= n_layers <= codes.n_layers:
        raise InvalidArgument("n_layers must be in [1, codes.n_layers]")
    out = np.zeros((codes.n_frames, codec.config.feature_dim))
    for layer in range(n_layers):
        book = codec.books[layer]
        out += rowwise_matmul(book.entries[codes.codes[layer]], book.out_proj)
    return FeatureSequence(out, codec.config.token_rate_hz)


def _principal_directions(residual: np.ndarray, k: int) -> np.ndarray:
    # uncentered, so the basis is full rank even for tiny training sets
    _, _, vt = np.linalg.svd(residual, full_matrices=True)
    basis = vt[:k].T.copy()
    # sign convention: largest-magnitude component of each column is positive
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(k)])
    signs[signs == 0] = 1.0
    return basis * signs


def _kmeanspp(units: np.ndarray, c: int, rng: SeededRng) -> np.ndarray:
    n = units.shape[0]
    chosen = [int(rng.integers(n, 1)[0])]
    d2 = np.sum((units - units[chosen[0]]) ** 2, axis=1)
    for _ in range(1, c):
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(n, 1)[0])
        else:
            pick = int(inverse_cdf((d2 / total)[None, :], rng.uniform(1))[0])
        chosen.append(pick)
        d2 = np.minimum(d2, np.sum((units - units[pick]) ** 2, axis=1))
    return units[chosen].copy()


def _fit_entries(units: np.ndarray, c: int, iters: int, rng: SeededRng):
    entries = _kmeanspp(units, c, rng)
    ema_counts = np.ones(c)
    ema_sums = entries.copy()
    for _ in range(iters):
        assign = _nearest(units, entries)
        counts = np.bincount(assign, minlength=c).astype(np.float64)
        sums = np.zeros_like(entries)
        np.add.at(sums, assign, units)
        # lerp form keeps a steady state exact: x + d * (x - x) == x
        ema_counts = counts + EMA_DECAY * (ema_counts - counts)
        ema_sums = sums + EMA_DECAY * (ema_sums - sums)
        normed, ok = _unit_rows(ema_sums)
        entries = np.where(ok[:, None], normed, entries)
        for j in np.flatnonzero(ema_counts < DEAD_THRESHOLD):
            pick = int(rng.integers(units.shape[0], 1)[0])
            entries[j] = units[pick]
            ema_sums[j] = units[pick]
            ema_counts[j] = 1.0
    return entries, ema_counts


def fit_codebooks(
    train: FeatureSequence | Sequence[FeatureSequence],
    cfg: RvqConfig,
    iters: int,
    rng: SeededRng,
) -> RvqCodec:
    """Fit every layer's codebook on the residual left by the layers before it."""
    seqs = [train] if isinstance(train, FeatureSequence) else list(train)
    seqs = [s for s in seqs if s.n_frames]
    if not seqs:
        raise InvalidArgument("empty training set")
    x = np.vstack([s.frames for s in seqs])
    if x.shape[1] != cfg.feature_dim:
        raise InvalidArgument("feature_dim mismatch")
    residual = x.copy()
    books = []
    for layer in range(cfg.n_layers):
        in_proj = _f32(_principal_directions(residual, cfg.code_dim))
        units, ok = _unit_rows(rowwise_matmul(residual, in_proj))
        usable = units[ok] if ok.any() else np.eye(cfg.code_dim)[:1]
        entries, ema_counts = _fit_entries(usable, cfg.codebook_size, iters, rng.split(layer))
        entries = _f32(_unit_rows(entries)[0])
        book = Codebook(layer, entries, in_proj, np.zeros((cfg.code_dim, cfg.feature_dim)), ema_counts)
        idx = _lookup(residual, book)
        out_proj, *_ = np.linalg.lstsq(entries[idx], residual, rcond=None)
        book.out_proj = _f32(out_proj)
        residual = residual - rowwise_matmul(entries[idx], book.out_proj)
        books.append(book)
    return RvqCodec(cfg, books)


@dataclass(frozen=True)
class DistillationLoss:
    cosine: float
    l1: float
    total: float


def distillation_loss(
    codes: CodeSequence, codec: RvqCodec, teacher: FeatureSequence, weight: float | None = None
) -> DistillationLoss:
    """Cosine and L1 distance between first-layer reconstruction and teacher.

    ``total = weight * cosine + l1`` with ``weight`` defaulting to the codec's
    ``distill_weight`` (1.0).
    """
    if teacher.n_frames != codes.n_frames:
        raise InvalidArgument("teacher and codes frame counts differ")
    recon = decode(codes, codec, 1).frames
    t = teacher.frames
    if t.shape != recon.shape:
        raise InvalidArgument("teacher feature_dim mismatch")
    dots = np.sum(recon * t, axis=1)
    norms = np.sqrt(np.sum(recon * recon, axis=1)) * np.sqrt(np.sum(t * t, axis=1))
    same = np.all(recon == t, axis=1)
    cos = np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)
    cos_term = np.where(same, 0.0, 1.0 - cos)
    cosine = float(np.mean(cos_term))
    l1 = float(np.mean(np.abs(recon - t)))
    w = codec.config.distill_weight if weight is None else weight
    return DistillationLoss(cosine, l1, w * cosine + l1)


def featurize(pcm, cfg: RvqConfig = RvqConfig()) -> FeatureSequence:
    """Log-magnitude DFT band features, one frame per ``downsample`` samples."""
    x = np.asarray(pcm)
    if x.ndim != 1 or x.shape[0] < cfg.downsample:
        raise InvalidArgument(f"need at least {cfg.downsample} samples")
    x = x.astype(np.float64) / 32768.0
    n = x.shape[0] // cfg.downsample
    frames = x[: n * cfg.downsample].reshape(n, cfg.downsample)
    mag = np.abs(np.fft.rfft(frames, axis=1))
    edges = band_edges(mag.shape[1], cfg.feature_dim)
    bands = np.stack([mag[:, a:b].mean(axis=1) for a, b in zip(edges[:-1], edges[1:])], axis=1)
    return FeatureSequence(np.log1p(bands), cfg.token_rate_hz)


def band_edges(n_bins: int, n_bands: int) -> np.ndarray:
    """Contiguous, non-empty DFT bin ranges; band ``i`` covers ``[e[i], e[i+1])``."""
    if n_bands > n_bins:
        raise InvalidArgument("more bands than DFT bins")
    return np.floor(np.linspace(0, n_bins, n_bands + 1)).astype(np.int64)


def reconstruction_mse(feat: FeatureSequence, codec: RvqCodec, n_layers: int) -> float:
    recon = decode(encode(feat, codec, n_layers), codec, n_layers)
    return float(np.mean((recon.frames - feat.frames) ** 2))

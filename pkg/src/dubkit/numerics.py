"""Dense numeric kernel and deterministic randomness.

Matrices are plain ``float64`` numpy arrays. All stochastic behaviour in the
package flows from :class:`SeededRng`, a counter-based SplitMix64 generator:

* the stream key is ``mix(seed ^ mix(stream ^ STREAM_SALT))``
* draw ``i`` (0-based) is ``mix(key + (i + 1) * GOLDEN)``
* ``mix`` is the SplitMix64 xorshift-multiply finalizer
* ``split(i)`` returns the generator with the same seed and stream id
  ``mix(stream * GOLDEN + i + 1)``; it never consults the parent counter, so
  children are independent of how many draws siblings (or the parent) made
* uniforms are ``(u64 >> 11) * 2**-53`` in ``[0, 1)``; normals use Box-Muller
  on two consecutive uniforms

Everything is computed with wrapping uint64 arithmetic, so sequences are
bit-identical on every platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
STREAM_SALT = 0xD1B54A32D192ED03
LN_EPS = 1e-5


def _mix_int(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


@dataclass
class SeededRng:
    seed: int
    stream: int = 0
    counter: int = field(default=0, compare=False)

    def __post_init__(self):
        if not (0 <= self.seed <= MASK64 and 0 <= self.stream <= MASK64):
            raise InvalidArgument("seed and stream must be 64-bit unsigned")
        self._key = _mix_int(self.seed ^ _mix_int(self.stream ^ STREAM_SALT))

    def split(self, index: int) -> "SeededRng":
        child = _mix_int(self.stream * GOLDEN + index + 1)
        return SeededRng(self.seed, child)

    def split_uniform(self, indices, n: int) -> np.ndarray:
        """``[self.split(i).uniform(n) for i in indices]`` as one ``(len, n)`` array."""
        idx = np.asarray(indices, dtype=np.uint64)
        with np.errstate(over="ignore"):
            streams = _mix_array(np.uint64(self.stream) * np.uint64(GOLDEN) + idx + np.uint64(1))
            keys = _mix_array(np.uint64(self.seed) ^ _mix_array(streams ^ np.uint64(STREAM_SALT)))
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN)
            raw = _mix_array(keys[:, None] + steps[None, :])
        return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def copy(self) -> "SeededRng":
        return SeededRng(self.seed, self.stream, self.counter)

    def next_u64(self, n: int) -> np.ndarray:
        """Return the next ``n`` raw 64-bit draws and advance the counter."""
        if n < 0:
            raise InvalidArgument("draw count must be non-negative")
        with np.errstate(over="ignore"):
            idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
            z = np.uint64(self._key) + idx * np.uint64(GOLDEN)
        self.counter += n
        return _mix_array(z)

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform1(self) -> float:
        return float(self.uniform(1)[0])

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, high: int, n: int) -> np.ndarray:
        """Uniform integers in ``[0, high)`` via multiply-shift on 53-bit uniforms."""
        if high < 1:
            raise InvalidArgument("high must be >= 1")
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)


def softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[-1] == 0:
        raise InvalidArgument("softmax of an empty sequence")
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[-1] == 0:
        raise InvalidArgument("log_softmax of an empty sequence")
    m = np.max(x, axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def logsumexp(x, axis=-1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def top_k_select(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, descending, ties to the smaller index."""
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    return order[: min(k, s.shape[0])]


def top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k_select` for a 2-D score matrix."""
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[:, : min(k, scores.shape[-1])]


def _check_probs(p: np.ndarray):
    if np.any(p < 0):
        raise InvalidArgument("probabilities must be non-negative")
    total = p.sum(axis=-1)
    if np.any(np.abs(total - 1.0) > 1e-9):
        raise InvalidArgument("probabilities must sum to 1")


def inverse_cdf(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    # first index whose cumulative mass exceeds u; never lands on a zero-mass tail
    cdf = np.cumsum(p, axis=-1)
    idx = np.sum(cdf <= u[..., None], axis=-1)
    last = p.shape[-1] - 1 - np.argmax(p[..., ::-1] > 0, axis=-1)
    return np.minimum(idx, last)


def categorical_sample(probs, rng: SeededRng) -> int:
    p = np.asarray(probs, dtype=np.float64)
    _check_probs(p)
    u = rng.uniform(1)
    return int(inverse_cdf(p[None, :], u)[0])


def categorical_sample_rows(probs: np.ndarray, rng: SeededRng) -> np.ndarray:
    """One inverse-CDF draw per row; consumes exactly ``rows`` draws."""
    p = np.asarray(probs, dtype=np.float64)
    _check_probs(p)
    return inverse_cdf(p, rng.uniform(p.shape[0]))


def normalize(x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return normalize(x) * gain + bias


@dataclass
class AdaLnParams:
    """Affine maps from a conditioning vector to per-feature scale and shift."""

    scale_w: np.ndarray  # (d_cond, d)
    scale_b: np.ndarray  # (d,)
    shift_w: np.ndarray
    shift_b: np.ndarray

    @classmethod
    def zeros(cls, d_cond: int, d: int) -> "AdaLnParams":
        return cls(np.zeros((d_cond, d)), np.zeros(d), np.zeros((d_cond, d)), np.zeros(d))

    def arrays(self):
        return [self.scale_w, self.scale_b, self.shift_w, self.shift_b]


def ada_layer_norm(x: np.ndarray, cond: np.ndarray, params: AdaLnParams) -> np.ndarray:
    """``(1 + scale(cond)) * normalize(x) + shift(cond)``; ``x`` may be a row or a matrix."""
    x = np.asarray(x, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    d_cond, d = params.scale_w.shape
    if x.shape[-1] != d or cond.shape != (d_cond,):
        raise InvalidArgument(
            f"ada_layer_norm expects rows of {d} and cond of {d_cond}, got {x.shape} and {cond.shape}"
        )
    scale = cond @ params.scale_w + params.scale_b
    shift = cond @ params.shift_w + params.shift_b
    return (1.0 + scale) * normalize(x) + shift


def sinusoidal_positions(n: int, d: int, offset: int = 0) -> np.ndarray:
    if d % 2:
        raise InvalidArgument("sinusoidal positions need an even width")
    pos = np.arange(offset, offset + n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)))

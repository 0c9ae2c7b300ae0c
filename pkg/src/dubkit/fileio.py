"""Binary file formats. All integers and floats are little-endian.

Feature file (``SASF``)::

    b"SASF" u32 version=1 u32 n_frames u32 feature_dim
    f32[n_frames * feature_dim] row-major

Code file (``SASQ``)::

    b"SASQ" u32 version=1 u16 n_layers u32 codebook_size f32 token_rate_hz
    u32 n_frames u16[n_layers * n_frames] layer-major

Codec file (``SASB``)::

    b"SASB" u32 version=1
    config: u16 n_layers u32 codebook_size u32 feature_dim u32 code_dim
            u32 token_rate_hz u32 downsample f32 distill_weight
    per layer: f32 entries[C * code_dim] f32 in_proj[feature_dim * code_dim]
               f32 out_proj[code_dim * feature_dim] f32 ema_counts[C]

Model file (``TVTM``)::

    b"TVTM" u32 version=1
    config: u32 d_model n_heads n_blocks d_ff n_acoustic_blocks
            u8 acoustic_positions
            u32 n_text codebook_size feature_dim n_codebooks iso_capacity
            f32 joint_logit_scale f32 nar_logit_scale
    u32 n_tensors, then per tensor: u8 ndim u32[ndim] shape f32[...] data
    tensor order: joint scorer fields, then NAR predictor fields, each depth
    first in declaration order (see ``toy_model.named_arrays``)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .rvq import Codebook, CodeSequence, FeatureSequence, RvqCodec, RvqConfig
from .toy_model import JointScorer, NarPredictor, ToyDims, named_arrays, rebuild, zeros_like_model

VERSION = 1


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.buf = io.BytesIO(data)
        self.what = what

    def take(self, n: int) -> bytes:
        b = self.buf.read(n)
        if len(b) != n:
            raise InvalidArgument(f"truncated {self.what} file")
        return b

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)

    def header(self, magic: bytes):
        if self.take(4) != magic:
            raise InvalidArgument(f"not a {magic.decode()} file")
        (version,) = self.unpack("I")
        if version != VERSION:
            raise InvalidArgument(f"unsupported {magic.decode()} version {version}")

    def finish(self):
        if self.buf.read(1):
            raise InvalidArgument(f"trailing bytes in {self.what} file")


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def features_to_bytes(feat: FeatureSequence) -> bytes:
    return b"SASF" + struct.pack("<III", VERSION, feat.n_frames, feat.feature_dim) + _f32(feat.frames)


def features_from_bytes(data: bytes) -> FeatureSequence:
    r = _Reader(data, "feature")
    r.header(b"SASF")
    n, f = r.unpack("II")
    frames = r.f32((n, f))
    r.finish()
    return FeatureSequence(frames)


def codes_to_bytes(codes: CodeSequence) -> bytes:
    if codes.codebook_size > 65536:
        raise InvalidArgument("codebook too large for u16 codes")
    head = struct.pack("<IHIfI", VERSION, codes.n_layers, codes.codebook_size, codes.token_rate_hz, codes.n_frames)
    return b"SASQ" + head + np.ascontiguousarray(codes.codes, dtype="<u2").tobytes()


def codes_from_bytes(data: bytes) -> CodeSequence:
    r = _Reader(data, "code")
    r.header(b"SASQ")
    n_layers, c, rate, n_frames = r.unpack("HIfI")
    grid = np.frombuffer(r.take(2 * n_layers * n_frames), dtype="<u2").astype(np.int64)
    r.finish()
    return CodeSequence(grid.reshape(n_layers, n_frames), c, rate)


def codec_to_bytes(codec: RvqCodec) -> bytes:
    cfg = codec.config
    out = [
        b"SASB",
        struct.pack(
            "<IHIIIIIf", VERSION, len(codec.books), cfg.codebook_size, cfg.feature_dim,
            cfg.code_dim, cfg.token_rate_hz, cfg.downsample, cfg.distill_weight,
        ),
    ]
    for book in codec.books:
        out += [_f32(book.entries), _f32(book.in_proj), _f32(book.out_proj), _f32(book.ema_counts)]
    return b"".join(out)


def codec_from_bytes(data: bytes) -> RvqCodec:
    r = _Reader(data, "codec")
    r.header(b"SASB")
    n_layers, c, f, cd, rate, down, weight = r.unpack("HIIIIIf")
    cfg = RvqConfig(n_layers, c, f, cd, rate, down, weight)
    books = []
    for layer in range(n_layers):
        entries = r.f32((c, cd))
        in_proj = r.f32((f, cd))
        out_proj = r.f32((cd, f))
        counts = r.f32((c,))
        books.append(Codebook(layer, entries, in_proj, out_proj, counts))
    r.finish()
    return RvqCodec(cfg, books)


_DIM_FIELDS = ("d_model", "n_heads", "n_blocks", "d_ff", "n_acoustic_blocks")
_VOCAB_FIELDS = ("n_text", "codebook_size", "feature_dim", "n_codebooks", "iso_capacity")


def model_to_bytes(joint: JointScorer, nar: NarPredictor) -> bytes:
    d = joint.dims
    if nar.dims != d:
        raise InvalidArgument("joint scorer and NAR predictor dims differ")
    out = [
        b"TVTM",
        struct.pack("<I", VERSION),
        struct.pack("<5I", *(getattr(d, k) for k in _DIM_FIELDS)),
        struct.pack("<B", int(d.acoustic_positions)),
        struct.pack("<5I", *(getattr(d, k) for k in _VOCAB_FIELDS)),
        struct.pack("<ff", d.joint_logit_scale, d.nar_logit_scale),
    ]
    tensors = [a for _, a in named_arrays(joint)] + [a for _, a in named_arrays(nar)]
    out.append(struct.pack("<I", len(tensors)))
    for a in tensors:
        out.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        out.append(_f32(a))
    return b"".join(out)


def model_from_bytes(data: bytes) -> tuple[JointScorer, NarPredictor]:
    r = _Reader(data, "model")
    r.header(b"TVTM")
    dims_a = r.unpack("5I")
    (positions,) = r.unpack("B")
    dims_b = r.unpack("5I")
    js, ns = r.unpack("ff")
    dims = ToyDims(
        **dict(zip(_DIM_FIELDS, dims_a)),
        acoustic_positions=bool(positions),
        **dict(zip(_VOCAB_FIELDS, dims_b)),
        joint_logit_scale=js,
        nar_logit_scale=ns,
    )
    (count,) = r.unpack("I")
    tensors = []
    for _ in range(count):
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        tensors.append(r.f32(shape))
    r.finish()
    n_joint = sum(1 for _ in named_arrays(zeros_like_model("joint", dims)))
    joint = rebuild("joint", dims, tensors[:n_joint])
    nar = rebuild("nar", dims, tensors[n_joint:])
    return joint, nar


def _writer(to_bytes):
    def write(path, obj, *more):
        Path(path).write_bytes(to_bytes(obj, *more))

    return write


def _reader(from_bytes):
    def read(path):
        return from_bytes(Path(path).read_bytes())

    return read


write_features = _writer(features_to_bytes)
read_features = _reader(features_from_bytes)
write_codes = _writer(codes_to_bytes)
read_codes = _reader(codes_from_bytes)
write_codec = _writer(codec_to_bytes)
read_codec = _reader(codec_from_bytes)
write_model = _writer(model_to_bytes)
read_model = _reader(model_from_bytes)


def read_pcm(path) -> np.ndarray:
    """Headerless 16-bit little-endian mono PCM."""
    data = Path(path).read_bytes()
    if len(data) % 2:
        raise InvalidArgument("PCM file has an odd byte count")
    return np.frombuffer(data, dtype="<i2").astype(np.int16)


def write_pcm(path, samples) -> None:
    Path(path).write_bytes(np.asarray(samples, dtype="<i2").tobytes())

"""Isochrony frame features, energy VAD and duration-compliance metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .numerics import SeededRng
from .rvq import FeatureSequence

FRAME_SECONDS = 0.16
VAD_WINDOW = 2560  # 160 ms at 16 kHz
CODEC_TOKENS_PER_FRAME = 8  # 0.16 s * 50 Hz
VAD_RELATIVE_DB = -40.0
VAD_FLOOR = 1e-4


def duration_frames(duration_s: float) -> int:
    if not duration_s > 0:
        raise InvalidArgument("duration must be positive")
    # round first so 1.6 / 0.16 = 10.000000000000002 does not ceil to 11
    return int(math.ceil(round(duration_s / FRAME_SECONDS, 9)))


@dataclass
class IsochronyTrack:
    vad: np.ndarray  # (n_frames,) of 0/1

    def __post_init__(self):
        self.vad = np.asarray(self.vad, dtype=np.int64)
        if self.vad.ndim != 1 or self.vad.size == 0:
            raise InvalidArgument("isochrony track needs at least one frame")
        if np.any((self.vad != 0) & (self.vad != 1)):
            raise InvalidArgument("vad bits must be 0 or 1")

    @property
    def n_frames(self) -> int:
        return self.vad.shape[0]

    @property
    def pos(self) -> np.ndarray:
        return np.arange(self.n_frames)

    @property
    def rpos(self) -> np.ndarray:
        return self.n_frames - 1 - np.arange(self.n_frames)

    @classmethod
    def from_duration(cls, duration_s: float) -> "IsochronyTrack":
        return cls(np.ones(duration_frames(duration_s), dtype=np.int64))

    @classmethod
    def from_code_frames(cls, n_code_frames: int, vad=None) -> "IsochronyTrack":
        """Track for a 50 Hz code sequence; ``vad`` defaults to all active."""
        n = -(-n_code_frames // CODEC_TOKENS_PER_FRAME)
        if vad is None:
            return cls(np.ones(n, dtype=np.int64))
        vad = np.asarray(vad)
        if vad.shape[0] != n:
            raise InvalidArgument(f"expected {n} vad bits, got {vad.shape[0]}")
        return cls(vad)


@dataclass
class IsoEmbeddings:
    pos: np.ndarray  # (capacity, d)
    rpos: np.ndarray  # (capacity, d)
    vad: np.ndarray  # (2, d)

    @property
    def capacity(self) -> int:
        return min(self.pos.shape[0], self.rpos.shape[0])

    @classmethod
    def random(cls, capacity: int, d: int, rng: SeededRng) -> "IsoEmbeddings":
        return cls(
            rng.normal(capacity * d).reshape(capacity, d),
            rng.normal(capacity * d).reshape(capacity, d),
            rng.normal(2 * d).reshape(2, d),
        )

    def arrays(self):
        return [self.pos, self.rpos, self.vad]


def build_icm_features(track: IsochronyTrack, tables: IsoEmbeddings) -> FeatureSequence:
    if track.n_frames > tables.capacity:
        raise InvalidArgument(f"{track.n_frames} frames exceed table capacity {tables.capacity}")
    out = tables.pos[track.pos] + tables.rpos[track.rpos] + tables.vad[track.vad]
    return FeatureSequence(out, 1.0 / FRAME_SECONDS)


def _as_float_pcm(pcm) -> np.ndarray:
    x = np.asarray(pcm)
    if x.dtype.kind in "iu":
        return x.astype(np.float64) / 32768.0
    return x.astype(np.float64)


def window_rms(pcm, window: int = VAD_WINDOW) -> np.ndarray:
    x = _as_float_pcm(pcm)
    if x.ndim != 1 or x.size == 0:
        raise InvalidArgument("empty PCM")
    n = -(-x.size // window)
    padded = np.zeros(n * window)
    padded[: x.size] = x
    return np.sqrt(np.mean(padded.reshape(n, window) ** 2, axis=1))


def vad_frames(pcm) -> np.ndarray:
    """One activity bit per 160 ms window; integer PCM is scaled to full scale 1."""
    rms = window_rms(pcm)
    threshold = max(rms.max() * 10.0 ** (VAD_RELATIVE_DB / 20.0), VAD_FLOOR)
    return (rms > threshold).astype(np.int64)


def slc(durations_src, durations_gen, p: float) -> float:
    src = np.asarray(durations_src, dtype=np.float64)
    gen = np.asarray(durations_gen, dtype=np.float64)
    if src.shape != gen.shape:
        raise InvalidArgument("duration lists differ in length")
    if not 0 < p < 1:
        raise InvalidArgument("p must be in (0, 1)")
    if src.size == 0:
        raise InvalidArgument("no durations")
    if np.any(src <= 0):
        raise InvalidArgument("source durations must be positive")
    ratio = gen / src
    # 1e-12 slack so 1.2 / 1.0 counts as inside [0.8, 1.2]
    ok = (ratio >= 1 - p - 1e-12) & (ratio <= 1 + p + 1e-12)
    return float(np.mean(ok))


def pause_count(vad) -> int:
    bits = np.asarray(vad, dtype=np.int64)
    active = np.flatnonzero(bits)
    if active.size == 0:
        return 0
    inner = bits[active[0] : active[-1] + 1]
    # each 1 -> 0 edge inside the active span starts one pause
    return int(np.sum((inner[:-1] == 1) & (inner[1:] == 0)))


def pcm_duration(pcm, sample_rate: int = 16000) -> float:
    return np.asarray(pcm).shape[0] / sample_rate


def metrics_report(src_durations, gen_durations, src_vads=None, gen_vads=None) -> dict:
    """SLC at 0.2/0.4 plus optional pause counts, as a JSON-ready dict."""
    report = {
        "schema": "dubkit.metrics/1",
        "n": len(src_durations),
        "slc_0.2": slc(src_durations, gen_durations, 0.2),
        "slc_0.4": slc(src_durations, gen_durations, 0.4),
    }
    if src_vads is not None:
        report["pauses_src"] = [pause_count(v) for v in src_vads]
    if gen_vads is not None:
        report["pauses_gen"] = [pause_count(v) for v in gen_vads]
    return report


def format_report(report: dict) -> str:
    lines = []
    for key, value in report.items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_report_text(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key.startswith("pauses_"):
            out[key] = [int(v) for v in value.split(",")] if value else []
        elif key in ("schema",):
            out[key] = value
        elif key == "n":
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


def dump_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"

"""Multi-task training examples for the joint text+codec model.

Every label lives in the combined vocabulary. Speech-bearing labels are
``text + SEP + layer-0 codes + EOS`` with one label token per 50 Hz code
frame. Label positions whose codes fall inside the acoustic prompt region are
masked out of the loss, since the prompt is what the model is conditioned on.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from concurrent.futures import Executor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .fileio import read_codes, read_features
from .isochrony import IsochronyTrack
from .joint_decoder import Phase, phase_mask
from .numerics import SeededRng
from .rvq import CodeSequence, FeatureSequence
from .toy_model import VocabLayout

KINDS = ("S2ST-fwd", "S2ST-rev", "ST-fwd", "ST-rev", "ASR-as-TTS")
PROMPT_MAX_FRAMES = 150  # 3 s at 50 Hz
PROMPT_MAX_FRACTION = 0.5
DROPOUT_P = 0.5


class PromptPurpose(enum.Enum):
    JOINT = 500  # 10 s
    NAR = 250  # 5 s


@dataclass
class Utterance:
    """One side of a training pair. Any of the speech fields may be absent."""

    tokens: tuple[int, ...]
    feat: FeatureSequence | None = None
    codes: CodeSequence | None = None
    vad: np.ndarray | None = None  # one bit per 160 ms frame

    def first_layer(self) -> np.ndarray:
        if self.codes is None or self.codes.n_frames == 0:
            raise InvalidArgument("utterance has no codec frames")
        return self.codes.codes[0]


@dataclass
class TrainingExample:
    kind: str
    input: FeatureSequence | tuple[int, ...]
    iso: IsochronyTrack | None
    acoustic_prompt: FeatureSequence | None
    label: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown example kind {self.kind!r}")
        if self.label.shape != self.loss_mask.shape:
            raise InvalidArgument("loss mask and label lengths differ")


def _region(prompt_region, n_frames: int) -> tuple[int, int]:
    start, stop = (0, 0) if prompt_region is None else (int(prompt_region[0]), int(prompt_region[1]))
    if start == stop:
        return 0, 0
    if not 0 <= start < stop <= n_frames:
        raise InvalidArgument(f"prompt region [{start}, {stop}) outside [0, {n_frames})")
    return start, stop


def _speech_label(text, speech: Utterance, region, layout: VocabLayout, mask_text: bool):
    codes = speech.first_layer()
    start, stop = _region(region, codes.shape[0])
    n_text = len(text)
    label = np.concatenate([
        np.asarray(text, dtype=np.int64).reshape(-1),
        [layout.sep_id],
        codes + layout.codec_base,
        [layout.eos_id],
    ]).astype(np.int64)
    mask = np.ones(label.shape[0], dtype=np.int64)
    if mask_text:
        mask[:n_text] = 0
    mask[n_text + 1 + start : n_text + 1 + stop] = 0
    iso = IsochronyTrack.from_code_frames(codes.shape[0], speech.vad)
    prompt = speech.feat.slice(start, stop) if speech.feat is not None and stop > start else None
    return label, mask, iso, prompt


def _check_text(tokens, layout: VocabLayout):
    for t in tokens:
        if not layout.is_text(int(t)):
            raise InvalidArgument(f"token {t} is not a text id")


def build_example_s2st(
    source: Utterance,
    target: Utterance,
    prompt_region,
    direction: str,
    layout: VocabLayout,
    use_text_input: bool = False,
) -> TrainingExample:
    """Forward translates source speech into target text+speech; reverse swaps roles.

    ``prompt_region`` is a half-open code-frame interval of the labelled speech.
    """
    if direction not in ("fwd", "rev"):
        raise InvalidArgument("direction must be 'fwd' or 'rev'")
    inp, out = (source, target) if direction == "fwd" else (target, source)
    _check_text(out.tokens, layout)
    label, mask, iso, prompt = _speech_label(out.tokens, out, prompt_region, layout, mask_text=False)
    if use_text_input:
        model_input = tuple(inp.tokens)
    elif inp.feat is not None:
        model_input = inp.feat
    else:
        raise InvalidArgument("input utterance has no features")
    return TrainingExample(f"S2ST-{direction}", model_input, iso, prompt, label, mask)


def build_example_st(
    source: Utterance,
    target_tokens,
    direction: str,
    layout: VocabLayout,
    prompt_region=None,
) -> TrainingExample:
    """Speech translation pairs with no target speech.

    Forward labels end at SEP and carry no isochrony. Reverse reads the
    target text; when the source speech has codes its label continues with
    them exactly like an S2ST label, otherwise it also ends at SEP.
    """
    _check_text(target_tokens, layout)
    _check_text(source.tokens, layout)
    if direction == "fwd":
        if source.feat is None:
            raise InvalidArgument("source utterance has no features")
        label = np.asarray(tuple(target_tokens) + (layout.sep_id,), dtype=np.int64)
        return TrainingExample("ST-fwd", source.feat, None, None, label, np.ones(label.shape[0], dtype=np.int64))
    if direction != "rev":
        raise InvalidArgument("direction must be 'fwd' or 'rev'")
    if source.codes is None:
        label = np.asarray(tuple(source.tokens) + (layout.sep_id,), dtype=np.int64)
        return TrainingExample("ST-rev", tuple(target_tokens), None, None, label, np.ones(label.shape[0], dtype=np.int64))
    label, mask, iso, prompt = _speech_label(source.tokens, source, prompt_region, layout, mask_text=False)
    return TrainingExample("ST-rev", tuple(target_tokens), iso, prompt, label, mask)


def build_example_asr(source: Utterance, prompt_region, layout: VocabLayout) -> TrainingExample:
    """Text-to-speech use of ASR data: read the transcript, emit it back plus the speech.

    The echoed transcript is masked, so only SEP, the codes outside the prompt
    and EOS carry loss. There is deliberately no recognition-direction builder.
    """
    _check_text(source.tokens, layout)
    label, mask, iso, prompt = _speech_label(source.tokens, source, prompt_region, layout, mask_text=True)
    return TrainingExample("ASR-as-TTS", tuple(source.tokens), iso, prompt, label, mask)


def expected_masked_count(kind: str, n_text: int, prompt_region) -> int:
    """Closed-form number of zero loss-mask positions."""
    start, stop = (0, 0) if prompt_region is None else prompt_region
    region = max(0, int(stop) - int(start))
    if kind == "ST-fwd":
        return 0
    return region + (n_text if kind == "ASR-as-TTS" else 0)


def clip_prompt(feat: FeatureSequence, purpose: PromptPurpose) -> FeatureSequence:
    """Leading frames up to the purpose's limit, or the whole utterance if shorter."""
    if feat.n_frames < 1:
        raise InvalidArgument("empty prompt")
    return feat.slice(0, min(purpose.value, feat.n_frames))


def sample_prompt_region(
    n_frames: int,
    rng: SeededRng,
    max_frames: int = PROMPT_MAX_FRAMES,
    max_fraction: float = PROMPT_MAX_FRACTION,
) -> tuple[int, int]:
    """Uniform start; length ``min(max_frames, floor(max_fraction * n_frames))``."""
    if n_frames < 1:
        raise InvalidArgument("need at least one frame")
    length = min(max_frames, int(max_fraction * n_frames))
    if length == 0:
        return 0, 0
    start = int(rng.integers(n_frames - length + 1, 1)[0])
    return start, start + length


def acoustic_dropout(example: TrainingExample, rng: SeededRng, p: float = DROPOUT_P) -> TrainingExample:
    """Drop the acoustic prompt with probability ``p`` (one decision per example)."""
    if example.acoustic_prompt is None:
        raise InvalidArgument("example has no acoustic prompt")
    if not 0 <= p <= 1:
        raise InvalidArgument("p must be in [0, 1]")
    if rng.uniform1() < p:
        return dataclasses.replace(example, acoustic_prompt=None)
    return example


def check_label_order(label, layout: VocabLayout) -> bool:
    """True if the label walks text* SEP (codec* EOS)? under the phase masks."""
    phase = Phase.TEXT
    for tok in np.asarray(label, dtype=np.int64):
        if not phase_mask(phase, layout)[tok]:
            return False
        if tok == layout.sep_id:
            phase = Phase.CODEC
        elif tok == layout.eos_id:
            phase = Phase.DONE
    return phase is not Phase.TEXT


# ------------------------------------------------------------------ manifest


@dataclass(frozen=True)
class ManifestRecord:
    kind: str
    src_tokens: tuple[int, ...]
    tgt_tokens: tuple[int, ...] = ()
    src_feat: str | None = None
    src_codes: str | None = None
    tgt_feat: str | None = None
    tgt_codes: str | None = None
    prompt_region: tuple[int, int] | str | None = None  # "auto" samples one
    confidence: float = 1.0
    use_text_input: bool = False


def load_manifest(path) -> list[ManifestRecord]:
    """One JSON object per line; blank lines are skipped."""
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as e:
            raise InvalidArgument(f"manifest line {lineno}: {e}") from e
        unknown = set(raw) - {f.name for f in dataclasses.fields(ManifestRecord)}
        if unknown:
            raise InvalidArgument(f"manifest line {lineno}: unknown fields {sorted(unknown)}")
        if raw.get("kind") not in KINDS:
            raise InvalidArgument(f"manifest line {lineno}: bad kind {raw.get('kind')!r}")
        region = raw.get("prompt_region")
        if isinstance(region, list):
            raw["prompt_region"] = tuple(region)
        raw["src_tokens"] = tuple(raw.get("src_tokens", ()))
        raw["tgt_tokens"] = tuple(raw.get("tgt_tokens", ()))
        records.append(ManifestRecord(**raw))
    return records


def _utterance(tokens, feat_path, codes_path, base: Path) -> Utterance:
    feat = read_features(base / feat_path) if feat_path else None
    codes = read_codes(base / codes_path) if codes_path else None
    return Utterance(tuple(tokens), feat, codes)


def build_from_record(rec: ManifestRecord, base: Path, layout: VocabLayout, rng: SeededRng, dropout_p: float):
    src = _utterance(rec.src_tokens, rec.src_feat, rec.src_codes, base)
    tgt = _utterance(rec.tgt_tokens, rec.tgt_feat, rec.tgt_codes, base)
    region = rec.prompt_region
    if region == "auto":
        labelled = {"S2ST-fwd": tgt, "S2ST-rev": src}.get(rec.kind, src)
        region = sample_prompt_region(labelled.first_layer().shape[0], rng.split(0)) if labelled.codes is not None else None
    if rec.kind.startswith("S2ST"):
        ex = build_example_s2st(src, tgt, region, rec.kind[-3:], layout, rec.use_text_input)
    elif rec.kind.startswith("ST"):
        ex = build_example_st(src, rec.tgt_tokens, rec.kind[-3:], layout, region)
    else:
        ex = build_example_asr(src, region, layout)
    if ex.acoustic_prompt is not None:
        ex = acoustic_dropout(ex, rng.split(1), dropout_p)
    return ex, region


def build_examples(
    manifest_path,
    layout: VocabLayout,
    seed: int,
    min_confidence: float = 0.0,
    dropout_p: float = DROPOUT_P,
    executor: Executor | None = None,
) -> dict:
    """Build every kept record and summarize the results as a JSON-ready dict.

    Record ``i`` (in file order) draws from ``SeededRng(seed).split(i)``, so
    the report does not depend on how the work is scheduled.
    """
    path = Path(manifest_path)
    records = load_manifest(path)
    root = SeededRng(seed)
    jobs = [(i, r) for i, r in enumerate(records) if r.confidence >= min_confidence]

    def run(job):
        i, rec = job
        return build_from_record(rec, path.parent, layout, root.split(i), dropout_p)

    results = list(executor.map(run, jobs)) if executor is not None else [run(j) for j in jobs]
    examples = []
    for (i, _), (ex, region) in zip(jobs, results):
        examples.append({
            "record": i,
            "kind": ex.kind,
            "input": "text" if isinstance(ex.input, tuple) else "speech",
            "label": ex.label.tolist(),
            "loss_mask": ex.loss_mask.tolist(),
            "prompt_region": list(region) if isinstance(region, tuple) else None,
            "iso_frames": ex.iso.n_frames if ex.iso is not None else None,
            "acoustic_prompt_frames": ex.acoustic_prompt.n_frames if ex.acoustic_prompt is not None else None,
            "label_order_ok": check_label_order(ex.label, layout),
        })
    return {
        "schema": "dubkit.examples/1",
        "n_records": len(records),
        "n_kept": len(jobs),
        "n_filtered": len(records) - len(jobs),
        "examples": examples,
    }

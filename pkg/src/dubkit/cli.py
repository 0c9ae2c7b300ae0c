"""Command-line entry point.

Parameters come from, in increasing priority: built-in defaults, a
``key=value`` config file (``--config``), then flags. The global seed falls
back to the ``TVIP_SEED`` environment variable when neither sets it. Exit
status is 0 on success, 2 on usage errors and 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import fileio
from .data import PromptPurpose, build_examples, clip_prompt
from .errors import DecodeTimeout, InvalidArgument
from .isochrony import IsochronyTrack, dump_report, duration_frames, format_report, metrics_report, pcm_duration, vad_frames
from .joint_decoder import BeamConfig, beam_search_joint
from .lbs import LbsConfig, greedy_generate, lbs_search, score_codes
from .numerics import SeededRng
from .rvq import CodeSequence, FeatureSequence, RvqConfig, decode, encode, featurize, fit_codebooks
from .selftest import run_selftest
from .toy_model import ToyDims, VocabLayout, init_toy_model, pool_acoustic_embedding

SEED_ENV = "TVIP_SEED"
NAR_PROMPT_FRAMES = PromptPurpose.NAR.value


class UsageError(Exception):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


@contextmanager
def _pool(threads: int):
    if threads <= 1:
        yield None
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            yield ex


def _map(executor, fn, items):
    return list(executor.map(fn, items)) if executor is not None else [fn(i) for i in items]


def _stem_outputs(inputs, out_dir: Path, suffix: str) -> list[Path]:
    stems = [Path(p).name.rsplit(".", 1)[0] for p in inputs]
    if len(set(stems)) != len(stems):
        raise InvalidArgument("input file names must have distinct stems")
    out_dir.mkdir(parents=True, exist_ok=True)
    return [out_dir / (s + suffix) for s in stems]


# ------------------------------------------------------------------ commands


def cmd_codec_fit(args) -> int:
    cfg = RvqConfig(args.layers, args.codebook_size, args.feature_dim, args.code_dim, distill_weight=args.distill_weight)
    train = [fileio.read_features(p) for p in args.features]
    codec = fit_codebooks(train, cfg, args.iters, SeededRng(args.seed))
    fileio.write_codec(args.out, codec)
    frames = FeatureSequence(np.vstack([t.frames for t in train]))
    recon = decode(encode(frames, codec), codec)
    print(f"layers={cfg.n_layers} codebook_size={cfg.codebook_size} frames={frames.n_frames}")
    print(f"mse={_fmt(np.mean((recon.frames - frames.frames) ** 2))}")
    return 0


def cmd_codec_encode(args) -> int:
    codec = fileio.read_codec(args.codec)
    if args.pcm is not None:
        feat = featurize(fileio.read_pcm(args.pcm), codec.config)
    else:
        feat = fileio.read_features(args.features)
    codes = encode(feat, codec, args.layers)
    fileio.write_codes(args.out, codes)
    print(f"frames={codes.n_frames} layers={codes.n_layers}")
    return 0


def cmd_codec_decode(args) -> int:
    codec = fileio.read_codec(args.codec)
    codes = fileio.read_codes(args.codes)
    feat = decode(codes, codec)
    fileio.write_features(args.out, feat)
    print(f"frames={feat.n_frames} layers={codes.n_layers}")
    if args.reference is not None:
        ref = fileio.read_features(args.reference)
        if ref.frames.shape != feat.frames.shape:
            raise InvalidArgument("reference shape differs from decoded features")
        print(f"mse={_fmt(np.mean((feat.frames - ref.frames) ** 2))}")
    return 0


def _dims(args) -> ToyDims:
    return ToyDims(
        d_model=args.d_model, n_heads=args.n_heads, n_blocks=args.n_blocks, d_ff=args.d_ff,
        n_acoustic_blocks=args.n_acoustic_blocks, acoustic_positions=not args.no_acoustic_positions,
        n_text=args.n_text, codebook_size=args.codebook_size, feature_dim=args.feature_dim,
        n_codebooks=args.n_codebooks, iso_capacity=args.iso_capacity,
        joint_logit_scale=args.joint_logit_scale, nar_logit_scale=args.nar_logit_scale,
    )


def cmd_model_init(args) -> int:
    joint, nar = init_toy_model(args.seed, _dims(args))
    fileio.write_model(args.out, joint, nar)
    print(f"wrote {args.out}")
    return 0


def cmd_translate(args) -> int:
    joint, _ = fileio.read_model(args.model)
    acoustic = None
    if args.prompt is not None:
        prompt = clip_prompt(fileio.read_features(args.prompt), PromptPurpose.JOINT)
        acoustic = pool_acoustic_embedding(prompt, joint)
    outs = _stem_outputs(args.semantic, Path(args.out_dir), ".sasq")

    def run(job):
        path, out = job
        semantic = fileio.read_features(path)
        iso = None
        if not args.no_iso:
            # target duration follows the source
            iso = IsochronyTrack.from_duration(semantic.n_frames / semantic.rate_hz)
        cfg = BeamConfig(
            beam_size=args.beam, max_text_len=args.max_text_len, max_codec_frames=args.max_codec_frames,
            force_frames=iso.n_frames if args.force_length and iso is not None else None,
        )
        best = beam_search_joint(semantic, iso, acoustic, joint, cfg)[0]
        layout = joint.layout
        codes = CodeSequence(np.asarray(best.codes(layout), dtype=np.int64)[None, :], layout.codebook_size)
        fileio.write_codes(out, codes)
        text = " ".join(str(t) for t in best.text(layout))
        out.with_suffix(".txt").write_text(
            f"text={text}\ncodec_frames={codes.n_frames}\n"
            f"text_logp={_fmt(best.text_logp)}\ncodec_logp={_fmt(best.codec_logp)}\n"
        )
        return f"{Path(path).name} text=[{text}] codec_frames={codes.n_frames} joint_logp={_fmt(best.joint_logp)}"

    with _pool(args.threads) as ex:
        for line in _map(ex, run, list(zip(args.semantic, outs))):
            print(line)
    return 0


def cmd_nar(args) -> int:
    _, model = fileio.read_model(args.model)
    n_codebook = args.layers if args.layers is not None else model.dims.n_codebooks
    prompt = fileio.read_codes(args.prompt)
    if prompt.n_layers < model.dims.n_codebooks:
        raise InvalidArgument(f"prompt needs {model.dims.n_codebooks} layers, has {prompt.n_layers}")
    prompt = CodeSequence(prompt.codes[: model.dims.n_codebooks, :NAR_PROMPT_FRAMES], prompt.codebook_size, prompt.token_rate_hz)
    cfg = LbsConfig(n_codebook, args.beam, args.samples, args.topk, args.seed)
    outs = _stem_outputs(args.first, Path(args.out_dir), ".sasq")

    def run(job):
        path, out = job
        first = fileio.read_codes(path).layers(1)
        if args.greedy:
            codes = greedy_generate(first, prompt, model, n_codebook)
            score = score_codes(codes, prompt, model, n_codebook)
        else:
            top = lbs_search(first, prompt, model, cfg)[0]
            codes, score = top.codes, top.total_score
        fileio.write_codes(out, codes)
        return f"{Path(path).name} layers={codes.n_layers} score={_fmt(score)}"

    with _pool(args.threads) as ex:
        for line in _map(ex, run, list(zip(args.first, outs))):
            print(line)
    return 0


def _durations(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_metrics(args) -> int:
    if args.src_pcm:
        if not args.gen_pcm:
            raise UsageError("--src-pcm needs --gen-pcm")
        with _pool(args.threads) as ex:
            src = _map(ex, fileio.read_pcm, args.src_pcm)
            gen = _map(ex, fileio.read_pcm, args.gen_pcm)
        report = metrics_report(
            [pcm_duration(p) for p in src], [pcm_duration(p) for p in gen],
            [vad_frames(p) for p in src], [vad_frames(p) for p in gen],
        )
    elif args.src_durations is not None and args.gen_durations is not None:
        report = metrics_report(_durations(args.src_durations), _durations(args.gen_durations))
    else:
        raise UsageError("give --src-pcm/--gen-pcm or --src-durations/--gen-durations")
    sys.stdout.write(format_report(report))
    if args.out is not None:
        Path(args.out).write_text(dump_report(report))
    return 0


def cmd_data_build(args) -> int:
    layout = VocabLayout(args.n_text, args.codebook_size)
    with _pool(args.threads) as ex:
        report = build_examples(args.manifest, layout, args.seed, args.min_confidence, args.dropout, ex)
    Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"records={report['n_records']} kept={report['n_kept']} filtered={report['n_filtered']}")
    return 0


def cmd_selftest(args) -> int:
    return 0 if run_selftest() else 1


def cmd_frames(args) -> int:
    print(duration_frames(args.duration))
    return 0


# -------------------------------------------------------------------- parser


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _sub(subparsers, name: str, help: str, fn, leaves: list) -> argparse.ArgumentParser:
    p = subparsers.add_parser(name, help=help, description=help, formatter_class=_Formatter)
    p.set_defaults(func=fn)
    # also accepted after the subcommand; SUPPRESS keeps the global value when absent
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="same as the global --seed")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="same as the global --threads")
    leaves.append(p)
    return p


def _dim_flags(p):
    d = ToyDims()
    p.add_argument("--d-model", type=int, default=d.d_model, help="model width")
    p.add_argument("--n-heads", type=int, default=d.n_heads, help="attention heads")
    p.add_argument("--n-blocks", type=int, default=d.n_blocks, help="transformer blocks per stack")
    p.add_argument("--d-ff", type=int, default=d.d_ff, help="feed-forward width")
    p.add_argument("--n-acoustic-blocks", type=int, default=d.n_acoustic_blocks, help="acoustic encoder blocks")
    p.add_argument("--no-acoustic-positions", action="store_true", help="omit positions in the acoustic encoder")
    p.add_argument("--n-text", type=int, default=d.n_text, help="text vocabulary size")
    p.add_argument("--codebook-size", type=int, default=d.codebook_size, help="codec entries per layer")
    p.add_argument("--feature-dim", type=int, default=d.feature_dim, help="input feature dimension")
    p.add_argument("--n-codebooks", type=int, default=d.n_codebooks, help="RVQ layers seen by the NAR model")
    p.add_argument("--iso-capacity", type=int, default=d.iso_capacity, help="max isochrony frames")
    p.add_argument("--joint-logit-scale", type=float, default=d.joint_logit_scale, help="joint scorer logit multiplier")
    p.add_argument("--nar-logit-scale", type=float, default=d.nar_logit_scale, help="NAR logit multiplier")


def build_parser() -> tuple[argparse.ArgumentParser, list[argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="dubkit", description=__doc__.splitlines()[0], formatter_class=_Formatter)
    parser.add_argument("--config", default=None, help="key=value config file; flags override it")
    parser.add_argument("--seed", type=int, default=None, help=f"global seed (falls back to ${SEED_ENV}, then 0)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for independent items")
    top = parser.add_subparsers(dest="command", metavar="COMMAND")
    top.required = True
    leaves: list[argparse.ArgumentParser] = []

    codec = top.add_parser("codec", help="fit, encode and decode with the RVQ codec")
    codec_sub = codec.add_subparsers(dest="codec_command", metavar="ACTION")
    codec_sub.required = True
    r = RvqConfig()
    p = _sub(codec_sub, "fit", "fit RVQ codebooks on feature files", cmd_codec_fit, leaves)
    p.add_argument("--features", nargs="+", required=True, help="training feature files")
    p.add_argument("--out", required=True, help="output codec file")
    p.add_argument("--layers", type=int, default=r.n_layers, help="RVQ layers")
    p.add_argument("--codebook-size", type=int, default=r.codebook_size, help="entries per codebook")
    p.add_argument("--feature-dim", type=int, default=r.feature_dim, help="feature dimension")
    p.add_argument("--code-dim", type=int, default=r.code_dim, help="projected lookup dimension")
    p.add_argument("--distill-weight", type=float, default=r.distill_weight, help="cosine term weight in the distillation loss")
    p.add_argument("--iters", type=int, default=20, help="k-means iterations per layer")
    p = _sub(codec_sub, "encode", "encode features or PCM into codes", cmd_codec_encode, leaves)
    p.add_argument("--codec", required=True, help="codec file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--features", help="feature file")
    src.add_argument("--pcm", help="headerless 16-bit little-endian mono 16 kHz PCM")
    p.add_argument("--layers", type=int, default=None, help="layers to emit (default: all)")
    p.add_argument("--out", required=True, help="output code file")
    p = _sub(codec_sub, "decode", "decode codes into features", cmd_codec_decode, leaves)
    p.add_argument("--codec", required=True, help="codec file")
    p.add_argument("--codes", required=True, help="code file")
    p.add_argument("--out", required=True, help="output feature file")
    p.add_argument("--reference", default=None, help="feature file to report MSE against")

    model = top.add_parser("model", help="toy model files")
    model_sub = model.add_subparsers(dest="model_command", metavar="ACTION")
    model_sub.required = True
    p = _sub(model_sub, "init", "write a seeded toy model file", cmd_model_init, leaves)
    p.add_argument("--out", required=True, help="output model file")
    _dim_flags(p)

    b = BeamConfig()
    p = _sub(top, "translate", "joint text-then-codec beam search with a toy scorer", cmd_translate, leaves)
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--semantic", nargs="+", required=True, help="source semantic feature files")
    p.add_argument("--prompt", default=None, help="acoustic prompt feature file (first 10 s used)")
    p.add_argument("--out-dir", required=True, help="directory for <stem>.sasq and <stem>.txt")
    p.add_argument("--beam", type=int, default=b.beam_size, help="beam size")
    p.add_argument("--max-text-len", type=int, default=b.max_text_len, help="max text tokens")
    p.add_argument("--max-codec-frames", type=int, default=b.max_codec_frames, help="max codec tokens")
    p.add_argument("--no-iso", action="store_true", help="decode without isochrony features")
    p.add_argument("--force-length", action="store_true", help="emit exactly 8 codec tokens per isochrony frame")

    lc = LbsConfig()
    p = _sub(top, "nar", "fill RVQ layers 1.. greedily or with layer beam search", cmd_nar, leaves)
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--first", nargs="+", required=True, help="code files whose layer 0 is kept")
    p.add_argument("--prompt", required=True, help="all-layer prompt code file (first 5 s used)")
    p.add_argument("--out-dir", required=True, help="directory for <stem>.sasq")
    p.add_argument("--layers", type=int, default=None, help="layers to produce; the model's layer count when unset")
    p.add_argument("--greedy", action="store_true", help="per-position argmax instead of layer beam search")
    p.add_argument("--beam", type=int, default=lc.beam_size, help="layer beam size")
    p.add_argument("--samples", type=int, default=lc.n_sample, help="sampled fillings per beam entry")
    p.add_argument("--topk", type=int, default=lc.top_k, help="logits kept per position")

    p = _sub(top, "metrics", "SLC and pause counts", cmd_metrics, leaves)
    p.add_argument("--src-pcm", nargs="*", default=None, help="source PCM files")
    p.add_argument("--gen-pcm", nargs="*", default=None, help="generated PCM files, paired in order")
    p.add_argument("--src-durations", default=None, help="comma-separated source durations in seconds")
    p.add_argument("--gen-durations", default=None, help="comma-separated generated durations in seconds")
    p.add_argument("--out", default=None, help="JSON report file")

    data = top.add_parser("data", help="training example construction")
    data_sub = data.add_subparsers(dest="data_command", metavar="ACTION")
    data_sub.required = True
    p = _sub(data_sub, "build", "build examples from a manifest and write a report", cmd_data_build, leaves)
    p.add_argument("--manifest", required=True, help="JSON-lines manifest")
    p.add_argument("--out", required=True, help="JSON report file")
    p.add_argument("--min-confidence", type=float, default=0.0, help="drop records below this pseudo-label confidence")
    p.add_argument("--dropout", type=float, default=0.5, help="acoustic prompt drop probability")
    p.add_argument("--n-text", type=int, default=ToyDims.n_text, help="text vocabulary size")
    p.add_argument("--codebook-size", type=int, default=ToyDims.codebook_size, help="codec entries")

    _sub(top, "selftest", "run the built-in oracle checks", cmd_selftest, leaves)
    p = _sub(top, "frames", "number of 160 ms isochrony frames for a duration", cmd_frames, leaves)
    p.add_argument("duration", type=float, help="seconds")
    return parser, leaves


# -------------------------------------------------------------------- config


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _as_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def apply_config(config: dict[str, str], parsers: list[argparse.ArgumentParser]) -> None:
    """Install config values as parser defaults; string defaults pass through each flag's type."""
    used = set()
    for p in parsers:
        actions = {a.dest: a for a in p._actions}
        values = {}
        for key, value in config.items():
            action = actions.get(key)
            if action is None or key in ("help", "func"):
                continue
            used.add(key)
            if isinstance(action, argparse._StoreTrueAction):
                values[key] = _as_bool(value)
            elif action.nargs in ("+", "*"):
                values[key] = value.split()
            elif action.type is not None:
                try:
                    values[key] = action.type(value)
                except ValueError as e:
                    raise UsageError(f"config {key}: {e}") from e
            else:
                values[key] = value
        p.set_defaults(**values)
    unknown = set(config) - used
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, leaves = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config:
            apply_config(read_config(known.config), [parser] + leaves)
        args = parser.parse_args(argv)
        if args.seed is None:
            env = os.environ.get(SEED_ENV)
            args.seed = int(env) if env else 0
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"dubkit: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"dubkit: error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"dubkit: error: {e}", file=sys.stderr)
        return 2
    except (InvalidArgument, DecodeTimeout, OSError, ValueError) as e:
        print(f"dubkit: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

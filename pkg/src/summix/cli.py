"""``summix`` command line: benchmarks, mask inspection, and offline/streaming encoding.

Exit codes: 0 success, 2 invalid arguments, 3 I/O or file-format errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .bench import BenchRun, emit_report, generate_synthetic_features, plot_rtf, run_rtf_benchmark
from .chunking import ChunkSpec, build_mask, ms_to_frames
from .encoder import (EncoderConfig, FeatureSequence, encoder_forward_offline, init_encoder,
                      stream_utterance)
from .errors import FormatError, MeasurementError, ValidationError
from .formats import load_checkpoint, load_feature_file, save_checkpoint, save_feature_file

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3

log = logging.getLogger("summix")


def _left_context(text: str) -> int | None:
    if text.lower() in ("inf", "infinite", "none"):
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"left context must be an integer or 'infinite', got {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError("left context must be >= 0")
    return value


def _durations(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad duration list {text!r}")
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("durations must be positive")
    return values


def _mixing(text: str) -> str:
    return {"summary": "summary", "summarymixing": "summary", "mhsa": "mhsa"}.get(text.lower(), text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="summix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="real-time factor and peak memory versus utterance length")
    b.add_argument("--mixing", type=_mixing, choices=["summary", "mhsa"], default="summary")
    b.add_argument("--durations", type=_durations, default=[5, 10, 20, 30, 60, 120])
    b.add_argument("--chunk-ms", type=float, default=640.0)
    b.add_argument("--left-context", type=_left_context, default=None,
                   help="chunks of left context, or 'infinite' (default)")
    b.add_argument("--repeats", type=int, default=100)
    b.add_argument("--min-time", type=float, default=0.0,
                   help="keep repeating each duration until this many seconds are measured")
    b.add_argument("--d-model", type=int, default=144)
    b.add_argument("--blocks", type=int, default=12)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--conv-kernel", type=int, default=31)
    b.add_argument("--input-dim", type=int, default=80)
    b.add_argument("--subsampling", type=int, default=1)
    b.add_argument("--precision", choices=["f32", "f64"], default="f32")
    b.add_argument("--streams", type=int, default=1, help="parallel independent streams (throughput mode)")
    b.add_argument("--no-memory", action="store_true", help="skip the traced peak-memory pass")
    b.add_argument("--memory-budget-mb", type=float, default=1024.0,
                   help="skip the measured peak when the model predicts more than this")
    b.add_argument("--out", type=Path, required=True, help="report path (.csv or .json)")
    b.add_argument("--plot", type=Path, help="also write an SVG chart of rtf vs duration")
    b.add_argument("--seed", type=int, default=0)

    m = sub.add_parser("mask", help="print a dynamic chunk visibility mask as a 0/1 grid")
    m.add_argument("--t", type=int, required=True)
    m.add_argument("--chunk-frames", type=int, required=True)
    m.add_argument("--left", type=_left_context, default=None)

    e = sub.add_parser("encode", help="run a checkpoint over a feature file")
    e.add_argument("--features", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--chunk-ms", type=float, default=640.0)
    e.add_argument("--left-context", type=_left_context, default=None)
    e.add_argument("--offline", action="store_true", help="full-utterance masked forward instead of streaming")
    e.add_argument("--out", type=Path, required=True)

    i = sub.add_parser("init", help="write a randomly initialised checkpoint")
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--mixing", type=_mixing, choices=["summary", "mhsa"], default="summary")
    i.add_argument("--d-model", type=int, default=144)
    i.add_argument("--blocks", type=int, default=12)
    i.add_argument("--heads", type=int, default=4)
    i.add_argument("--conv-kernel", type=int, default=31)
    i.add_argument("--conv-mode", choices=["dynamic_chunk", "causal", "standard"], default="dynamic_chunk")
    i.add_argument("--input-dim", type=int, default=80)
    i.add_argument("--subsampling", type=int, default=1)
    i.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="write synthetic Gaussian features")
    s.add_argument("--duration", type=float, required=True)
    s.add_argument("--dim", type=int, default=80)
    s.add_argument("--frame-shift-ms", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    return parser


def _cmd_bench(args) -> int:
    if args.repeats < 1 or args.streams < 1:
        raise ValidationError("repeats and streams must be >= 1")
    cfg = EncoderConfig(input_dim=args.input_dim, num_blocks=args.blocks, d_model=args.d_model,
                        mixing=args.mixing, num_heads=args.heads, conv_kernel=args.conv_kernel,
                        subsampling_factor=args.subsampling, precision=nk.PrecisionPolicy.of(args.precision))
    run = BenchRun(config_id=f"{args.mixing}-d{args.d_model}-b{args.blocks}-{args.precision}",
                   mixing=args.mixing, durations_s=args.durations, repeats=args.repeats,
                   frame_shift_ms=cfg.frame_shift_ms, chunk_ms=args.chunk_ms,
                   left_context=args.left_context, streams=args.streams,
                   min_time_s=args.min_time)
    run_rtf_benchmark(cfg, None, run, seed=args.seed, measure_memory=not args.no_memory,
                      memory_budget_bytes=int(args.memory_budget_mb * 2 ** 20))
    fmt = "json" if args.out.suffix.lower() == ".json" else "csv"
    emit_report(run, fmt, args.out)
    if args.plot:
        plot_rtf({args.mixing: run.results}, args.plot)
    for row in run.results:
        print(f"{row.duration_s:7.1f}s  rtf={row.rtf:.4f}  wall={row.wall_ms_mean:.1f}ms")
    return EXIT_OK


def _cmd_mask(args) -> int:
    mask = build_mask(args.t, ChunkSpec(args.chunk_frames, args.left))
    print(mask.to_text())
    return EXIT_OK


def _cmd_encode(args) -> int:
    feat = load_feature_file(args.features)
    params = load_checkpoint(args.checkpoint)
    cfg = params.config
    spec = ChunkSpec(ms_to_frames(args.chunk_ms, cfg.output_frame_shift_ms), args.left_context)
    if args.offline:
        out = encoder_forward_offline(feat, spec, params)
    else:
        out = stream_utterance(feat, spec, params)
    save_feature_file(args.out, FeatureSequence(out.astype(np.float32), cfg.output_frame_shift_ms))
    print(f"wrote {out.shape[0]} x {out.shape[1]} frames to {args.out}")
    return EXIT_OK


def _cmd_init(args) -> int:
    cfg = EncoderConfig(input_dim=args.input_dim, num_blocks=args.blocks, d_model=args.d_model,
                        mixing=args.mixing, num_heads=args.heads, conv_kernel=args.conv_kernel,
                        conv_mode=args.conv_mode, subsampling_factor=args.subsampling)
    save_checkpoint(args.out, init_encoder(cfg, seed=args.seed))
    return EXIT_OK


def _cmd_synth(args) -> int:
    feat = generate_synthetic_features(args.duration, args.dim, args.frame_shift_ms, args.seed)
    save_feature_file(args.out, feat)
    return EXIT_OK


COMMANDS = {"bench": _cmd_bench, "mask": _cmd_mask, "encode": _cmd_encode, "init": _cmd_init,
            "synth": _cmd_synth}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, MeasurementError) as exc:
        print(f"summix: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, OSError) as exc:
        print(f"summix: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

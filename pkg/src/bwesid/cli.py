"""Batch command surface: filter, bwe train/extend, experiment.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Logs go to stderr;
data only ever goes to files.
"""

import argparse
import os
import sys
from pathlib import Path

from . import __version__
from .audio_io import AudioIOError, read_wav, write_wav
from .bwe import (
    VARIANTS,
    BweFeatureConfig,
    bwe_extend,
    bwe_train,
    load_bwe_model,
    save_bwe_model,
)
from .experiments import (
    ManifestError,
    build_database_variants,
    emit_report,
    parse_manifest,
    run_sweep,
    validate_durations,
    write_audit_csv,
)
from .features import LPCC, MELCEPST, FrameConfig

ENV_CORPUS_ROOT = "BWESID_CORPUS_ROOT"


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value <= 0:
        raise argparse.ArgumentTypeError(f"{text!r} must be positive")
    return value


def _int_list(text: str) -> list:
    return [_positive_int(tok) for tok in text.split(",") if tok]


def _float_list(text: str) -> list:
    try:
        values = [float(tok) for tok in text.split(",") if tok]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated float list")
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("frame lengths must be positive")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bwesid",
        description="Bandwidth extension and covariance-matrix speaker identification.",
    )
    parser.add_argument("--version", action="version", version=f"bwesid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_filter = sub.add_parser("filter", help="apply a database-variant transform to a wav file")
    p_filter.add_argument("input")
    p_filter.add_argument("output")
    p_filter.add_argument("--variant", required=True, choices=VARIANTS)
    p_filter.add_argument("--model", help="trained model file (bwe variants)")
    p_filter.add_argument("--channel", default="left", choices=("left", "right", "mix"))

    p_bwe = sub.add_parser("bwe", help="bandwidth-extension model commands")
    bwe_sub = p_bwe.add_subparsers(dest="bwe_command", required=True)

    p_train = bwe_sub.add_parser("train", help="fit the joint model on 16 kHz wav files")
    p_train.add_argument("corpus_dir")
    p_train.add_argument("model_out")
    p_train.add_argument("--mixtures", type=_positive_int, default=32)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--max-iter", type=_positive_int, default=60)
    p_train.add_argument("--channel", default="left", choices=("left", "right", "mix"))

    p_extend = bwe_sub.add_parser("extend", help="extend an 8 kHz wav to 16 kHz")
    p_extend.add_argument("input")
    p_extend.add_argument("model")
    p_extend.add_argument("output")

    p_exp = sub.add_parser("experiment", help="run an identification sweep from a manifest")
    p_exp.add_argument("manifest")
    p_exp.add_argument("--param", required=True, choices=("lpcc", "melcepst"))
    p_exp.add_argument("--p-list", type=_int_list, default=[4, 8, 12, 16, 20, 24])
    p_exp.add_argument("--frame-ms", type=_float_list, default=[30.0])
    p_exp.add_argument("--report-dir", required=True)
    p_exp.add_argument("--variants", default="orig,nb,bwe",
                       help="comma-separated subset of " + ",".join(VARIANTS))
    p_exp.add_argument("--model", help="trained model file (needed for bwe variants)")
    p_exp.add_argument("--seed", type=int, default=0)
    p_exp.add_argument("--jobs", type=_positive_int, default=os.cpu_count() or 1)
    p_exp.add_argument("--corpus-root",
                       help=f"corpus root (default: ${ENV_CORPUS_ROOT} or the manifest directory)")
    p_exp.add_argument("--skip-duration-check", action="store_true",
                       help="accept corpora that deviate from the 60 s / 2 s protocol")
    return parser


def _cmd_filter(args, parser) -> int:
    if args.variant in ("bwe", "isdn_bwe") and not args.model:
        parser.error(f"--model is required for variant {args.variant!r}")
    from .bwe import make_variants

    model = load_bwe_model(args.model) if args.model else None
    buffer = read_wav(args.input, channel_select=args.channel)
    result = make_variants(buffer, args.variant, model=model)
    clipped = write_wav(result, args.output)
    if clipped:
        print(f"warning: {clipped} samples clipped", file=sys.stderr)
    return 0


def _cmd_bwe_train(args) -> int:
    corpus_dir = Path(args.corpus_dir)
    paths = sorted(corpus_dir.rglob("*.wav"))
    if not paths:
        raise FileNotFoundError(f"no wav files under {corpus_dir}")
    buffers = [read_wav(p, channel_select=args.channel) for p in paths]
    model = bwe_train(buffers, BweFeatureConfig(), n_components=args.mixtures,
                      seed=args.seed)
    save_bwe_model(model, args.model_out)
    print(f"trained on {len(buffers)} files "
          f"({sum(b.duration_s for b in buffers):.1f} s), wrote {args.model_out}",
          file=sys.stderr)
    return 0


def _cmd_bwe_extend(args) -> int:
    model = load_bwe_model(args.model)
    buffer = read_wav(args.input)
    write_wav(bwe_extend(buffer, model), args.output)
    return 0


def _cmd_experiment(args, parser) -> int:
    variants = [v for v in args.variants.split(",") if v]
    for v in variants:
        if v not in VARIANTS:
            parser.error(f"unknown variant {v!r}")
    if any(v in ("bwe", "isdn_bwe") for v in variants) and not args.model:
        parser.error("--model is required when the variant set includes bwe")

    root = args.corpus_root or os.environ.get(ENV_CORPUS_ROOT)
    manifest = parse_manifest(args.manifest)
    if root:
        manifest.root = Path(root)
    if not args.skip_duration_check:
        validate_durations(manifest)

    model = load_bwe_model(args.model) if args.model else None
    model_tag = ""
    if args.model:
        import hashlib

        model_tag = hashlib.sha256(Path(args.model).read_bytes()).hexdigest()

    report_dir = Path(args.report_dir)
    variant_root = report_dir / "variants"
    written = build_database_variants(manifest, variants, variant_root,
                                      model=model, model_tag=model_tag)
    print(f"materialized variants ({written} files written)", file=sys.stderr)

    parameterization = MELCEPST if args.param == "melcepst" else LPCC
    configs = [FrameConfig(frame_ms=ms) for ms in args.frame_ms]
    variant_roots = {v: variant_root / v for v in variants}
    results = run_sweep(manifest, variant_roots, parameterization,
                        args.p_list, configs, jobs=args.jobs)
    paths = emit_report(results, report_dir)
    write_audit_csv(results, report_dir / "audit.csv")
    paths.append(report_dir / "audit.csv")
    invalid = [r for r in results if not r.valid]
    print(f"{len(results)} cells ({len(invalid)} invalid); reports: "
          + ", ".join(str(p) for p in paths), file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "filter":
            return _cmd_filter(args, parser)
        if args.command == "bwe":
            if args.bwe_command == "train":
                return _cmd_bwe_train(args)
            return _cmd_bwe_extend(args)
        return _cmd_experiment(args, parser)
    except (AudioIOError, ManifestError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``affex <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import gradcheck
from .ablation import ablate
from .backbone import export_features, load_backbone, load_precomputed, pretrain_backbone, save_backbone, write_precomputed
from .data import SyntheticConfig, generate_synthetic, load_manifest
from .errors import AffexError, NumericError
from .predictions import fuse_predictions, read_predictions, score_files, write_predictions
from .training import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    load_config,
    predict,
    save_checkpoint,
    train,
)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _feature_source(args):
    """Backbone or precomputed extractor requested on the command line."""
    if getattr(args, "features", None):
        return load_precomputed(args.features)
    if getattr(args, "backbone", None):
        return load_backbone(args.backbone)
    return None


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(
        num_videos=args.num_videos,
        frames_per_video=args.frames,
        descriptor_dim=args.dim,
        class_separation=args.separation,
        noise_sigma=args.noise,
        seed=args.seed or 0,
        min_segment=args.min_segment,
        max_segment=args.max_segment,
        classes=tuple(args.classes) if args.classes else SyntheticConfig.classes,
        video_prefix=args.prefix,
    )
    m = generate_synthetic(cfg, args.out)
    print(f"wrote {m.num_frames} frames in {len(m.videos)} videos to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest, require="expression")
    backbone = pretrain_backbone(manifest, cfg.backbone_config, cfg.pretrain_config)
    save_backbone(args.out, backbone)
    print(f"backbone saved to {args.out}; final loss {backbone.history[-1]:.5f}")
    if args.export_features:
        full = load_manifest(args.manifest, require="none")
        write_precomputed(args.export_features, export_features(backbone, full))
        print(f"features written to {args.export_features}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest, require="none", load_payloads=not args.features)
    val = None
    if args.val_manifest:
        val = load_manifest(args.val_manifest, require="none", load_payloads=not args.features)
    ckpt, history = train(manifest, val, cfg, _feature_source(args))
    save_checkpoint(args.out, ckpt)
    for rec in history.epochs:
        line = f"epoch {rec.epoch} loss {rec.total:.6f}"
        if rec.validation is not None:
            r = rec.validation
            line += f" val_expr {r.expression_score:.4f}"
            if r.has_va:
                line += f" val_va {r.va_score:.4f}"
        print(line)
    print(f"checkpoint saved to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, args.variant)
    manifest = load_manifest(args.manifest, require="none", load_payloads=not args.features)
    extractor = load_precomputed(args.features) if args.features else None
    _emit(evaluate(ckpt, manifest, extractor).to_text(), args.out)
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, args.variant)
    manifest = load_manifest(args.manifest, require="none", load_payloads=not args.features)
    extractor = load_precomputed(args.features) if args.features else None
    n = predict(ckpt, manifest, args.out, extractor)
    print(f"wrote {n} rows to {args.out}")
    return 0


def cmd_fuse(args) -> int:
    fused = fuse_predictions([read_predictions(p) for p in args.predictions])
    write_predictions(fused, args.out)
    print(f"fused {len(args.predictions)} tables ({len(fused)} rows) into {args.out}")
    return 0


def cmd_score(args) -> int:
    manifest = load_manifest(args.manifest, require="none", load_payloads=False)
    report = score_files(read_predictions(args.predictions), manifest, args.track)
    _emit(report.to_text(), args.out)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed or 0)
    width = max(len(k) for k in results)
    failed = [k for k, v in results.items() if not v < gradcheck.TOLERANCE]
    for name, err in results.items():
        status = "FAIL" if name in failed else "ok"
        print(f"{name:<{width}}  {err:.3e}  {status}")
    if failed:
        raise NumericError(f"gradient check above {gradcheck.TOLERANCE:g}: {', '.join(failed)}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest, require="none", load_payloads=not args.features)
    val = load_manifest(args.val_manifest, require="none", load_payloads=not args.features)
    table = ablate(manifest, val, cfg, _feature_source(args))
    _emit(table.to_text(), args.out)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TrainConfig file (key = value lines)")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="affex", description="Temporal facial affect models on frame blocks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--num-videos", type=int, default=30)
    p.add_argument("--frames", type=int, default=100, help="frames per video")
    p.add_argument("--dim", type=int, default=16, help="descriptor dimension")
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--min-segment", type=int, default=16)
    p.add_argument("--max-segment", type=int, default=48)
    p.add_argument("--classes", type=int, nargs="+", help="subset of expression classes to use")
    p.add_argument("--prefix", default="v", help="video id prefix")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the face feature backbone")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH", help="backbone parameter file")
    p.add_argument("--export-features", metavar="PATH", help="also write a precomputed feature file")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="train one model variant")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--val-manifest", metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH", help="checkpoint file")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--backbone", metavar="PATH", help="pretrained backbone file")
    src.add_argument("--features", metavar="PATH", help="precomputed feature file")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "report metrics"), ("predict", cmd_predict, "write predictions CSV")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True, metavar="PATH")
        p.add_argument("--manifest", required=True, metavar="PATH")
        p.add_argument("--features", metavar="PATH", help="precomputed feature file")
        p.add_argument("--variant", type=int, help="refuse checkpoints of any other variant")
        p.add_argument("--out", required=name == "predict", metavar="PATH")
        p.set_defaults(func=func)

    p = sub.add_parser("fuse", parents=[common], help="average several prediction CSVs")
    p.add_argument("predictions", nargs="+", metavar="CSV")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("score", parents=[common], help="score a prediction CSV against a manifest")
    p.add_argument("predictions", metavar="CSV")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--track", choices=("expression", "va"), default="expression")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate variants 1 to 6")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--val-manifest", required=True, metavar="PATH")
    p.add_argument("--out", metavar="PATH")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--backbone", metavar="PATH")
    src.add_argument("--features", metavar="PATH")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "fuse" and len(args.predictions) < 2:
        parser.error("fuse needs at least two prediction files")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except AffexError as exc:
        print(f"affex {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"affex {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA

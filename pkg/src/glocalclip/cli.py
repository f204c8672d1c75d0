"""Command-line entry point: ``glocal train|eval|infer|dump-embeddings|visualize|synth``.

Every subcommand prints a JSON summary on stdout and exits 0. Failures print
``{"error": ..., "message": ...}`` on stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backbone import resolve_backbone
from .config import RunConfig, check_against_backbone, load_checkpoint, load_config, read_checkpoint_arrays
from .data import index_dataset, synth_blobs, write_mvtec

log = logging.getLogger("glocalclip")


def _config(args, backbone) -> RunConfig:
    """``--config`` if given, else the checkpoint's stored copy, else the preset for the backbone."""
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "ckpt", None):
        _, cfg = read_checkpoint_arrays(args.ckpt)
    else:
        cfg = RunConfig.toy() if args.backbone == "toy" else RunConfig()
    check_against_backbone(cfg, backbone)
    return cfg


def _bank(args, cfg, backbone):
    bank, _ = load_checkpoint(args.ckpt, cfg, width=backbone.text.width, tokenizer=backbone.text.tokenizer)
    return bank


def cmd_train(args) -> dict:
    from .engine import train

    backbone = resolve_backbone(args.backbone)
    cfg = _config(args, backbone)
    index = index_dataset(args.data, args.layout)
    out = Path(args.out)
    result = train(cfg, index, backbone, out_dir=out, snapshot_dir=out / "snapshots" if args.snapshots else None)
    return {
        "checkpoint": str(result.checkpoint),
        "history": str(out / "loss_history.json"),
        "epochs": len(result.epoch_means),
        "initial_loss": result.initial_loss,
        "final_epoch_loss": result.epoch_means[-1],
        "seconds": round(result.seconds, 3),
    }


def cmd_eval(args) -> dict:
    from .engine import evaluate

    backbone = resolve_backbone(args.backbone)
    cfg = _config(args, backbone)
    bank = _bank(args, cfg, backbone)
    index = index_dataset(args.data, args.layout)
    report = evaluate(cfg, index, backbone, bank, report_dir=args.report)
    print(report.to_table(), file=sys.stderr)
    return {"report": str(Path(args.report) / "report.json"), "mean": report.mean,
            "sample_count": report.sample_count}


def cmd_infer(args) -> dict:
    from .engine import infer

    backbone = resolve_backbone(args.backbone)
    cfg = _config(args, backbone)
    bank = _bank(args, cfg, backbone)
    result = infer(cfg, backbone, bank, args.image, args.out)
    stem = Path(args.image).stem
    return {"image": args.image, "image_score": result.image_score,
            "heatmap": str(Path(args.out) / f"{stem}_heatmap.png"),
            "composite": str(Path(args.out) / f"{stem}_composite.png")}


def cmd_dump(args) -> dict:
    from .engine import dump_embeddings

    backbone = resolve_backbone(args.backbone)
    path = dump_embeddings(backbone, args.ckpt, args.out, history_dir=args.history)
    return {"embeddings": str(path)}


def cmd_visualize(args) -> dict:
    from .engine import visualize

    written = visualize(args.report, args.out)
    return {"written": len(written), "out": args.out}


def cmd_synth(args) -> dict:
    index = synth_blobs(args.normal, args.anomalous, args.resolution, seed=args.seed, class_name=args.class_name)
    root = write_mvtec(index, args.out)
    return {"root": str(root), "samples": len(index)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glocal", description="Glocal prompt learning for zero-shot anomaly detection.")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--backbone", default="toy", help="toy | archive:PATH (default: toy)")
        if config:
            p.add_argument("--config", help="JSON run config; defaults to the checkpoint copy or the toy preset")

    p = sub.add_parser("train", help="learn the prompt bank on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset root or .jsonl index")
    p.add_argument("--layout", default="mvtec", choices=["mvtec", "flat-jsonl"])
    p.add_argument("--out", required=True, help="output directory for checkpoint.npz and loss_history.json")
    p.add_argument("--snapshots", action="store_true", help="also keep a checkpoint per epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a dataset and write a metrics report")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--layout", default="mvtec", choices=["mvtec", "flat-jsonl"])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="anomaly map and score for one image")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="directory for the heatmap PNGs")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("dump-embeddings", help="write the four prompt embeddings as JSON")
    common(p, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="directory of epoch_XX.npz snapshots to include")
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("visualize", help="render heatmaps from an eval report directory")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("synth", help="write a synthetic blob dataset in MVTec layout")
    p.add_argument("--out", required=True)
    p.add_argument("--normal", type=int, default=64)
    p.add_argument("--anomalous", type=int, default=64)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class-name", default="blobs")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except Exception as exc:  # report every failure as JSON, never a bare traceback
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if getattr(exc, "constraint", None):
            err["constraint"] = exc.constraint
        print(json.dumps(err), file=sys.stderr)
        log.debug("command failed", exc_info=True)
        return 1
    print(json.dumps(summary, indent=2, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())

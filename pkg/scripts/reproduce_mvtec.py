"""Extended reproduction on real benchmarks (not part of CI).

Trains prompts on the VisA test split with a pretrained ViT-L/14@336px archive, then
evaluates zero-shot on MVTec AD. Needs three environment variables:

    GLOCAL_CLIP_ARCHIVE  backbone archive produced by ``glocalclip.backbone.save_archive``
    GLOCAL_VISA_ROOT     VisA in the MVTec-style tree (class/test/defect, class/ground_truth)
    GLOCAL_MVTEC_ROOT    MVTec AD root

With ``--check`` the exit code is non-zero unless pixel and image AUROC land within
``--tolerance`` points of the published 91.4 / 91.7.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from glocalclip import RunConfig, evaluate, index_dataset, load_config, resolve_backbone, train
from glocalclip.config import check_against_backbone

REFERENCE = {"pixel_auroc": 91.4, "image_auroc": 91.7}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="RunConfig JSON; defaults to the library defaults")
    ap.add_argument("--out", default="runs/mvtec_repro")
    ap.add_argument("--check", action="store_true")
    ap.add_argument("--tolerance", type=float, default=2.0, help="absolute points")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    env = {k: os.environ.get(k) for k in ("GLOCAL_CLIP_ARCHIVE", "GLOCAL_VISA_ROOT", "GLOCAL_MVTEC_ROOT")}
    missing = [k for k, v in env.items() if not v]
    if missing:
        print(f"missing environment variables: {', '.join(missing)}", file=sys.stderr)
        return 2

    cfg = load_config(args.config) if args.config else RunConfig()
    backbone = resolve_backbone(f"archive:{env['GLOCAL_CLIP_ARCHIVE']}")
    check_against_backbone(cfg, backbone)
    out = Path(args.out)
    res = train(cfg, index_dataset(env["GLOCAL_VISA_ROOT"]), backbone, out_dir=out / "train")
    report = evaluate(cfg, index_dataset(env["GLOCAL_MVTEC_ROOT"]), backbone, res.bank, report_dir=out / "eval")
    print(report.to_table(), file=sys.stderr)

    got = {"pixel_auroc": 100 * report.pixel_auroc, "image_auroc": 100 * report.image_auroc}
    gaps = {k: got[k] - REFERENCE[k] for k in REFERENCE}
    print(json.dumps({"measured": got, "reference": REFERENCE, "gap": gaps}, indent=2))
    if args.check and any(abs(g) > args.tolerance for g in gaps.values()):
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

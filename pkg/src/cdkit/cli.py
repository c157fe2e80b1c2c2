"""Command-line entry point.

Subcommands: split, train, eval, infer, analyze. Exit codes: 0 success,
2 config error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import cluster
from .data import PairFolder, load_pair, make_full_split
from .errors import ConfigError, DataError
from .metrics import binarize
from .trainer import (TrainConfig, Trainer, apply_overrides, build_model_from_checkpoint,
                      evaluate, load_checkpoint)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdkit",
                                     description="semi-supervised change detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="generate labeled/unlabeled split manifests")
    p.add_argument("--root", required=True, help="dataset root with A/, B/, label/")
    p.add_argument("--fraction", type=float, required=True, help="labeled fraction in (0,1]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for the manifest files")
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--test-fraction", type=float, default=0.0)

    p = sub.add_parser("train", help="run a training job from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path config override, applied after the file (repeatable)")
    p.add_argument("--out", help="shorthand for --override out_dir=...")
    p.add_argument("--seed", type=int, help="shorthand for --override seed=...")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--ids", required=True, help="manifest txt file listing the split ids")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="path for the metrics JSON report")

    p = sub.add_parser("infer", help="predict a change mask for one pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--a", required=True, help="pre-change image")
    p.add_argument("--b", required=True, help="post-change image")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("analyze", help="emit image- and feature-domain density maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--ids", help="comma-separated ids (default: every id in the root)")
    p.add_argument("--out", required=True)
    return parser


def run_split(args) -> int:
    if not 0.0 < args.fraction <= 1.0:
        raise ConfigError(f"--fraction must be in (0, 1], got {args.fraction}")
    folder = PairFolder(args.root)
    ids = folder.ids()
    if not ids:
        raise DataError(f"no .png pairs found under {folder.root}/A")
    manifest = make_full_split(ids, args.fraction, args.seed,
                               val_fraction=args.val_fraction,
                               test_fraction=args.test_fraction)
    manifest.save(args.out)
    print(f"labeled={len(manifest.labeled_ids)} unlabeled={len(manifest.unlabeled_ids)} "
          f"val={len(manifest.val_ids)} test={len(manifest.test_ids)}")
    return EXIT_OK


def run_train(args) -> int:
    payload = json.loads(Path(args.config).read_text())
    overrides = list(args.override)
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    payload = apply_overrides(payload, overrides)
    config = TrainConfig.from_dict(payload)
    summary = Trainer(config).fit()
    print(json.dumps(summary))
    return EXIT_OK


def run_eval(args) -> int:
    ids = [line for line in Path(args.ids).read_text().splitlines() if line]
    report = evaluate(args.checkpoint, args.root, ids,
                      threshold=args.threshold, out_path=args.out)
    print(json.dumps(report))
    return EXIT_OK


def _pad_to_multiple(image: torch.Tensor, divisor: int) -> tuple[torch.Tensor, int, int]:
    h, w = image.shape[-2:]
    ph = (divisor - h % divisor) % divisor
    pw = (divisor - w % divisor) % divisor
    if ph or pw:
        image = F.pad(image.unsqueeze(0), (0, pw, 0, ph), mode="reflect").squeeze(0)
    return image, ph, pw


def run_infer(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    model = build_model_from_checkpoint(payload)
    sample = load_pair(args.a, args.b)
    divisor = model.config.size_divisor
    h, w = sample.size
    image_a, ph, pw = _pad_to_multiple(sample.image_a, divisor)
    image_b, _, _ = _pad_to_multiple(sample.image_b, divisor)
    if ph or pw:
        print(f"padded {h}x{w} input to {h + ph}x{w + pw} (multiple of {divisor}); "
              f"output cropped back", file=sys.stderr)
    with torch.no_grad():
        y_hat = model.forward_cd(image_a.unsqueeze(0), image_b.unsqueeze(0))[0]
    prob = y_hat.change_prob[0, :h, :w].numpy()
    mask = binarize(prob, args.threshold)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.a).stem
    Image.fromarray((mask * 255).astype(np.uint8)).save(out / f"{stem}_mask.png")
    np.save(out / f"{stem}_prob.npy", prob)
    print(f"wrote {out / f'{stem}_mask.png'}")
    return EXIT_OK


def run_analyze(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    model = build_model_from_checkpoint(payload)
    folder = PairFolder(args.root)
    ids = args.ids.split(",") if args.ids else folder.ids()
    if not ids:
        raise DataError(f"no pairs to analyze under {folder.root}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for id in ids:
        sample = folder.load(id)
        gt = sample.mask.numpy() if sample.mask is not None else None
        img_density = cluster.image_domain_density(sample)
        cluster.render_density(img_density, gt, out / f"{id}_img_density.png")
        with torch.no_grad():
            f_d = model.forward_cd(sample.image_a.unsqueeze(0),
                                   sample.image_b.unsqueeze(0))[1][0]
        feat_density = cluster.feature_domain_density(f_d)
        cluster.render_density(feat_density, gt, out / f"{id}_feat_density.png")
    print(f"wrote {2 * len(ids)} density maps to {out}")
    return EXIT_OK


_COMMANDS = {
    "split": run_split,
    "train": run_train,
    "eval": run_eval,
    "infer": run_infer,
    "analyze": run_analyze,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands: ``synth-data`` (toy dataset + manifest + verification pairs),
``train`` (stage 1 or 2), ``eval`` (verification metrics on a pairs file),
``removemask`` (restore one image with a stage-2 checkpoint) and
``plot-data`` (masked-unmasked similarity histogram CSV).

Exit codes: 0 on success; on failure a JSON object with an error category
is written to stderr and the code identifies the category.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation, face_data, training
from .config import RunConfig, load_config, write_config_echo
from .generator_gan import plain_skips, suppress_skips
from .training import TrainingDivergedError

_EXIT_CODES = {"invalid-argument": 2, "not-found": 3, "diverged": 4, "internal": 1}


def _error_category(exc: Exception) -> str:
    if isinstance(exc, TrainingDivergedError):
        return "diverged"
    if isinstance(exc, (FileNotFoundError, NotADirectoryError)):
        return "not-found"
    if isinstance(exc, (ValueError, KeyError)):
        return "invalid-argument"
    return "internal"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a toy dataset, manifest and pairs file")
    p.add_argument("--ids", type=int, required=True)
    p.add_argument("--imgs-per-id", type=int, required=True)
    p.add_argument("--masked-ratio", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=112)
    p.add_argument("--mask-style", choices=("trapezoid", "lower_half"), default="trapezoid")
    p.add_argument("--pairs-per-id", type=int, default=8)

    p = sub.add_parser("train", help="run stage-1 or stage-2 training")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--from-checkpoint", dest="from_checkpoint",
                   help="stage-1 checkpoint to start stage 2 from")
    p.add_argument("--resume", help="checkpoint to continue the same stage from")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out", help="override out_dir")

    p = sub.add_parser("eval", help="verification metrics for a checkpoint on a pairs file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--far", type=float, default=0.01)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--out", help="also write the report to this file")

    p = sub.add_parser("removemask", help="restore an unmasked face from one image file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("plot-data", help="masked-unmasked similarity histogram CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--bins", type=int, default=20)
    return parser


def cmd_synth_data(args) -> int:
    manifest = face_data.synthesize_dataset(
        args.out, args.ids, args.imgs_per_id, args.masked_ratio,
        size=args.size, seed=args.seed, mask_style=args.mask_style,
    )
    pairs = evaluation.balanced_pairs_from_manifest(
        manifest, seed=args.seed, per_identity=args.pairs_per_id)
    pairs_path = Path(args.out) / "pairs.tsv"
    evaluation.write_pairs_file(pairs, pairs_path)
    n_masked = len(manifest.masked_records())
    print(f"wrote {len(manifest.records)} records ({n_masked} masked) for "
          f"{manifest.num_identities} identities under {args.out}")
    print(f"manifest: {Path(args.out) / 'manifest.tsv'}")
    print(f"pairs: {pairs_path} ({len(pairs)} pairs)")
    return 0


def cmd_train(args) -> int:
    cfg: RunConfig = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, out_dir / "config_echo.txt")

    if args.stage == 1:
        manifest = face_data.read_manifest(cfg.data.train_manifest)
        result = training.train_stage1(
            manifest, cfg.train, cfg.model, cfg.loss, out_dir, resume_from=args.resume)
        print(f"stage 1 done: step={result.step} loss={result.final_loss:.6f}")
        print(f"checkpoint: {result.checkpoint_path}")
        return 0

    if args.resume is None and not args.from_checkpoint:
        raise ValueError("stage 2 requires --from-checkpoint (a stage-1 checkpoint)")
    manifest_path = cfg.data.paired_manifest or cfg.data.train_manifest
    manifest = face_data.read_manifest(manifest_path)
    base = args.from_checkpoint
    if base is None:  # resuming: reuse the base recorded inside the resume target
        base = args.resume
    result = training.train_stage2(
        base, manifest, cfg.train, out_dir, resume_from=args.resume, weights=cfg.loss)
    print(f"stage 2 done: step={result.step}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    pairs = evaluation.read_pairs_file(args.pairs)
    model = training.load_recognition_model(args.checkpoint)
    sims = evaluation.verify_pairs(model, pairs)
    labels = np.array([p.same_identity for p in pairs])
    report = evaluation.metric_report(sims, labels, far=args.far, folds=args.folds)
    sys.stdout.write(report)
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    return 0


@torch.no_grad()
def cmd_removemask(args) -> int:
    payload = training.load_checkpoint(args.checkpoint)
    if payload["stage"] < 2:
        raise ValueError("removemask needs a stage-2 checkpoint (with a decoder)")
    model, _, decoder, _ = training.restore_models(payload)
    model.eval()
    decoder.eval()
    train_cfg = training.TrainConfig(**payload["train_config"])

    pixels = face_data.load_image(args.input)
    images = torch.from_numpy(pixels).unsqueeze(0)
    out = model(images)
    if train_cfg.mis_on and out.attention is not None:
        skips = suppress_skips(out.encoder, out.attention)
    else:
        skips = plain_skips(out.encoder)
    fake = decoder(skips, out.x_id)
    face_data.save_image(fake[0].numpy(), args.output)
    print(f"restored image written to {args.output}")
    return 0


def cmd_plot_data(args) -> int:
    manifest = face_data.read_manifest(args.manifest)
    model = training.load_recognition_model(args.checkpoint)
    hist = evaluation.similarity_distribution(model, manifest, bins=args.bins)
    hist.to_csv(args.out_csv)
    print(f"histogram with {len(hist.counts)} bins over "
          f"{int(hist.counts.sum())} identities written to {args.out_csv}")
    return 0


_COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "removemask": cmd_removemask,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        category = _error_category(exc)
        print(json.dumps({"category": category, "message": str(exc)}), file=sys.stderr)
        return _EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())

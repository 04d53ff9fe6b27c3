"""Command-line entry point: train, eval, predict, synth, ablate.

Configuration precedence: built-in defaults < --config file <
SEMISEG_<SECTION>_<KEY> environment variables < repeated --set overrides
< dedicated flags (--seed, --device). Every command writes its artifacts
under --run-dir / --out and exits 0 only when all of them were written.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from .config import (ConfigError, ExperimentConfig, apply_env_overrides, apply_overrides,
                     load_config, save_config)
from .data import SplitSpec, load_dataset, make_splits, resize_sample, splits_from_manifest
from .evaluation import evaluate_model, format_mean_std, write_report
from .experiments import format_comparison_table, run_protocol
from .model import load_checkpoint
from .training import run_training


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML config file (sections: model, data, train, loss)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. --set train.lr=5e-4 (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--device", default=None, help="override train.device (cpu or cuda)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semiseg",
        description="Semi-supervised binary segmentation with cross-level "
                    "contrastive and consistency training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the two-stage training loop")
    _add_config_flags(p_train)
    p_train.add_argument("--run-dir", default="runs/train", help="output directory")
    p_train.add_argument("--resume", action="store_true", help="continue from ckpt_last.pt")

    p_eval = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    _add_config_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test",
                        choices=["train_labeled", "train_unlabeled", "val", "test"])
    p_eval.add_argument("--manifest", default=None,
                        help="split manifest for exact re-use of stored partitions")
    p_eval.add_argument("--binarized-mae", action="store_true",
                        help="compute MAE on thresholded predictions instead of probabilities")
    p_eval.add_argument("--run-dir", default="runs/eval", help="output directory")

    p_pred = sub.add_parser("predict", help="segment one image and export mask + overlay")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--image", required=True)
    p_pred.add_argument("--out", default="runs/predict", help="output directory")
    p_pred.add_argument("--prob", action="store_true", help="also export the probability map")
    p_pred.add_argument("--device", default="cpu")

    p_synth = sub.add_parser("synth", help="write a synthetic image/mask dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--count", type=int, default=100)
    p_synth.add_argument("--side", type=int, default=64)
    p_synth.add_argument("--seed", type=int, default=0)

    p_abl = sub.add_parser("ablate", help="train full / contrast-only / consist-only "
                                          "variants over 3 labeled-selection seeds")
    _add_config_flags(p_abl)
    p_abl.add_argument("--run-dir", default="runs/ablate", help="output directory")

    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    apply_env_overrides(cfg)
    apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.device is not None:
        cfg.train.device = args.device
    cfg.validate()
    return cfg


def prepare_samples(cfg: ExperimentConfig) -> list[data_mod.Sample]:
    """Load (or synthesize) the dataset and resize everything to data.side."""
    if cfg.data.root is not None:
        samples = load_dataset(cfg.data.root)
    else:
        samples = data_mod.generate_synthetic(cfg.data.synth_seed, cfg.data.synth_count,
                                              cfg.data.side)
    return [resize_sample(s, cfg.data.side) for s in samples]


def split_spec_from(cfg: ExperimentConfig) -> SplitSpec:
    return SplitSpec(
        seed=cfg.resolved_split_seed(),
        train_frac=cfg.data.train_frac,
        val_frac=cfg.data.val_frac,
        test_frac=cfg.data.test_frac,
        labeled_frac=cfg.data.labeled_frac,
        labeled_seed=cfg.data.labeled_seed,
    )


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    samples = prepare_samples(cfg)
    splits = make_splits(samples, split_spec_from(cfg))

    save_config(cfg, run_dir / "config.yaml")
    data_mod.write_manifest(splits, run_dir / "splits.txt")
    result = run_training(cfg, splits, run_dir, resume=args.resume)
    print(f"best val Dice {result.best_val_dice:.2f} (epoch {result.best_epoch})")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model, _ = load_checkpoint(args.checkpoint, cfg.train.device)
    samples = prepare_samples(cfg)
    if args.manifest:
        splits = splits_from_manifest(samples, data_mod.read_manifest(args.manifest))
    else:
        splits = make_splits(samples, split_spec_from(cfg))
    part = getattr(splits, args.split)
    report = evaluate_model(model, part, cfg.train.device, binarize_mae=args.binarized_mae)
    json_path, txt_path = write_report(report, args.run_dir)
    print(f"{args.split}: MAE {report.mae:.2f}  Dice {report.dice_fg:.2f}  "
          f"mIoU {report.miou:.2f}  ({report.n_samples} samples)")
    print(f"wrote {json_path} and {txt_path}")
    return 0


def _load_image(path) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def cmd_predict(args) -> int:
    model, payload = load_checkpoint(args.checkpoint, args.device)
    image = _load_image(args.image)
    depth = payload["model_config"]["depth"]
    divisor = 2 ** depth
    h, w = image.shape[-2], image.shape[-1]
    th = max(divisor, (h // divisor) * divisor)
    tw = max(divisor, (w // divisor) * divisor)
    resized = torch.nn.functional.interpolate(
        image.unsqueeze(0), size=(th, tw), mode="bilinear", align_corners=False
    ).squeeze(0)

    model.eval()
    with torch.no_grad():
        prob = torch.softmax(model(resized.to(args.device)), dim=0)[1].cpu()
    prob = torch.nn.functional.interpolate(
        prob[None, None], size=(h, w), mode="bilinear", align_corners=False
    )[0, 0]
    mask = (prob > 0.5).numpy()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(out / f"{stem}_mask.png")

    overlay = (image.permute(1, 2, 0).numpy() * 255).astype(np.uint8).copy()
    overlay[mask] = (0.5 * overlay[mask] + 0.5 * np.array([255, 0, 0])).astype(np.uint8)
    Image.fromarray(overlay, mode="RGB").save(out / f"{stem}_overlay.png")
    if args.prob:
        Image.fromarray((prob.numpy() * 255).astype(np.uint8), mode="L").save(
            out / f"{stem}_prob.png")
    print(f"wrote mask and overlay for {stem} to {out}")
    return 0


def cmd_synth(args) -> int:
    samples = data_mod.generate_synthetic(args.seed, args.count, args.side)
    data_mod.save_dataset(samples, args.out)
    print(f"wrote {len(samples)} synthetic samples to {args.out}")
    return 0


ABLATION_VARIANTS = ["contrast_only", "consist_only", "full"]


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")
    samples = prepare_samples(cfg)
    base = cfg.resolved_split_seed()
    labeled_seeds = [base + 1, base + 2, base + 3]
    results = run_protocol(cfg, samples, ABLATION_VARIANTS, labeled_seeds, run_dir,
                           progress=lambda msg: print(msg, flush=True))

    table = format_comparison_table(results)
    (run_dir / "ablation.txt").write_text(table + "\n")
    payload = {
        name: {
            "mae": format_mean_std(r.aggregate.mae_mean, r.aggregate.mae_std),
            "dice": format_mean_std(r.aggregate.dice_mean, r.aggregate.dice_std),
            "miou": format_mean_std(r.aggregate.miou_mean, r.aggregate.miou_std),
            "runs": [
                {"mae": rep.mae, "dice_fg": rep.dice_fg, "miou": rep.miou}
                for rep in r.reports
            ],
        }
        for name, r in results.items()
    }
    (run_dir / "ablation.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(table)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "predict": cmd_predict,
        "synth": cmd_synth,
        "ablate": cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

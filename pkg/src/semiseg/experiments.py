"""Multi-seed protocols: ablation variants and labeled-reselection runs.

A variant is the two-stage machinery with one stage's epochs set to zero
(or both loss weights zeroed for the plain supervised baseline), so every
row of a comparison table runs the identical code path.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig
from .data import Sample, SplitSpec, make_splits
from .evaluation import (MetricsReport, RunAggregate, aggregate_runs, evaluate_model,
                         format_mean_std)
from .model import load_checkpoint
from .training import run_training

VARIANTS = ("full", "contrast_only", "consist_only", "supervised")


def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Derive the stage plan / loss weights for one comparison row."""
    out = cfg.copy()
    if variant == "full":
        pass
    elif variant == "contrast_only":
        out.train.stage1_epochs = out.train.total_epochs
    elif variant == "consist_only":
        out.train.stage1_epochs = 0
    elif variant == "supervised":
        out.loss.alpha = 0.0
        out.loss.beta = 0.0
    else:
        raise ValueError(f"unknown variant '{variant}'; expected one of {VARIANTS}")
    return out


@dataclass
class VariantResult:
    variant: str
    aggregate: RunAggregate
    reports: list[MetricsReport]
    run_dirs: list[Path]


def run_protocol(cfg: ExperimentConfig, samples: list[Sample], variants: list[str],
                 labeled_seeds: list[int], work_dir, eval_split: str = "test",
                 progress=None) -> dict[str, VariantResult]:
    """Each variant trained once per labeled-selection seed, scored on ``eval_split``.

    The train/val/test membership is fixed by the split seed; only which
    train samples keep their labels is re-drawn per run.
    """
    work_dir = Path(work_dir)
    results: dict[str, VariantResult] = {}
    for variant in variants:
        vcfg = variant_config(cfg, variant)
        reports, run_dirs = [], []
        for seed in labeled_seeds:
            spec = SplitSpec(
                seed=vcfg.resolved_split_seed(),
                train_frac=vcfg.data.train_frac,
                val_frac=vcfg.data.val_frac,
                test_frac=vcfg.data.test_frac,
                labeled_frac=vcfg.data.labeled_frac,
                labeled_seed=seed,
            )
            splits = make_splits(samples, spec)
            run_dir = work_dir / variant / f"labeled_seed_{seed}"
            if progress:
                progress(f"[{variant}] labeled_seed={seed} -> {run_dir}")
            result = run_training(vcfg, splits, run_dir)
            model, _ = load_checkpoint(result.best_checkpoint, vcfg.train.device)
            report = evaluate_model(model, getattr(splits, eval_split), vcfg.train.device)
            reports.append(report)
            run_dirs.append(run_dir)
        results[variant] = VariantResult(
            variant=variant,
            aggregate=aggregate_runs(reports),
            reports=reports,
            run_dirs=run_dirs,
        )
    return results


def format_comparison_table(results: dict[str, VariantResult]) -> str:
    """Rows of 'mean ± std' per metric, one line per variant."""
    lines = [
        f"{'variant':<16} {'MAE':>16} {'Dice':>16} {'mIoU':>16}",
        "-" * 68,
    ]
    for name, res in results.items():
        agg = res.aggregate
        lines.append(
            f"{name:<16} {format_mean_std(agg.mae_mean, agg.mae_std):>16} "
            f"{format_mean_std(agg.dice_mean, agg.dice_std):>16} "
            f"{format_mean_std(agg.miou_mean, agg.miou_std):>16}"
        )
    return "\n".join(lines)

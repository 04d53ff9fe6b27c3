"""Segmentation metrics (MAE, foreground Dice, mIoU) and run aggregation.

All three metrics are percentages. MAE defaults to the probability-based
reading (|prob - mask|, no binarization); pass ``binarize_mae=True`` for the
thresholded variant. Binarization uses prob > 0.5, so an exact tie counts as
background. Empty-class conventions: a class absent from both prediction and
ground truth scores perfectly (Dice 100 when both masks are empty, per-class
IoU 1 when the class is missing from both).
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import torch


@dataclass
class MetricsReport:
    mae: float
    dice_fg: float
    miou: float
    n_samples: int
    per_sample: list[tuple[float, float, float]] = field(default_factory=list)
    sample_ids: list[str] = field(default_factory=list)


@dataclass
class RunAggregate:
    mae_mean: float
    mae_std: float
    dice_mean: float
    dice_std: float
    miou_mean: float
    miou_std: float
    n_runs: int


def compute_metrics(prob_fg: torch.Tensor, mask: torch.Tensor) -> tuple[float, float, float]:
    """(MAE, foreground Dice, mIoU) in percent for one prediction/mask pair."""
    if prob_fg.shape != mask.shape:
        raise ValueError(
            f"prediction shape {tuple(prob_fg.shape)} does not match mask {tuple(mask.shape)}"
        )
    if float(prob_fg.min()) < 0.0 or float(prob_fg.max()) > 1.0:
        raise ValueError("foreground probabilities must lie in [0, 1]")

    p = prob_fg.double()
    y = mask.double()
    mae = 100.0 * float((p - y).abs().mean())

    pred_fg = prob_fg > 0.5
    true_fg = mask > 0.5
    total = pred_fg.numel()
    inter = int((pred_fg & true_fg).sum())
    n_pred = int(pred_fg.sum())
    n_true = int(true_fg.sum())

    if n_pred + n_true == 0:
        dice = 100.0
    else:
        dice = 100.0 * 2.0 * inter / (n_pred + n_true)

    union_fg = n_pred + n_true - inter
    iou_fg = 1.0 if union_fg == 0 else inter / union_fg
    inter_bg = total - union_fg
    union_bg = total - inter
    iou_bg = 1.0 if union_bg == 0 else inter_bg / union_bg
    miou = 100.0 * 0.5 * (iou_fg + iou_bg)
    return mae, dice, miou


def evaluate_model(model, samples, device: str = "cpu",
                   binarize_mae: bool = False) -> MetricsReport:
    """Eval-mode forward over ``samples``; per-sample metrics averaged."""
    if not samples:
        raise ValueError("cannot evaluate on an empty split")
    model = model.to(device)
    was_training = model.training
    model.eval()
    rows, ids = [], []
    with torch.no_grad():
        for s in samples:
            if s.mask is None:
                raise ValueError(f"sample '{s.id}' has no mask; cannot score it")
            logits = model(s.image.to(device))
            prob_fg = torch.softmax(logits, dim=0)[1].cpu()
            if binarize_mae:
                prob_fg_for_mae = (prob_fg > 0.5).to(prob_fg.dtype)
                mae = compute_metrics(prob_fg_for_mae, s.mask)[0]
                _, dice, miou = compute_metrics(prob_fg, s.mask)
            else:
                mae, dice, miou = compute_metrics(prob_fg, s.mask)
            rows.append((mae, dice, miou))
            ids.append(s.id)
    if was_training:
        model.train()
    n = len(rows)
    return MetricsReport(
        mae=sum(r[0] for r in rows) / n,
        dice_fg=sum(r[1] for r in rows) / n,
        miou=sum(r[2] for r in rows) / n,
        n_samples=n,
        per_sample=rows,
        sample_ids=ids,
    )


def aggregate_runs(reports: list[MetricsReport]) -> RunAggregate:
    """Mean and sample standard deviation (N-1) per metric over repeated runs."""
    if len(reports) < 2:
        raise ValueError(f"need at least 2 reports to aggregate, got {len(reports)}")
    maes = [r.mae for r in reports]
    dices = [r.dice_fg for r in reports]
    mious = [r.miou for r in reports]
    return RunAggregate(
        mae_mean=statistics.mean(maes), mae_std=statistics.stdev(maes),
        dice_mean=statistics.mean(dices), dice_std=statistics.stdev(dices),
        miou_mean=statistics.mean(mious), miou_std=statistics.stdev(mious),
        n_runs=len(reports),
    )


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "aggregate": {"mae": report.mae, "dice_fg": report.dice_fg, "miou": report.miou},
        "n_samples": report.n_samples,
        "per_sample": [
            {"id": i, "mae": m, "dice_fg": d, "miou": u}
            for i, (m, d, u) in zip(report.sample_ids, report.per_sample)
        ],
    }


def write_report(report: MetricsReport, out_dir, stem: str = "report") -> tuple[Path, Path]:
    """Emit <stem>.json (per-sample rows + aggregate) and a readable <stem>.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    txt_path = out_dir / f"{stem}.txt"
    json_path.write_text(json.dumps(report_to_dict(report), indent=2) + "\n")

    lines = [
        f"{'sample':<20} {'MAE':>8} {'Dice':>8} {'mIoU':>8}",
        "-" * 48,
    ]
    for i, (m, d, u) in zip(report.sample_ids, report.per_sample):
        lines.append(f"{i:<20} {m:>8.2f} {d:>8.2f} {u:>8.2f}")
    lines.append("-" * 48)
    lines.append(
        f"{'mean (' + str(report.n_samples) + ')':<20} "
        f"{report.mae:>8.2f} {report.dice_fg:>8.2f} {report.miou:>8.2f}"
    )
    txt_path.write_text("\n".join(lines) + "\n")
    return json_path, txt_path

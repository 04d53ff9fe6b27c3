"""Two-stage training loop: batch composition, loss scheduling, checkpoints.

Stage 1 (epochs [0, stage1_epochs)) trains with supervised + contrastive
losses (alpha, 0); stage 2 trains with supervised + consistency losses
(0, beta). An epoch is one pass over the unlabeled pool (the labeled pool
cycles), or over the labeled pool when no unlabeled data is used. A loss
whose weight is zero is skipped entirely, including the patch forward
passes only it would need.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import ExperimentConfig
from .data import Sample, Splits, apply_flips
from .evaluation import evaluate_model
from .losses import LossWeights, consistency_loss, contrastive_loss, supervised_loss, total_loss
from .model import CrossLevelNet, load_checkpoint, save_checkpoint
from .patching import batch_blocks

LOG_FILENAME = "log.jsonl"
BEST_CHECKPOINT = "ckpt_best.pt"
LAST_CHECKPOINT = "ckpt_last.pt"


class NonFiniteLossError(RuntimeError):
    pass


def loss_schedule(epoch: int, cfg: ExperimentConfig) -> tuple[float, float]:
    """(alpha, beta) for ``epoch``: (alpha, 0) in stage 1, (0, beta) after."""
    if not 0 <= epoch < cfg.train.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside [0, {cfg.train.total_epochs})"
        )
    if epoch < cfg.train.stage1_epochs:
        return cfg.loss.alpha, 0.0
    return 0.0, cfg.loss.beta


@dataclass
class Batch:
    """Labeled samples first; masks cover only the labeled prefix."""

    images: torch.Tensor            # [B, 3, H, W]
    masks: torch.Tensor | None      # [n_labeled, H, W] or None
    n_labeled: int
    ids: list[str]

    def to(self, device) -> "Batch":
        return Batch(
            images=self.images.to(device),
            masks=None if self.masks is None else self.masks.to(device),
            n_labeled=self.n_labeled,
            ids=self.ids,
        )


class BatchComposer:
    """Without-replacement batch sampler over the labeled and unlabeled pools.

    Each pool is consumed as a shuffled queue; a queue that empties mid-epoch
    is reshuffled and cycled. ``start_epoch`` resets both queues so every
    epoch begins from a fresh shuffle.
    """

    def __init__(self, labeled: list[Sample], unlabeled: list[Sample],
                 labeled_per_batch: int, unlabeled_per_batch: int,
                 rng: random.Random, flip_augment: bool = False,
                 aug_rng: random.Random | None = None):
        if labeled_per_batch > 0 and not labeled:
            raise ValueError("labeled pool is empty but labeled_per_batch > 0")
        if unlabeled_per_batch > 0 and not unlabeled:
            raise ValueError("unlabeled pool is empty but unlabeled_per_batch > 0")
        if labeled_per_batch + unlabeled_per_batch <= 0:
            raise ValueError("batch must draw at least one sample")
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.labeled_per_batch = labeled_per_batch
        self.unlabeled_per_batch = unlabeled_per_batch
        self.rng = rng
        self.flip_augment = flip_augment
        self.aug_rng = aug_rng or random.Random(0)
        self._labeled_queue: list[Sample] = []
        self._unlabeled_queue: list[Sample] = []

    def steps_per_epoch(self) -> int:
        if self.unlabeled_per_batch > 0:
            return max(1, len(self.unlabeled) // self.unlabeled_per_batch)
        return max(1, len(self.labeled) // self.labeled_per_batch)

    def start_epoch(self) -> None:
        self._labeled_queue = self._reshuffled(self.labeled)
        self._unlabeled_queue = self._reshuffled(self.unlabeled)

    def _reshuffled(self, pool: list[Sample]) -> list[Sample]:
        queue = list(pool)
        self.rng.shuffle(queue)
        return queue

    def _draw(self, pool: list[Sample], queue: list[Sample], k: int) -> list[Sample]:
        out = []
        for _ in range(k):
            if not queue:
                queue.extend(self._reshuffled(pool))
            out.append(queue.pop(0))
        return out

    def compose_batch(self) -> Batch:
        labeled = self._draw(self.labeled, self._labeled_queue, self.labeled_per_batch)
        unlabeled = [
            s.with_mask_stripped()
            for s in self._draw(self.unlabeled, self._unlabeled_queue, self.unlabeled_per_batch)
        ]
        samples = labeled + unlabeled
        if self.flip_augment:
            samples = [
                apply_flips(s, self.aug_rng.random() < 0.5, self.aug_rng.random() < 0.5)
                for s in samples
            ]
        n_labeled = len(labeled)
        images = torch.stack([s.image for s in samples])
        masks = torch.stack([s.mask for s in samples[:n_labeled]]) if n_labeled else None
        return Batch(images=images, masks=masks, n_labeled=n_labeled,
                     ids=[s.id for s in samples])


@dataclass
class StepLog:
    total: float
    sup: float
    contrast: float | None    # None means the loss was skipped (zero weight)
    consist: float | None
    grad_norm: float
    n_labeled: int
    ids: list[str]


def compute_batch_losses(model: CrossLevelNet, batch: Batch, weights: LossWeights,
                         n: int) -> dict:
    """Forward passes and loss terms for one batch; no parameter updates.

    Supervised loss covers only the labeled prefix; contrastive/consistency
    cover every image. Patch forwards run once, batched, and only when a
    nonzero weight needs them.
    """
    fm = model.backbone_forward(batch.images)            # [B, C, H, W]
    logits = model.predict_head(fm)                      # [B, 2, H, W]

    zero = logits.sum() * 0.0
    if batch.n_labeled > 0:
        sup = supervised_loss(logits[:batch.n_labeled], batch.masks)
    else:
        sup = zero

    contrast = consist = None
    if weights.alpha > 0 or weights.beta > 0:
        b = batch.images.shape[0]
        patches = batch_blocks(batch.images, n)          # [B, n^2, 3, h, w]
        flat = patches.reshape(b * n * n, *patches.shape[2:])
        patch_fm = model.backbone_forward(flat)
        if weights.alpha > 0:
            grid = model.project_global(fm, n)           # [B, n, n, D]
            vecs = model.project_patch(patch_fm).reshape(b, n * n, -1)
            contrast = contrastive_loss(grid, vecs, weights.tau)
        if weights.beta > 0:
            patch_logits = model.predict_head(patch_fm)
            patch_logits = patch_logits.reshape(b, n * n, *patch_logits.shape[1:])
            consist = consistency_loss(logits, patch_logits, n)

    total = total_loss(
        sup,
        contrast if contrast is not None else zero,
        consist if consist is not None else zero,
        weights,
    )
    return {"sup": sup, "contrast": contrast, "consist": consist, "total": total}


def grad_norm(model: torch.nn.Module) -> float:
    sq = 0.0
    for p in model.parameters():
        if p.grad is not None:
            sq += float(p.grad.pow(2).sum())
    return sq ** 0.5


def train_step(model: CrossLevelNet, batch: Batch, weights: LossWeights,
               optimizer: torch.optim.Optimizer, n: int) -> StepLog:
    """One optimizer update; aborts with diagnostics on a non-finite loss."""
    model.train()
    optimizer.zero_grad()
    terms = compute_batch_losses(model, batch, weights, n)
    total = terms["total"]
    total.backward()
    norm = grad_norm(model)
    scalars = {
        k: None if terms[k] is None else float(terms[k].detach())
        for k in ("total", "sup", "contrast", "consist")
    }
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss: total={scalars['total']} sup={scalars['sup']} "
            f"contrast={scalars['contrast']} consist={scalars['consist']} "
            f"grad_norm={norm} batch_ids={batch.ids}"
        )
    optimizer.step()
    return StepLog(
        total=scalars["total"],
        sup=scalars["sup"],
        contrast=scalars["contrast"],
        consist=scalars["consist"],
        grad_norm=norm,
        n_labeled=batch.n_labeled,
        ids=batch.ids,
    )


def make_optimizer(model: torch.nn.Module, cfg: ExperimentConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.train.lr, betas=(0.9, 0.999),
                             weight_decay=cfg.train.weight_decay)


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_val_dice: float
    best_epoch: int
    epochs_run: int


def _mean_or_none(values: list) -> float | None:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return sum(present) / len(present)


def run_training(cfg: ExperimentConfig, splits: Splits, run_dir,
                 resume: bool = False) -> TrainResult:
    """Run the two-stage schedule over ``splits``; checkpoint the best val Dice.

    Writes one JSON record per epoch to ``run_dir/log.jsonl`` and keeps
    ``ckpt_best.pt`` / ``ckpt_last.pt`` up to date. With ``resume=True`` the
    run continues exactly from ``ckpt_last.pt`` (weights, optimizer moments
    and RNG states are restored).
    """
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / LOG_FILENAME
    best_path = run_dir / BEST_CHECKPOINT
    last_path = run_dir / LAST_CHECKPOINT
    device = cfg.train.device

    torch.manual_seed(cfg.train.seed)
    rng = random.Random(cfg.train.seed)
    aug_rng = random.Random(cfg.train.seed + 7919)

    model = CrossLevelNet(cfg.model).to(device)
    optimizer = make_optimizer(model, cfg)
    start_epoch = 0
    best_val_dice = float("-inf")
    best_epoch = -1

    if resume:
        if not last_path.exists():
            raise FileNotFoundError(f"cannot resume: {last_path} does not exist")
        model, payload = load_checkpoint(last_path, device)
        optimizer = make_optimizer(model, cfg)
        optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["epoch"] + 1
        best_val_dice = payload["best_val_dice"]
        best_epoch = payload["best_epoch"]
        rng.setstate(payload["rng_state"])
        aug_rng.setstate(payload["aug_rng_state"])
        torch.set_rng_state(payload["torch_rng_state"])
    else:
        log_path.write_text("")

    composer = BatchComposer(
        splits.train_labeled, splits.train_unlabeled,
        cfg.train.labeled_per_batch, cfg.train.unlabeled_per_batch,
        rng, flip_augment=cfg.data.flip_augment, aug_rng=aug_rng,
    )

    step = 0 if not resume else payload.get("step", 0)
    for epoch in range(start_epoch, cfg.train.total_epochs):
        # Stage 2 restarts from the best stage-1 weights with a fresh optimizer.
        if epoch == cfg.train.stage1_epochs and epoch > 0 and best_path.exists():
            model, _ = load_checkpoint(best_path, device)
            optimizer = make_optimizer(model, cfg)

        alpha, beta = loss_schedule(epoch, cfg)
        weights = LossWeights(alpha=alpha, beta=beta, tau=cfg.loss.tau)

        composer.start_epoch()
        logs: list[StepLog] = []
        model.train()
        for _ in range(composer.steps_per_epoch()):
            batch = composer.compose_batch().to(device)
            logs.append(train_step(model, batch, weights, optimizer, cfg.model.grid_side))
            step += 1

        val_report = evaluate_model(model, splits.val, device)
        record = {
            "epoch": epoch,
            "alpha": alpha,
            "beta": beta,
            "steps": len(logs),
            "loss_total": _mean_or_none([l.total for l in logs]),
            "loss_sup": _mean_or_none([l.sup for l in logs]),
            "loss_contrast": _mean_or_none([l.contrast for l in logs]),
            "loss_consist": _mean_or_none([l.consist for l in logs]),
            "val_mae": val_report.mae,
            "val_dice": val_report.dice_fg,
            "val_miou": val_report.miou,
        }
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

        if val_report.dice_fg > best_val_dice:
            best_val_dice = val_report.dice_fg
            best_epoch = epoch
            save_checkpoint(best_path, model, extra={
                "epoch": epoch,
                "val_mae": val_report.mae,
                "val_dice": val_report.dice_fg,
                "val_miou": val_report.miou,
            })
        save_checkpoint(last_path, model, extra={
            "optimizer_state": optimizer.state_dict(),
            "epoch": epoch,
            "step": step,
            "best_val_dice": best_val_dice,
            "best_epoch": best_epoch,
            "rng_state": rng.getstate(),
            "aug_rng_state": aug_rng.getstate(),
            "torch_rng_state": torch.get_rng_state(),
        })

    return TrainResult(
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        log_path=log_path,
        best_val_dice=best_val_dice,
        best_epoch=best_epoch,
        epochs_run=cfg.train.total_epochs - start_epoch,
    )

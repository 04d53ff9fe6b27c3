"""Semi-supervised binary segmentation with cross-level contrastive and
consistency training."""

from .config import (DataConfig, ExperimentConfig, LossConfig, ModelConfig, TrainConfig,
                     default_config, desk_config, load_config)
from .data import Sample, Splits, SplitSpec, generate_synthetic, load_dataset, make_splits
from .evaluation import MetricsReport, RunAggregate, aggregate_runs, compute_metrics, evaluate_model
from .losses import (LossWeights, ce_loss, consistency_loss, contrastive_loss, dice_loss,
                     supervised_loss, total_loss)
from .model import CrossLevelNet, UNetBackbone, load_checkpoint, save_checkpoint
from .patching import PatchSet, crop_aligned, decompose_image, reassemble
from .training import BatchComposer, NonFiniteLossError, loss_schedule, run_training, train_step

__version__ = "0.1.0"

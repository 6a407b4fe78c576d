"""Coarse training, one-pass refinement, losses and metrics."""
from .coarse import TrainingError, coarse_train, densify_and_prune, init_model, train_psnr_full
from .config import TrainConfig
from .evaluate import TrainLog, color_drift, mean_psnr, per_view_metrics, write_eval_csv
from .losses import GradientMagnitudeLoss, l1_loss, metrics, psnr, ssim
from .optim import Adam
from .refine import (
    BlurSharpenRefiner,
    IdentityRefiner,
    OracleRefiner,
    RefineCache,
    make_refiner,
    refine_train,
    view_weight,
)

__all__ = [
    "Adam", "BlurSharpenRefiner", "GradientMagnitudeLoss", "IdentityRefiner", "OracleRefiner",
    "RefineCache", "TrainConfig", "TrainLog", "TrainingError", "coarse_train", "color_drift",
    "densify_and_prune", "init_model", "l1_loss", "make_refiner", "mean_psnr", "metrics",
    "per_view_metrics", "psnr", "refine_train", "ssim", "train_psnr_full", "view_weight",
    "write_eval_csv",
]

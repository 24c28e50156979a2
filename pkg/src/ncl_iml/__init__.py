"""Tamper localization trained with contour-pivot contrastive and contour-weighted losses."""
from .losses import ncl_loss, pc_loss, total_loss
from .model import BackboneConfig, NCLNet, predict
from .pivot import PivotNet, pivot_forward
from .taxonomy import PatchLabel, partition_patches
from .trainer import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "NCLNet",
    "PatchLabel",
    "PivotNet",
    "TrainConfig",
    "fit",
    "ncl_loss",
    "partition_patches",
    "pc_loss",
    "pivot_forward",
    "predict",
    "total_loss",
]

"""Prompt-routed, mask-guided single-image deraining with scheduled losses."""

from .backbone import BackboneConfig, DerainModel, count_params
from .data import DatasetManifest, ImagePair, RainMask, gt_mask, synth_rain
from .losses import LossSchedule, dls_loss, total_loss
from .perception import MaskPredictor, RoutingDecision, route
from .training import TrainConfig, evaluate_checkpoint, train
from .vlm import PromptSet, builtin_prompt_set, create_encoder

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "DerainModel",
    "count_params",
    "DatasetManifest",
    "ImagePair",
    "RainMask",
    "gt_mask",
    "synth_rain",
    "LossSchedule",
    "dls_loss",
    "total_loss",
    "MaskPredictor",
    "RoutingDecision",
    "route",
    "TrainConfig",
    "evaluate_checkpoint",
    "train",
    "PromptSet",
    "builtin_prompt_set",
    "create_encoder",
    "__version__",
]

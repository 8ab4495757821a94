"""Rain perception: prompt-based routing and pixel-level rain confidence.

Routing scores an image against a prompt set through the vision-language
gateway and dispatches it to the sub-network with the highest similarity.
Mask predictors produce per-pixel rain confidence at each decoder level and
are supervised with BCE against thresholded rainy/clean differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .vlm import Embedding, PromptSet, match_scores

BCE_CLAMP = 1e-7

# mask supervision sites run at these fractions of the crop, shallow to deep
MASK_LEVEL_FACTORS = (1, 2, 4)


@dataclass
class RoutingDecision:
    """Softmax similarity scores plus the argmax sub-network index."""

    scores: list[float]
    selected: int

    def __post_init__(self) -> None:
        if not np.isclose(sum(self.scores), 1.0, atol=1e-6):
            raise ValueError(f"routing scores must sum to 1, got {sum(self.scores)}")
        if self.selected != int(np.argmax(self.scores)):
            raise ValueError("selected index must be the (lowest) argmax of the scores")


def route(img: np.ndarray, prompts: PromptSet, gateway) -> RoutingDecision:
    """Pick the sub-network whose prompt best matches the image.

    Ties break toward the lowest index (np.argmax convention), which keeps
    routing deterministic for degenerate encoders.
    """
    img_emb = gateway.encode_image(img)
    txt_embs = gateway.encode_prompts(prompts)
    scores = match_scores(img_emb, txt_embs)
    return RoutingDecision(scores=scores, selected=int(np.argmax(scores)))


def route_from_embeddings(img_emb: Embedding, txt_embs: list[Embedding]) -> RoutingDecision:
    scores = match_scores(img_emb, txt_embs)
    return RoutingDecision(scores=scores, selected=int(np.argmax(scores)))


class MaskPredictor(nn.Module):
    """3x3 conv, GELU, 1x1 conv, sigmoid: per-pixel rain confidence in (0,1)."""

    def __init__(self, in_channels: int, hidden_channels: int | None = None):
        super().__init__()
        hidden = hidden_channels or in_channels
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv2(F.gelu(self.conv1(x))))


def bce_mask_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with predictions clamped away from {0,1}."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    pred = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(gt * pred.log() + (1.0 - gt) * (1.0 - pred).log()).mean()


def multilevel_mask_losses(
    preds: list[torch.Tensor], gt_full: torch.Tensor
) -> list[torch.Tensor]:
    """BCE at each supervision site, shallow to deep.

    The full-resolution ground truth is max-pooled to each prediction's
    resolution so thin streaks stay rainy at coarse levels.
    """
    if len(preds) != len(MASK_LEVEL_FACTORS):
        raise ValueError(f"expected {len(MASK_LEVEL_FACTORS)} mask predictions, got {len(preds)}")
    losses = []
    for pred, factor in zip(preds, MASK_LEVEL_FACTORS):
        gt = gt_full if factor == 1 else F.max_pool2d(gt_full, factor)
        if pred.shape != gt.shape:
            raise ValueError(
                f"level with factor {factor}: prediction shape {tuple(pred.shape)} "
                f"does not match pooled ground truth {tuple(gt.shape)}"
            )
        losses.append(bce_mask_loss(pred, gt))
    return losses

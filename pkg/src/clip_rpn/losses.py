"""Progress-scheduled reconstruction loss and the combined training objective.

The reconstruction loss raises per-pixel absolute error to an exponent that
grows with training progress: small errors dominate the gradient early
(exponent < 1), large errors late (exponent > 1). The total objective adds
the three mask BCE terms at a fixed 0.1 weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .perception import bce_mask_loss

EPS_FLOOR = 1e-6
BCE_WEIGHT = 0.1

BASELINE_KINDS = ("l1", "l2", "huber")
HUBER_DELTA = 1.0


def linear_ramp(total_steps: int) -> Callable[[float], float]:
    """Identity schedule: f(tau) = tau."""
    del total_steps
    return lambda tau: tau


def cosine_ramp(total_steps: int) -> Callable[[float], float]:
    """Slow start and finish; hits 0 at tau=0 and total_steps at tau=T."""
    return lambda tau: total_steps * 0.5 * (1.0 - math.cos(math.pi * tau / total_steps))


def step_ramp(total_steps: int, stages: int = 4) -> Callable[[float], float]:
    """Piecewise-constant schedule with the same endpoints as the linear ramp."""
    return lambda tau: total_steps * math.floor(stages * tau / total_steps) / stages


@dataclass
class LossSchedule:
    """Exponent schedule: exponent(tau) = beta + eta * f(tau) / total_steps."""

    beta: float = 0.8
    eta: float = 2.3
    total_steps: int = 1
    schedule_fn: Callable[[float], float] | None = None  # None = linear

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.eta < 0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be at least 1, got {self.total_steps}")

    def exponent(self, step: float) -> float:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        ramp = self.schedule_fn(step) if self.schedule_fn is not None else step
        return self.beta + self.eta * (ramp / self.total_steps)


def dls_loss(
    pred: torch.Tensor, target: torch.Tensor, schedule: LossSchedule, step: float
) -> torch.Tensor:
    """Mean of |pred - target|^exponent(step), error floored at 1e-6.

    The floor keeps the sub-unit-exponent gradient p * eps^(p-1) finite as
    the error approaches zero.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    eps = (pred - target).abs().clamp(min=EPS_FLOOR)
    return eps.pow(schedule.exponent(step)).mean()


def dls_gradient_profile(
    schedule: LossSchedule, step: float, eps_grid: np.ndarray
) -> np.ndarray:
    """Analytic dl/deps = p * eps^(p-1) over an error grid in (0, 1]."""
    eps_grid = np.asarray(eps_grid, dtype=np.float64)
    if eps_grid.size == 0 or eps_grid.min() <= 0 or eps_grid.max() > 1:
        raise ValueError("eps grid must lie in (0, 1]")
    p = schedule.exponent(step)
    return p * eps_grid ** (p - 1.0)


def baseline_loss(pred: torch.Tensor, target: torch.Tensor, kind: str) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if kind == "l1":
        return F.l1_loss(pred, target)
    if kind == "l2":
        return F.mse_loss(pred, target)
    if kind == "huber":
        return F.huber_loss(pred, target, delta=HUBER_DELTA)
    raise ValueError(f"unknown loss kind {kind!r}, expected one of {BASELINE_KINDS + ('dls',)}")


@dataclass
class TotalLossBreakdown:
    reconstruction: torch.Tensor
    mask_bce: list[torch.Tensor] = field(default_factory=list)
    total: torch.Tensor = None
    current_exponent: float = float("nan")


def total_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    mask_preds: list[torch.Tensor],
    mask_gts: list[torch.Tensor],
    schedule: LossSchedule,
    step: float,
    recon_kind: str = "dls",
) -> TotalLossBreakdown:
    """Reconstruction plus 0.1-weighted per-level mask BCE.

    With no mask predictions (sub-networks disabled) the BCE terms are zero
    and the total reduces to the reconstruction loss. current_exponent
    reports the effective error exponent of the reconstruction term (NaN for
    Huber, whose exponent is error-dependent).
    """
    if len(mask_preds) != len(mask_gts):
        raise ValueError(f"{len(mask_preds)} mask predictions vs {len(mask_gts)} ground truths")
    if recon_kind == "dls":
        recon = dls_loss(pred, target, schedule, step)
        exponent = schedule.exponent(step)
    else:
        recon = baseline_loss(pred, target, recon_kind)
        exponent = {"l1": 1.0, "l2": 2.0, "huber": float("nan")}[recon_kind]
    if mask_preds:
        bces = [bce_mask_loss(p, g) for p, g in zip(mask_preds, mask_gts)]
    else:
        bces = [torch.zeros((), dtype=pred.dtype, device=pred.device) for _ in range(3)]
    total = recon + BCE_WEIGHT * sum(bces)
    return TotalLossBreakdown(
        reconstruction=recon, mask_bce=bces, total=total, current_exponent=exponent
    )

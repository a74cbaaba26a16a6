"""Soft Dice + focal objective, weighted per view."""
from __future__ import annotations

import torch
from pydantic import BaseModel, ConfigDict, Field

DICE_EPS = 1e-6
PROB_CLAMP = 1e-7


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda_sa: float = Field(75.0, ge=0)
    lambda_la: float = Field(1.0, ge=0)
    alpha: float = Field(0.25, ge=0, le=1)
    gamma: float = Field(2.0, ge=0)


def dice_loss(prob: torch.Tensor, truth: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)."""
    truth = truth.to(prob.dtype)
    inter = (prob * truth).sum()
    return 1.0 - (2.0 * inter + eps) / (prob.sum() + truth.sum() + eps)


def focal_loss(prob: torch.Tensor, truth: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Voxel mean of -alpha_t (1 - p_t)^gamma log p_t; alpha on foreground, 1 - alpha on background."""
    truth = truth.to(prob.dtype)
    p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = torch.where(truth > 0.5, p, 1.0 - p)
    alpha_t = torch.where(truth > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1.0 - alpha))
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def combine(sa_dice, sa_focal, la_dice, la_focal, weights: LossWeights):
    return weights.lambda_sa * (sa_dice + sa_focal) + weights.lambda_la * (la_dice + la_focal)


def total_loss(sa_pred, sa_truth, la_pred, la_truth, weights: LossWeights | None = None) -> torch.Tensor:
    w = weights or LossWeights()
    return combine(
        dice_loss(sa_pred, sa_truth), focal_loss(sa_pred, sa_truth, w.alpha, w.gamma),
        dice_loss(la_pred, la_truth), focal_loss(la_pred, la_truth, w.alpha, w.gamma),
        w,
    )

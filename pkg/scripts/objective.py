"""
Training loss: focal loss on the stacked [S_n, S_a] maps plus dice loss on S_a.
"""

from dataclasses import dataclass
from typing import Dict, Union

import numpy as np
import torch

from scripts.errors import ShapeError
from scripts.mask_gen import AnomalyMask

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 1.0
DICE_EPSILON = 1.0
PROBABILITY_FLOOR = 1e-7

Target = Union[AnomalyMask, np.ndarray, torch.Tensor]


@dataclass
class LossBreakdown:
    focal: torch.Tensor
    dice: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {"focal": self.focal.detach().item(), "dice": self.dice.detach().item(), "total": self.total.detach().item()}


def as_target(Y: Target, like: torch.Tensor) -> torch.Tensor:
    """Binary mask as a tensor of `like`'s dtype and shape."""
    if isinstance(Y, AnomalyMask):
        Y = Y.values
    target = torch.as_tensor(np.asarray(Y) if not isinstance(Y, torch.Tensor) else Y)
    target = (target.to(torch.float64) > 0.5).to(like.dtype)
    if target.shape != like.shape:
        raise ShapeError(f"mask shape {tuple(target.shape)} does not match map shape {tuple(like.shape)}")
    return target


def focal_loss(
    S_n: torch.Tensor,
    S_a: torch.Tensor,
    Y: Target,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
) -> torch.Tensor:
    """
    Mean over pixels of -alpha * (1 - p_t)^gamma * log(p_t).

    p_t is S_a on mask pixels and S_n elsewhere, floored at 1e-7 before the log.
    """
    if S_n.shape != S_a.shape:
        raise ShapeError(f"S_n {tuple(S_n.shape)} and S_a {tuple(S_a.shape)} differ")
    target = as_target(Y, S_a)
    p_t = torch.where(target > 0, S_a, S_n).clamp_min(PROBABILITY_FLOOR)
    return (-alpha * (1.0 - p_t).pow(gamma) * torch.log(p_t)).mean()


def dice_loss(S_a: torch.Tensor, Y: Target, epsilon: float = DICE_EPSILON) -> torch.Tensor:
    """
    1 - (2·Σ(S_a·Y) + ε) / (ΣS_a + ΣY + ε), per map; a (B, H, W) batch averages over B.
    """
    target = as_target(Y, S_a)
    dims = (-2, -1)
    overlap = (S_a * target).sum(dim=dims)
    denominator = S_a.sum(dim=dims) + target.sum(dim=dims) + epsilon
    return (1.0 - (2.0 * overlap + epsilon) / denominator).mean()


def total_loss(
    S_n: torch.Tensor,
    S_a: torch.Tensor,
    Y: Target,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
    epsilon: float = DICE_EPSILON,
) -> LossBreakdown:
    focal = focal_loss(S_n, S_a, Y, gamma, alpha)
    dice = dice_loss(S_a, Y, epsilon)
    return LossBreakdown(focal=focal, dice=dice, total=focal + dice)

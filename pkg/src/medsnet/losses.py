"""Self-distillation objective: deep-supervised dice, Bernoulli KL to the main head, feature L2."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import DetectorOutputSet


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3
    lambda_feat: float = 0.1
    dice_epsilon: float = 1e-5
    kl_epsilon: float = 1e-7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lambda_feat < 0:
            raise ValueError("lambda_feat must be >= 0")
        if self.dice_epsilon <= 0 or self.kl_epsilon <= 0:
            raise ValueError("epsilons must be > 0")


@dataclass
class LossBreakdown:
    loss1: torch.Tensor
    loss2: torch.Tensor
    loss3: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("loss1", "loss2", "loss3", "total")}


def dice_loss(pred: torch.Tensor, target: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    """Soft dice loss ``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)``.

    Sums run over every element, batch included, so empty-target samples only
    add to the denominator.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    target = target.to(pred.dtype)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + epsilon) / (pred.sum() + target.sum() + epsilon)


def bernoulli_kl(p: torch.Tensor, q: torch.Tensor, epsilon: float = 1e-7) -> torch.Tensor:
    """Mean per-pixel KL(p || q) between Bernoulli maps, both clamped to [eps, 1 - eps]."""
    p = p.clamp(epsilon, 1.0 - epsilon)
    q = q.clamp(epsilon, 1.0 - epsilon)
    kl = p * torch.log(p / q) + (1.0 - p) * torch.log((1.0 - p) / (1.0 - q))
    return kl.mean()


def loss1(outputs: DetectorOutputSet, target: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    eps = weights.dice_epsilon
    total = (1.0 - weights.alpha) * dice_loss(outputs.main_prob, target, eps)
    for aux in outputs.aux_probs:
        total = total + dice_loss(aux, target, eps)
    return total


def kl_loss(outputs: DetectorOutputSet, weights: LossWeights) -> torch.Tensor:
    teacher = outputs.main_prob.detach()
    total = outputs.main_prob.new_zeros(())
    if weights.alpha == 0:
        return total
    for aux in outputs.aux_probs:
        total = total + bernoulli_kl(aux, teacher, weights.kl_epsilon)
    return weights.alpha * total


def feature_loss(outputs: DetectorOutputSet, weights: LossWeights) -> torch.Tensor:
    teacher = outputs.main_features.detach()
    total = outputs.main_features.new_zeros(())
    for feat in outputs.aux_features:
        if feat.shape != teacher.shape:
            raise ValueError(
                f"aux features {tuple(feat.shape)} not aligned with main {tuple(teacher.shape)}"
            )
        if weights.lambda_feat:
            total = total + ((feat - teacher) ** 2).mean()
    return weights.lambda_feat * total


def total_loss(outputs: DetectorOutputSet, target: torch.Tensor,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    l1 = loss1(outputs, target, weights)
    l2 = kl_loss(outputs, weights)
    l3 = feature_loss(outputs, weights)
    return LossBreakdown(l1, l2, l3, l1 + l2 + l3)

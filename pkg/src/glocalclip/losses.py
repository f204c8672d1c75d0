"""Training objective: global BCE, local focal + dice, and the glocal contrastive triplet terms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .scoring import upsample

PROB_CLAMP = 1e-7


@dataclass
class LossReport:
    global_: float
    local: float
    gcl: float
    total: float
    per_layer_local: list[float] = field(default_factory=list)
    lambda_gcl: float = 1.0

    def to_dict(self) -> dict:
        return {"global": self.global_, "local": self.local, "gcl": self.gcl, "total": self.total,
                "per_layer_local": list(self.per_layer_local), "lambda": self.lambda_gcl}


def global_loss(p_a, label) -> torch.Tensor:
    """Binary cross-entropy on the anomaly probability, averaged over any batch dimension."""
    p_a = torch.as_tensor(p_a, dtype=torch.float64) if not torch.is_tensor(p_a) else p_a
    label = torch.as_tensor(label, dtype=p_a.dtype)
    p = p_a.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(label * p.log() + (1 - label) * (1 - p).log()).mean()


def focal_loss(probs: torch.Tensor, mask: torch.Tensor, gamma: float = 2.0, alpha: float = 1.0) -> torch.Tensor:
    """Mean over pixels of ``-alpha (1 - p_t)^gamma log p_t``.

    ``probs`` is ``(..., H, W, 2)`` with channel 0 normal and channel 1 anomalous;
    ``mask`` marks anomalous pixels, so ``p_t`` is channel ``mask``.
    """
    mask = torch.as_tensor(mask)
    if probs.shape[:-1] != mask.shape or probs.shape[-1] != 2:
        raise ValueError(f"probs {tuple(probs.shape)} incompatible with mask {tuple(mask.shape)}")
    m = mask.to(probs.dtype)
    p_t = probs[..., 1] * m + probs[..., 0] * (1 - m)
    p_t = p_t.clamp(PROB_CLAMP, 1.0)
    return (-alpha * (1 - p_t) ** gamma * p_t.log()).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """``1 - (2 sum(pred*target) + eps) / (sum(pred) + sum(target) + eps)`` per image, batch-averaged.

    The last two axes are the image; any leading axes are batch.
    """
    target = torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    t = target.to(pred.dtype)
    inter = (pred * t).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + t.sum(dim=(-2, -1))
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def local_loss(s_n: torch.Tensor, s_a: torch.Tensor, mask: torch.Tensor, target: tuple[int, int] | None = None,
               gamma: float = 2.0, alpha: float = 1.0, eps: float = 1e-5) -> torch.Tensor:
    """Focal on the upsampled (normal, anomaly) stack plus dice on each channel against its mask."""
    mask = torch.as_tensor(mask)
    target = tuple(mask.shape[-2:]) if target is None else tuple(target)
    up_n = upsample(s_n, target)
    up_a = upsample(s_a, target)
    focal = focal_loss(torch.stack([up_n, up_a], dim=-1), mask, gamma, alpha)
    return focal + dice_loss(up_n, 1 - mask, eps) + dice_loss(up_a, mask, eps)


def gcl_triplet(a: torch.Tensor, p: torch.Tensor, n: torch.Tensor, margin: float = 0.0) -> torch.Tensor:
    """Squared pull to the positive plus squared hinge push from the negative."""
    if not (a.shape == p.shape == n.shape):
        raise ValueError("triplet vectors must share a shape")
    pull = ((a - p) ** 2).sum()
    if margin == 0:
        # max(0, -d)^2 is identically zero; skip the sqrt, whose gradient is undefined at d = 0.
        return pull
    dist = ((a - n) ** 2).sum().sqrt()
    return pull + torch.clamp(margin - dist, min=0) ** 2


def gcl_total(emb, margin: float = 0.0) -> torch.Tensor:
    """Global normal anchors (local normal +, local anomaly -); global anomaly anchors the mirror triplet."""
    return gcl_triplet(emb.g_n, emb.l_n, emb.l_a, margin) + gcl_triplet(emb.g_a, emb.l_a, emb.l_n, margin)


def total_loss(global_, per_layer_local, gcl, lambda_gcl: float) -> tuple[torch.Tensor | float, LossReport]:
    """Weighted sum ``global + sum(local) + lambda * gcl``.

    Works on tensors (for backprop) or floats; returns the total and a float :class:`LossReport`.
    """
    def num(x) -> float:
        return float(x.detach()) if torch.is_tensor(x) else float(x)

    parts = [global_, *per_layer_local, gcl]
    vals = [num(x) for x in parts]
    if not all(math.isfinite(v) for v in vals):
        raise FloatingPointError(f"non-finite loss component: {vals}")
    local = sum(per_layer_local) if per_layer_local else 0.0
    total = global_ + local + lambda_gcl * gcl
    per_layer = [num(x) for x in per_layer_local]
    report = LossReport(global_=num(global_), local=float(sum(per_layer)), gcl=num(gcl),
                        total=num(total), per_layer_local=per_layer, lambda_gcl=float(lambda_gcl))
    return total, report

"""Reconstruction losses over masked token positions.

Both losses reduce a per-token error to a mean over the masked tokens of each
sample, then average over the batch. Values at visible positions never enter.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import MaskError
from .tokenizer import PatchTargets


def masked_token_mean(per_token: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """(B, total) per-token values, (B, total) bool mask -> scalar."""
    if per_token.shape != mask.shape:
        raise MaskError(f"per-token values {tuple(per_token.shape)} do not match mask {tuple(mask.shape)}")
    counts = mask.sum(dim=-1)
    if bool((counts == 0).any()):
        raise MaskError("loss is undefined for an empty mask")
    weights = mask.to(per_token.dtype)
    per_sample = torch.where(mask, per_token, torch.zeros_like(per_token)).sum(dim=-1) / weights.sum(dim=-1)
    return per_sample.mean()


def _as_batch(y: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if y.dim() == 2:
        y, target, mask = y.unsqueeze(0), target.unsqueeze(0), mask.unsqueeze(0)
    if y.shape != target.shape:
        raise MaskError(f"prediction {tuple(y.shape)} and target {tuple(target.shape)} differ in shape")
    return y, target, torch.as_tensor(mask, dtype=torch.bool)


def pixel_recon_loss(y: torch.Tensor, targets: PatchTargets | torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over masked tokens of the per-patch mean squared error."""
    target = targets.vectors if isinstance(targets, PatchTargets) else targets
    y, target, mask = _as_batch(y, target.to(y.dtype), mask)
    per_token = ((y - target) ** 2).mean(dim=-1)
    return masked_token_mean(per_token, mask)


def smooth_l1_feature_loss(y: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Huber-style smooth L1 averaged over feature dims, then over masked tokens."""
    if beta <= 0:
        raise ValueError(f"smooth L1 beta must be positive, got {beta}")
    y, target, mask = _as_batch(y, targets.to(y.dtype), mask)
    per_token = F.smooth_l1_loss(y, target, reduction="none", beta=beta).mean(dim=-1)
    return masked_token_mean(per_token, mask)

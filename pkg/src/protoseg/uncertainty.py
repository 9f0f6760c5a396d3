"""Entropy-based voxel uncertainty and reliable pseudo-label construction.

A voxel's uncertainty is the Shannon entropy of its predicted class
distribution (in nats, so it is bounded by ln C). The reliability weight
downscales each voxel by its share of the volume's total entropy:

    w(p) = 1 - U(p) / sum_q U(q)

In ``literal`` mode the weight additionally carries a 1/(H*W*D) factor;
``normalized`` mode (the default) omits it, which preserves the relative
weighting while keeping soft targets at trainable magnitude.

Tensors may be unbatched (class dim first) or batched (batch dim, then
class dim); entropy sums are always per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidParam

MODES = ("literal", "normalized")
_LOG_FLOOR = 1e-12


@dataclass
class ReliabilityMap:
    """Per-voxel entropy and the derived reliability weight."""

    entropy: torch.Tensor
    weight: torch.Tensor
    mode: str


def voxel_entropy(probs: torch.Tensor) -> torch.Tensor:
    """Shannon entropy per voxel, with the 0*ln(0) := 0 convention.

    probs: (C, H, W, D) or (B, C, H, W, D); returns (H, W, D) or (B, H, W, D).
    """
    if probs.ndim not in (4, 5):
        raise InvalidParam(f"expected 4D or 5D probabilities, got {probs.ndim}D")
    class_dim = 0 if probs.ndim == 4 else 1
    return -(probs * torch.log(probs.clamp_min(_LOG_FLOOR))).sum(dim=class_dim)


def reliability_weight(entropy: torch.Tensor, mode: str = "normalized") -> torch.Tensor:
    """Map an entropy grid to per-voxel weights.

    All-certain volumes (total entropy 0) get weight 1 everywhere.
    """
    if mode not in MODES:
        raise InvalidParam(f"unknown mode {mode!r}, expected one of {MODES}")
    if entropy.ndim == 3:
        batched = entropy.unsqueeze(0)
    elif entropy.ndim == 4:
        batched = entropy
    else:
        raise InvalidParam(f"expected 3D or 4D entropy grid, got {entropy.ndim}D")
    total = batched.sum(dim=(1, 2, 3), keepdim=True)
    safe_total = torch.where(total > 0, total, torch.ones_like(total))
    weight = torch.where(total > 0, 1.0 - batched / safe_total, torch.ones_like(batched))
    if mode == "literal":
        weight = weight / batched[0].numel()
    return weight.squeeze(0) if entropy.ndim == 3 else weight


def reliability_map(probs: torch.Tensor, mode: str = "normalized") -> ReliabilityMap:
    entropy = voxel_entropy(probs)
    return ReliabilityMap(entropy=entropy, weight=reliability_weight(entropy, mode), mode=mode)


def reliable_pseudo_label(
    mean_probs: torch.Tensor, mode: str = "normalized"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Reweight averaged predictions into reliable soft targets.

    Returns (soft, hard): ``soft`` is the per-voxel weight times the class
    distribution (a class-independent scaling, so it never changes the
    argmax), ``hard`` is the plain argmax class grid.
    """
    rmap = reliability_map(mean_probs, mode)
    class_dim = 0 if mean_probs.ndim == 4 else 1
    soft = mean_probs * rmap.weight.unsqueeze(class_dim)
    hard = mean_probs.argmax(dim=class_dim)
    return soft, hard

"""Loss terms for the semi-supervised trainer.

The supervised branch applies a different criterion to each of the four
prediction heads (cross entropy, Dice, focal, IoU), averages them, and
adds the cross entropy of the fused (mean) prediction. Consistency terms
compare prototype similarity maps against labels (labeled branch) or
reliable pseudo-labels (unlabeled branch, ramp-weighted).

Probabilities are clamped at 1e-7 inside logarithms, since reliability
weighting can produce exact-zero soft targets.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .errors import InvalidLabel, InvalidParam

PROB_FLOOR = 1e-7
CONSISTENCY_KINDS = ("ce", "kl", "mse", "mae")


@dataclass
class LossBundle:
    """Named scalar loss terms for one training step.

    Maintains: l_seg_l = (l_ce + l_dice + l_focal + l_iou) / 4 + l_fused,
    l_seg = l_seg_l + l_seg_m, total = l_seg + l_lc + lambda_con * l_uc.
    """

    l_ce: float = 0.0
    l_dice: float = 0.0
    l_focal: float = 0.0
    l_iou: float = 0.0
    l_fused: float = 0.0
    l_seg_l: float = 0.0
    l_seg_m: float = 0.0
    l_seg: float = 0.0
    l_lc: float = 0.0
    l_uc: float = 0.0
    lambda_con: float = 0.0
    total: float = 0.0

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.field_names()}

    def csv_row(self) -> str:
        # repr round-trips doubles exactly, so identical runs log identical text
        return ",".join(repr(getattr(self, name)) for name in self.field_names())

    def is_finite(self) -> bool:
        import math
        return all(math.isfinite(getattr(self, name)) for name in self.field_names())


def _batched(probs: torch.Tensor, target: torch.Tensor):
    if probs.ndim == 4:
        probs = probs.unsqueeze(0)
    if target.ndim == 3:
        target = target.unsqueeze(0)
    if probs.ndim != 5:
        raise InvalidParam(f"expected probabilities (B,C,H,W,D), got shape {tuple(probs.shape)}")
    return probs, target


def _check_hard_target(target: torch.Tensor, classes: int) -> torch.Tensor:
    if target.dtype not in (torch.int64, torch.int32, torch.uint8, torch.int16):
        raise InvalidParam("hard targets must be an integer tensor")
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= classes):
        raise InvalidLabel(
            f"target classes span [{int(target.min())}, {int(target.max())}], valid range is [0, {classes})"
        )
    return target.long()


def _one_hot(target: torch.Tensor, classes: int, dtype: torch.dtype) -> torch.Tensor:
    # (B,H,W,D) -> (B,C,H,W,D)
    return F.one_hot(target.long(), classes).movedim(-1, 1).to(dtype)


def cross_entropy(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean voxel cross entropy of hard targets against probabilities."""
    probs, target = _batched(probs, target)
    target = _check_hard_target(target, probs.shape[1])
    picked = probs.gather(1, target.unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice loss averaged over foreground classes."""
    probs, target = _batched(probs, target)
    classes = probs.shape[1]
    target = _check_hard_target(target, classes)
    onehot = _one_hot(target, classes, probs.dtype)
    terms = []
    for c in range(1, classes):
        p, q = probs[:, c], onehot[:, c]
        inter = (p * q).sum()
        terms.append(1.0 - (2.0 * inter + eps) / (p.sum() + q.sum() + eps))
    return torch.stack(terms).mean()


def iou_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft Jaccard loss averaged over foreground classes."""
    probs, target = _batched(probs, target)
    classes = probs.shape[1]
    target = _check_hard_target(target, classes)
    onehot = _one_hot(target, classes, probs.dtype)
    terms = []
    for c in range(1, classes):
        p, q = probs[:, c], onehot[:, c]
        inter = (p * q).sum()
        union = p.sum() + q.sum() - inter
        terms.append(1.0 - (inter + eps) / (union + eps))
    return torch.stack(terms).mean()


def focal_loss(probs: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Mean voxel focal term -(1 - p_t)^gamma * ln(p_t)."""
    probs, target = _batched(probs, target)
    target = _check_hard_target(target, probs.shape[1])
    p_t = probs.gather(1, target.unsqueeze(1)).squeeze(1)
    return (-(1.0 - p_t) ** gamma * torch.log(p_t.clamp_min(PROB_FLOOR))).mean()


def supervised_loss(
    head_probs: list[torch.Tensor],
    mean_probs: torch.Tensor,
    target: torch.Tensor,
    focal_gamma: float = 2.0,
    epsilon: float = 1e-5,
) -> dict[str, torch.Tensor]:
    """Per-head supervised terms plus the fused cross entropy.

    Head assignment is fixed: head 0 -> CE, 1 -> Dice, 2 -> focal,
    3 -> IoU. Returns tensors keyed l_ce, l_dice, l_focal, l_iou, l_fused,
    and l_seg_branch = (l_ce + l_dice + l_focal + l_iou) / 4 + l_fused.
    """
    if len(head_probs) != 4:
        raise InvalidParam(f"expected 4 head outputs, got {len(head_probs)}")
    out = {
        "l_ce": cross_entropy(head_probs[0], target),
        "l_dice": dice_loss(head_probs[1], target, eps=epsilon),
        "l_focal": focal_loss(head_probs[2], target, gamma=focal_gamma),
        "l_iou": iou_loss(head_probs[3], target, eps=epsilon),
        "l_fused": cross_entropy(mean_probs, target),
    }
    out["l_seg_branch"] = (
        out["l_ce"] + out["l_dice"] + out["l_focal"] + out["l_iou"]
    ) / 4.0 + out["l_fused"]
    return out


def consistency_loss(
    sim_probs: torch.Tensor,
    target: torch.Tensor,
    kind: str = "ce",
) -> torch.Tensor:
    """Distance between a similarity map and a target distribution.

    ``target`` is either a hard class grid or a soft (possibly
    sub-normalized) distribution of the same shape as ``sim_probs``.
    All kinds are means over voxels; mse/mae also average over classes.
    """
    if kind not in CONSISTENCY_KINDS:
        raise InvalidParam(f"unknown consistency kind {kind!r}")
    soft = target.is_floating_point()
    if soft:
        if sim_probs.shape != target.shape:
            raise InvalidParam("soft target must match similarity map shape")
        sim, tgt = sim_probs, target
        if sim.ndim == 4:
            sim, tgt = sim.unsqueeze(0), tgt.unsqueeze(0)
    else:
        sim, hard = _batched(sim_probs, target)
        hard = _check_hard_target(hard, sim.shape[1])
        tgt = _one_hot(hard, sim.shape[1], sim.dtype)

    if kind == "ce":
        return -(tgt * torch.log(sim.clamp_min(PROB_FLOOR))).sum(dim=1).mean()
    if kind == "kl":
        log_t = torch.where(tgt > 0, torch.log(tgt.clamp_min(PROB_FLOOR)),
                            torch.zeros_like(tgt))
        log_s = torch.log(sim.clamp_min(PROB_FLOOR))
        return (tgt * (log_t - log_s)).sum(dim=1).mean()
    if kind == "mse":
        return ((sim - tgt) ** 2).mean()
    return (sim - tgt).abs().mean()


def total_loss(
    supervised_labeled: dict[str, torch.Tensor],
    supervised_mixed: dict[str, torch.Tensor] | None,
    l_lc: torch.Tensor | None,
    l_uc: torch.Tensor | None,
    lambda_con: float,
) -> tuple[torch.Tensor, LossBundle]:
    """Assemble the training objective and its logging bundle.

    total = l_seg_l + l_seg_m + l_lc + lambda_con * l_uc, with absent
    branches contributing zero.
    """
    zero = supervised_labeled["l_seg_branch"].new_zeros(())
    l_seg_l = supervised_labeled["l_seg_branch"]
    l_seg_m = supervised_mixed["l_seg_branch"] if supervised_mixed is not None else zero
    lc = l_lc if l_lc is not None else zero
    uc = l_uc if l_uc is not None else zero
    l_seg = l_seg_l + l_seg_m
    total = l_seg + lc + lambda_con * uc

    def _f(x: torch.Tensor) -> float:
        return float(x.detach())

    bundle = LossBundle(
        l_ce=_f(supervised_labeled["l_ce"]),
        l_dice=_f(supervised_labeled["l_dice"]),
        l_focal=_f(supervised_labeled["l_focal"]),
        l_iou=_f(supervised_labeled["l_iou"]),
        l_fused=_f(supervised_labeled["l_fused"]),
        l_seg_l=_f(l_seg_l),
        l_seg_m=_f(l_seg_m),
        l_seg=_f(l_seg),
        l_lc=_f(lc),
        l_uc=_f(uc),
        lambda_con=float(lambda_con),
        total=_f(total),
    )
    return total, bundle

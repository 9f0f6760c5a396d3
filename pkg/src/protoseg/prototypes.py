"""Class prototypes via masked average pooling, three-stage prototype
fusion, and prototype-to-feature similarity maps.

A prototype is the mean feature vector over the voxels of one class,
averaged again over the samples of a batch that actually contain the
class. Classes absent from every sample simply have no vector; fusion
falls back to whichever side is present, and similarity scoring excludes
absent classes (their probability row is zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import DegeneratePrototypes, InvalidParam, ShapeMismatch
from .uncertainty import reliability_weight

_NORM_FLOOR = 1e-12

PROTOTYPE_SOURCES = (
    "labeled", "unlabeled", "mixed", "labeled_fused", "unlabeled_fused", "global",
)


@dataclass
class PrototypeSet:
    """Per-class embedding vectors; a class missing from ``vectors`` had no
    mask voxels anywhere in the contributing batch."""

    vectors: dict[int, torch.Tensor]
    source: str
    batch_info: tuple[str, ...] = ()

    def present_classes(self) -> list[int]:
        return sorted(self.vectors)

    def has(self, c: int) -> bool:
        return c in self.vectors

    def get(self, c: int) -> torch.Tensor:
        return self.vectors[c]

    def detach(self) -> "PrototypeSet":
        return PrototypeSet(vectors={c: v.detach() for c, v in self.vectors.items()},
                            source=self.source, batch_info=self.batch_info)


@dataclass
class FusionCoefficients:
    """Linear fusion weights: (lambda1, lambda2) blend labeled with mixed
    prototypes, (lambda3, lambda4) blend unlabeled with mixed."""

    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 0.5
    lambda4: float = 0.5

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise InvalidParam("fusion coefficients must be >= 0")
        if self.lambda1 + self.lambda2 <= 0 or self.lambda3 + self.lambda4 <= 0:
            raise InvalidParam("each fusion pair needs a positive coefficient sum")

    @property
    def gamma1(self) -> float:
        return self.lambda1 / self.lambda2 if self.lambda2 else float("inf")

    @property
    def gamma2(self) -> float:
        return self.lambda3 / self.lambda4 if self.lambda4 else float("inf")


@dataclass
class SimilarityMap:
    """Per-voxel class distribution from temperature-scaled cosine scores."""

    probs: torch.Tensor
    temperature: float


def _as_batched(features: torch.Tensor, masks: torch.Tensor):
    if features.ndim == 4:
        features = features.unsqueeze(0)
    if masks.ndim == 3:
        masks = masks.unsqueeze(0)
    if features.ndim != 5 or masks.ndim != 4:
        raise InvalidParam("expected features (B,E,H,W,D) and masks (B,H,W,D)")
    if features.shape[0] != masks.shape[0] or features.shape[2:] != masks.shape[1:]:
        raise ShapeMismatch(
            f"features {tuple(features.shape)} not aligned with masks {tuple(masks.shape)}"
        )
    return features, masks


def masked_prototype(
    features: torch.Tensor,
    masks: torch.Tensor,
    classes: int,
    weights: torch.Tensor | None = None,
    source: str = "labeled",
    batch_info: tuple[str, ...] = (),
) -> PrototypeSet:
    """Masked average pooling over a batch.

    For each class, every sample containing the class contributes the sum
    of (optionally weighted) feature vectors under its mask divided by the
    mask voxel count; contributions are averaged over those samples only.

    features: (B, E, H, W, D) spatially aligned with masks (B, H, W, D).
    weights:  optional per-voxel multipliers, same shape as masks.
    """
    features, masks = _as_batched(features, masks)
    if weights is not None:
        if weights.ndim == 3:
            weights = weights.unsqueeze(0)
        if weights.shape != masks.shape:
            raise ShapeMismatch("weights not aligned with masks")
    batch = features.shape[0]
    vectors: dict[int, torch.Tensor] = {}
    for c in range(classes):
        contributions = []
        for a in range(batch):
            sel = masks[a] == c
            count = int(sel.sum())
            if count == 0:
                continue
            f = features[a]
            if weights is not None:
                f = f * weights[a].unsqueeze(0)
            contributions.append(f[:, sel].sum(dim=1) / count)
        if contributions:
            vectors[c] = torch.stack(contributions, dim=0).mean(dim=0)
    return PrototypeSet(vectors=vectors, source=source, batch_info=batch_info)


def masked_prototype_weighted(
    features: torch.Tensor,
    masks: torch.Tensor,
    entropy: torch.Tensor,
    classes: int,
    mode: str = "normalized",
    source: str = "unlabeled",
    batch_info: tuple[str, ...] = (),
) -> PrototypeSet:
    """Masked average pooling with voxel features pre-scaled by their
    entropy-derived reliability weight (masks are hard pseudo-labels)."""
    weights = reliability_weight(entropy, mode)
    return masked_prototype(features, masks, classes, weights=weights,
                            source=source, batch_info=batch_info)


def _fuse(a: PrototypeSet, b: PrototypeSet, wa: float, wb: float,
          source: str) -> PrototypeSet:
    """Weighted sum per class; a class present on one side only passes
    through unscaled."""
    vectors: dict[int, torch.Tensor] = {}
    for c in sorted(set(a.vectors) | set(b.vectors)):
        if a.has(c) and b.has(c):
            vectors[c] = wa * a.get(c) + wb * b.get(c)
        elif a.has(c):
            vectors[c] = a.get(c)
        else:
            vectors[c] = b.get(c)
    return PrototypeSet(vectors=vectors, source=source,
                        batch_info=a.batch_info + b.batch_info)


def fuse_labeled_mixed(p_l: PrototypeSet, p_m: PrototypeSet,
                       coeffs: FusionCoefficients) -> PrototypeSet:
    return _fuse(p_l, p_m, coeffs.lambda1, coeffs.lambda2, "labeled_fused")


def fuse_unlabeled_mixed(p_u: PrototypeSet, p_m: PrototypeSet,
                         coeffs: FusionCoefficients) -> PrototypeSet:
    return _fuse(p_u, p_m, coeffs.lambda3, coeffs.lambda4, "unlabeled_fused")


def fuse_global(p_lm: PrototypeSet, p_um: PrototypeSet,
                lambda_con: float) -> PrototypeSet:
    """Blend the two enhanced prototype sets into the global one:
    ((2 - lambda_con) * p_lm + lambda_con * p_um) / 2.

    At lambda_con = 0 this passes the labeled-fused set through; at 1 it
    is the plain midpoint.
    """
    if not (0.0 <= lambda_con <= 1.0):
        raise InvalidParam(f"lambda_con must be in [0, 1], got {lambda_con}")
    return _fuse(p_lm, p_um, (2.0 - lambda_con) / 2.0, lambda_con / 2.0, "global")


def similarity_map(
    features: torch.Tensor,
    prototypes: PrototypeSet,
    temperature: float = 20.0,
    classes: int | None = None,
) -> SimilarityMap:
    """Classify voxels by cosine similarity to each class prototype.

    Scores are ``temperature * cos(f(p), prototype_c)`` softmaxed over the
    present classes; absent classes get probability 0. A zero-norm feature
    or prototype scores cosine 0 against everything.
    """
    squeeze = features.ndim == 4
    if squeeze:
        features = features.unsqueeze(0)
    if features.ndim != 5:
        raise InvalidParam(f"expected features (B,E,H,W,D), got {features.ndim}D")
    present = prototypes.present_classes()
    if len(present) < 2:
        raise DegeneratePrototypes(
            f"need >= 2 present prototypes, have {len(present)}"
        )
    if classes is None:
        classes = present[-1] + 1
    proto = torch.stack([prototypes.get(c) for c in present], dim=0)
    if proto.shape[1] != features.shape[1]:
        raise ShapeMismatch(
            f"prototype dim {proto.shape[1]} != feature dim {features.shape[1]}"
        )
    f_hat = features / features.norm(dim=1, keepdim=True).clamp_min(_NORM_FLOOR)
    p_hat = proto / proto.norm(dim=1, keepdim=True).clamp_min(_NORM_FLOOR)
    cos = torch.einsum("behwd,ke->bkhwd", f_hat, p_hat)
    sm = F.softmax(temperature * cos, dim=1)
    out = torch.zeros(
        (features.shape[0], classes) + tuple(features.shape[2:]),
        dtype=sm.dtype, device=sm.device,
    )
    out[:, torch.as_tensor(present, device=sm.device)] = sm
    if squeeze:
        out = out.squeeze(0)
    return SimilarityMap(probs=out, temperature=temperature)

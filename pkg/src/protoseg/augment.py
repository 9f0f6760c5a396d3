"""Interpolation-based 3D augmentations for building mixed labeled samples.

The default mixer pastes a random cuboid from one labeled volume onto
another (image and label together, labels copied hard). Alternatives with
the same calling shape: whole-volume blending with a Beta-drawn weight,
cuboid erasure, and a low-frequency noise mask thresholded at its median.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidParam, ShapeMismatch
from .volumes import ProbabilityVolume, VolumeSample

MIX_KINDS = ("cutmix", "cutout", "fmix", "full")


@dataclass
class MixMask:
    """Binary voxel mask: 1 takes source A, 0 takes source B."""

    mask: np.ndarray
    kind: str
    fraction: float

    @classmethod
    def from_array(cls, mask: np.ndarray, kind: str) -> "MixMask":
        if kind not in MIX_KINDS:
            raise InvalidParam(f"unknown mask kind {kind!r}")
        mask = np.asarray(mask, dtype=bool)
        return cls(mask=mask, kind=kind, fraction=float(mask.mean()))

    @classmethod
    def full(cls, shape: tuple[int, int, int]) -> "MixMask":
        """All-ones mask: the mix degenerates to source A (test hook)."""
        return cls.from_array(np.ones(shape, dtype=bool), "full")


def _require_pair(a: VolumeSample, b: VolumeSample) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"volume shapes differ: {a.shape} vs {b.shape}")
    if a.label is None or b.label is None:
        raise InvalidParam("mixing requires both volumes to be labeled")


def sample_cuboid_mask(
    shape: tuple[int, int, int],
    rng: np.random.Generator,
    cut_min: float = 0.25,
    cut_max: float = 0.5,
    kind: str = "cutmix",
) -> MixMask:
    """Axis-aligned cuboid with each side drawn uniformly from
    [cut_min, cut_max] of that dimension, placed fully inside the volume."""
    if not (0 < cut_min <= cut_max <= 1):
        raise InvalidParam("need 0 < cut_min <= cut_max <= 1")
    mask = np.zeros(shape, dtype=bool)
    sl = []
    for s in shape:
        low = max(1, int(np.ceil(cut_min * s)))
        high = max(low, int(np.floor(cut_max * s)))
        side = int(rng.integers(low, high + 1))
        start = int(rng.integers(0, s - side + 1))
        sl.append(slice(start, start + side))
    mask[tuple(sl)] = True
    return MixMask.from_array(mask, kind)


def apply_mix(a: VolumeSample, b: VolumeSample, mix: MixMask) -> VolumeSample:
    """Compose image and label voxelwise from the mask: A where 1, B where 0."""
    _require_pair(a, b)
    if mix.mask.shape != a.shape:
        raise ShapeMismatch(f"mask shape {mix.mask.shape} != volume shape {a.shape}")
    image = np.where(mix.mask, a.image, b.image)
    label = np.where(mix.mask, a.label, b.label)
    return VolumeSample(image=image, label=label, id=f"{a.id}+{b.id}", source="mixed")


def cutmix_pair(
    a: VolumeSample,
    b: VolumeSample,
    rng: np.random.Generator,
    cut_min: float = 0.25,
    cut_max: float = 0.5,
    mask: MixMask | None = None,
) -> tuple[VolumeSample, MixMask]:
    """Paste a random cuboid crop of ``a`` onto ``b``. Labels copied hard."""
    _require_pair(a, b)
    if mask is None:
        mask = sample_cuboid_mask(a.shape, rng, cut_min, cut_max)
    return apply_mix(a, b, mask), mask


def mixup_pair(
    a: VolumeSample,
    b: VolumeSample,
    alpha: float,
    rng: np.random.Generator,
    classes: int | None = None,
    lam: float | None = None,
) -> tuple[VolumeSample, ProbabilityVolume]:
    """Blend whole volumes with weight lam ~ Beta(alpha, alpha).

    Returns the blended image (label left as the blend's argmax) together
    with the soft per-voxel label lam*onehot(a) + (1-lam)*onehot(b).
    """
    _require_pair(a, b)
    if alpha <= 0:
        raise InvalidParam("mixup alpha must be > 0")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if classes is None:
        classes = int(max(a.label.max(), b.label.max())) + 1
    image = lam * a.image + (1.0 - lam) * b.image
    eye = np.eye(classes, dtype=np.float32)
    soft = lam * np.moveaxis(eye[a.label], -1, 0) + (1.0 - lam) * np.moveaxis(eye[b.label], -1, 0)
    soft_volume = ProbabilityVolume(probs=soft)
    hard = soft.argmax(axis=0).astype(np.uint8)
    mixed = VolumeSample(image=image.astype(np.float32), label=hard,
                         id=f"{a.id}+{b.id}", source="mixed")
    return mixed, soft_volume


def cutout(
    a: VolumeSample,
    rng: np.random.Generator,
    cut_min: float = 0.25,
    cut_max: float = 0.5,
    mask: MixMask | None = None,
) -> VolumeSample:
    """Zero one random cuboid in the image; the label is unchanged."""
    if a.label is None:
        raise InvalidParam("cutout requires a labeled volume")
    if mask is None:
        mask = sample_cuboid_mask(a.shape, rng, cut_min, cut_max, kind="cutout")
    image = np.where(mask.mask, np.float32(0.0), a.image)
    return replace(a, image=image, id=f"{a.id}~cut", source="mixed")


def fmix_pair(
    a: VolumeSample,
    b: VolumeSample,
    rng: np.random.Generator,
    smooth_sigma: float = 4.0,
) -> tuple[VolumeSample, MixMask]:
    """Mix through a low-frequency mask: smoothed Gaussian noise thresholded
    at its median, so the 1-fraction is 0.5 up to one voxel.

    Ties (e.g. a constant field) are broken by voxel order via a stable
    argsort, keeping the mask deterministic for a given generator state.
    """
    _require_pair(a, b)
    field = gaussian_filter(rng.standard_normal(a.shape), sigma=smooth_sigma)
    order = np.argsort(field.ravel(), kind="stable")
    mask = np.zeros(a.image.size, dtype=bool)
    mask[order[a.image.size // 2:]] = True
    mix = MixMask.from_array(mask.reshape(a.shape), "fmix")
    return apply_mix(a, b, mix), mix


def build_mixed_batch(
    batch: list[VolumeSample],
    rng: np.random.Generator,
    kind: str = "cutmix",
    cut_min: float = 0.25,
    cut_max: float = 0.5,
    mixup_alpha: float = 1.0,
    classes: int | None = None,
) -> list[VolumeSample]:
    """Pair up a labeled batch (consecutive disjoint pairs) and mix each pair.

    A batch of N labeled samples yields N // 2 mixed samples.
    """
    mixed: list[VolumeSample] = []
    for i in range(0, len(batch) - 1, 2):
        a, b = batch[i], batch[i + 1]
        if kind == "cutmix":
            m, _ = cutmix_pair(a, b, rng, cut_min, cut_max)
        elif kind == "mixup":
            m, _ = mixup_pair(a, b, mixup_alpha, rng, classes=classes)
        elif kind == "cutout":
            m = cutout(a, rng, cut_min, cut_max)
        elif kind == "fmix":
            m, _ = fmix_pair(a, b, rng)
        else:
            raise InvalidParam(f"unknown augmentation kind {kind!r}")
        mixed.append(m)
    return mixed

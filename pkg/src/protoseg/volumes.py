"""Dense 3D volume types, intensity normalization, cropping, and stitched
sliding-window prediction.

All grids are numpy arrays in C order: images are (H, W, D) float32,
labels are (H, W, D) uint8 class indices, and per-class probability
volumes are (C, H, W, D). Voxels are unit-spaced; there is no physical
spacing metadata anywhere in this package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConstantVolume, InvalidParam, PatchTooLarge

VOLUME_SOURCES = ("labeled", "unlabeled", "mixed", "synthetic")


@dataclass
class VolumeSample:
    """One 3D scalar image with an optional dense class-index label."""

    image: np.ndarray
    label: np.ndarray | None
    id: str
    source: str = "synthetic"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.uint8)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.image.shape)

    def validate(self, classes: int | None = None) -> None:
        if self.image.ndim != 3:
            raise InvalidParam(f"image must be 3D, got shape {self.image.shape}")
        if self.source not in VOLUME_SOURCES:
            raise InvalidParam(f"unknown source {self.source!r}")
        if self.label is not None:
            if self.label.shape != self.image.shape:
                raise InvalidParam(
                    f"label shape {self.label.shape} != image shape {self.image.shape}"
                )
            if classes is not None and self.label.size and int(self.label.max()) >= classes:
                raise InvalidParam(
                    f"label contains class {int(self.label.max())} outside [0, {classes})"
                )


@dataclass
class ProbabilityVolume:
    """Per-voxel class distribution, shape (C, H, W, D)."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float32)

    @property
    def classes(self) -> int:
        return self.probs.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.probs.shape[1:])

    def validate(self, tol: float = 1e-5) -> None:
        if self.probs.ndim != 4:
            raise InvalidParam(f"probs must be (C,H,W,D), got shape {self.probs.shape}")
        if self.probs.min() < -tol or self.probs.max() > 1 + tol:
            raise InvalidParam("probabilities outside [0, 1]")
        sums = self.probs.sum(axis=0)
        if not np.allclose(sums, 1.0, atol=tol):
            worst = float(np.abs(sums - 1.0).max())
            raise InvalidParam(f"per-voxel class sums deviate from 1 by {worst:.2e}")

    def argmax_labels(self) -> np.ndarray:
        return self.probs.argmax(axis=0).astype(np.uint8)


@dataclass
class DatasetSplit:
    """Ids of the labeled / unlabeled / validation subsets. Pairwise disjoint."""

    labeled: list[str] = field(default_factory=list)
    unlabeled: list[str] = field(default_factory=list)
    validation: list[str] = field(default_factory=list)

    def validate(self) -> None:
        lab, unl, val = set(self.labeled), set(self.unlabeled), set(self.validation)
        if lab & unl or lab & val or unl & val:
            raise InvalidParam("split id lists are not pairwise disjoint")

    def to_dict(self) -> dict:
        return {
            "labeled": list(self.labeled),
            "unlabeled": list(self.unlabeled),
            "validation": list(self.validation),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(
            labeled=list(d["labeled"]),
            unlabeled=list(d["unlabeled"]),
            validation=list(d["validation"]),
        )


# --------------------------------------------------------------------------- #
# operations
# --------------------------------------------------------------------------- #
def normalize_intensity(v: VolumeSample) -> VolumeSample:
    """Rescale the image to zero mean and unit (population) standard deviation.

    Statistics are per-volume. The label is untouched. Raises
    ConstantVolume if the image has no intensity variation.
    """
    img = v.image.astype(np.float64)
    std = float(img.std())
    if std == 0.0:
        raise ConstantVolume(f"volume {v.id!r} has constant intensity")
    out = (img - img.mean()) / std
    return replace(v, image=out.astype(np.float32))


def random_crop(
    v: VolumeSample,
    patch_shape: Sequence[int],
    rng: np.random.Generator,
) -> VolumeSample:
    """Crop a random patch; image and label share the same offsets.

    Deterministic given the generator state. Raises PatchTooLarge when the
    patch exceeds the volume on any axis.
    """
    patch = tuple(int(p) for p in patch_shape)
    if len(patch) != 3:
        raise InvalidParam(f"patch_shape must have 3 entries, got {patch}")
    shape = v.shape
    if any(p > s for p, s in zip(patch, shape)):
        raise PatchTooLarge(f"patch {patch} does not fit in volume {shape}")
    offsets = tuple(int(rng.integers(0, s - p + 1)) for p, s in zip(patch, shape))
    sl = tuple(slice(o, o + p) for o, p in zip(offsets, patch))
    label = v.label[sl] if v.label is not None else None
    return replace(v, image=v.image[sl], label=label)


def window_offsets(size: int, window: int, stride: int) -> list[int]:
    """Start offsets covering [0, size) with the final window clamped inward."""
    if window > size:
        raise InvalidParam(f"window {window} exceeds axis size {size}")
    if stride < 1:
        raise InvalidParam(f"stride must be >= 1, got {stride}")
    offsets = list(range(0, size - window + 1, stride))
    if offsets[-1] + window < size:
        offsets.append(size - window)
    return offsets


def sliding_window_predict(
    v: VolumeSample,
    window: Sequence[int],
    stride: Sequence[int],
    infer: Callable[[VolumeSample], ProbabilityVolume],
) -> ProbabilityVolume:
    """Run patchwise inference and stitch a full probability volume.

    Windows are enumerated in a fixed raster order; overlapping window
    probabilities are averaged per voxel and the result renormalized so
    every voxel's class vector sums to 1. Strides that do not tile the
    volume exactly are handled by clamping the last window to the edge,
    so every voxel is covered.
    """
    win = tuple(int(w) for w in window)
    strd = tuple(int(s) for s in stride)
    shape = v.shape
    axes = [window_offsets(s, w, st) for s, w, st in zip(shape, win, strd)]

    accum: np.ndarray | None = None
    counts = np.zeros(shape, dtype=np.float64)
    for oh in axes[0]:
        for ow in axes[1]:
            for od in axes[2]:
                sl = (slice(oh, oh + win[0]), slice(ow, ow + win[1]), slice(od, od + win[2]))
                patch = VolumeSample(
                    image=v.image[sl],
                    label=None,
                    id=f"{v.id}@{oh},{ow},{od}",
                    source=v.source,
                )
                pred = infer(patch)
                if accum is None:
                    accum = np.zeros((pred.classes,) + shape, dtype=np.float64)
                accum[(slice(None),) + sl] += pred.probs.astype(np.float64)
                counts[sl] += 1.0
    assert accum is not None and counts.min() >= 1.0
    mean = accum / counts
    mean /= mean.sum(axis=0, keepdims=True)
    return ProbabilityVolume(probs=mean.astype(np.float32))


# --------------------------------------------------------------------------- #
# on-disk format: raw little-endian arrays + JSON sidecar
# --------------------------------------------------------------------------- #
def save_volume(v: VolumeSample, directory: Path | str, classes: int) -> Path:
    """Write image (float32 LE), optional label (uint8), and a JSON sidecar.

    Returns the sidecar path. Output bytes depend only on the sample
    contents, so regeneration is bit-identical.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_path = directory / f"{v.id}_image.raw"
    image_path.write_bytes(np.ascontiguousarray(v.image, dtype="<f4").tobytes())
    sidecar = {
        "shape": list(v.shape),
        "dtype": "float32",
        "classes": int(classes),
        "id": v.id,
        "source": v.source,
        "has_label": v.label is not None,
    }
    if v.label is not None:
        label_path = directory / f"{v.id}_label.raw"
        label_path.write_bytes(np.ascontiguousarray(v.label, dtype=np.uint8).tobytes())
    sidecar_path = directory / f"{v.id}.json"
    sidecar_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return sidecar_path


def load_volume(directory: Path | str, volume_id: str) -> VolumeSample:
    """Read one sample written by save_volume."""
    directory = Path(directory)
    meta = json.loads((directory / f"{volume_id}.json").read_text())
    shape = tuple(meta["shape"])
    image = np.frombuffer(
        (directory / f"{volume_id}_image.raw").read_bytes(), dtype="<f4"
    ).reshape(shape)
    label = None
    if meta.get("has_label"):
        label = np.frombuffer(
            (directory / f"{volume_id}_label.raw").read_bytes(), dtype=np.uint8
        ).reshape(shape)
    return VolumeSample(image=image.copy(), label=None if label is None else label.copy(),
                        id=meta["id"], source=meta.get("source", "synthetic"))

"""Deterministic synthetic 3D segmentation phantoms.

Two tasks at desk scale:

* ``ellipsoid`` — one randomly placed, rotated ellipsoid (binary task).
* ``nested_tubes`` — two parallel curved tubes with a 1-2 voxel wall
  between them (3-class task: background / tube A / tube B), exercising
  the multi-class metric path.

Images are class-dependent base intensities plus Gaussian noise, so at
``noise_std=0`` every task is perfectly separable by thresholding.
Generation is bit-reproducible from the spec alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptySplit, InvalidParam
from .volumes import DatasetSplit, VolumeSample, load_volume, save_volume

TASKS = ("ellipsoid", "nested_tubes")

# label index -> base image intensity, shared by both tasks
CLASS_INTENSITY = np.array([0.0, 1.0, 2.0], dtype=np.float64)

# admissible foreground share of the volume
FG_FRACTION_RANGE = (0.02, 0.40)


@dataclass
class PhantomSpec:
    """Full description of one phantom dataset."""

    task: str = "ellipsoid"
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    count: int = 50
    noise_std: float = 0.6
    seed: int = 0

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        if self.task not in TASKS:
            raise InvalidParam(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.count < 1:
            raise InvalidParam("count must be >= 1")
        if self.noise_std < 0:
            raise InvalidParam("noise_std must be >= 0")
        if len(self.volume_shape) != 3 or any(s < 8 for s in self.volume_shape):
            raise InvalidParam("volume_shape entries must each be >= 8")

    @property
    def classes(self) -> int:
        return 2 if self.task == "ellipsoid" else 3


def _rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    """Random 3D rotation from the QR decomposition of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _ellipsoid_label(shape: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample an ellipsoid whose voxel share lies in bounds."""
    lo, hi = FG_FRACTION_RANGE
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape],
                                indexing="ij"), axis=-1)
    while True:
        center = np.array([rng.uniform(0.35 * s, 0.65 * s) for s in shape])
        semi = np.array([rng.uniform(0.18 * s, 0.42 * s) for s in shape])
        rot = _rotation_matrix(rng)
        rel = (grid - center) @ rot
        inside = ((rel / semi) ** 2).sum(axis=-1) <= 1.0
        frac = inside.mean()
        if lo <= frac <= hi:
            return inside.astype(np.uint8)


def _tubes_label(shape: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Two curved parallel tubes (classes 1 and 2) separated by a thin wall."""
    lo, hi = FG_FRACTION_RANGE
    H, W, D = shape
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64),
                         np.arange(W, dtype=np.float64), indexing="ij")
    while True:
        r1 = rng.uniform(0.08, 0.14) * min(H, W)
        r2 = rng.uniform(0.08, 0.14) * min(H, W)
        wall = float(rng.integers(1, 3))
        theta = rng.uniform(0, 2 * np.pi)
        offset = (r1 + r2 + wall) * np.array([np.cos(theta), np.sin(theta)])
        amp = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0, 2 * np.pi, size=2)

        # feasible anchor range keeping both curved tubes inside the volume
        margin = max(r1, r2) + amp + 1.0
        lo0 = np.maximum(margin, margin - offset)
        hi0 = np.minimum(np.array([H, W]) - 1 - margin,
                         np.array([H, W]) - 1 - margin - offset)
        if np.any(hi0 <= lo0):
            continue
        anchor = np.array([rng.uniform(lo0[i], hi0[i]) for i in range(2)])

        label = np.zeros(shape, dtype=np.uint8)
        z = np.arange(D, dtype=np.float64)
        wobble = amp * np.stack([np.sin(2 * np.pi * z / D + phase[0]),
                                 np.cos(2 * np.pi * z / D + phase[1])], axis=-1)
        for k in range(D):
            c1 = anchor + wobble[k]
            c2 = c1 + offset
            d1 = (yy - c1[0]) ** 2 + (xx - c1[1]) ** 2
            d2 = (yy - c2[0]) ** 2 + (xx - c2[1]) ** 2
            sl = label[:, :, k]
            sl[d1 <= r1 ** 2] = 1
            sl[d2 <= r2 ** 2] = 2
        frac = (label > 0).mean()
        if lo <= frac <= hi and (label == 1).any() and (label == 2).any():
            return label


def _render_image(label: np.ndarray, noise_std: float,
                  rng: np.random.Generator) -> np.ndarray:
    image = CLASS_INTENSITY[label]
    if noise_std > 0:
        image = image + rng.normal(0.0, noise_std, size=label.shape)
    return image.astype(np.float32)


def generate_samples(spec: PhantomSpec) -> list[VolumeSample]:
    """Generate ``spec.count`` labeled phantoms, one child RNG stream each."""
    streams = np.random.SeedSequence(spec.seed).spawn(spec.count)
    prefix = "ell" if spec.task == "ellipsoid" else "tub"
    samples = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        if spec.task == "ellipsoid":
            label = _ellipsoid_label(spec.volume_shape, rng)
        else:
            label = _tubes_label(spec.volume_shape, rng)
        image = _render_image(label, spec.noise_std, rng)
        samples.append(VolumeSample(image=image, label=label,
                                    id=f"{prefix}{i:03d}", source="synthetic"))
    return samples


def make_split(
    samples: list[VolumeSample],
    labeled_fraction: float,
    val_count: int,
    seed: int,
) -> DatasetSplit:
    """Partition sample ids into validation / labeled / unlabeled sets.

    ``len(labeled) = round(labeled_fraction * train_count)`` where
    ``train_count = len(samples) - val_count``. Raises EmptySplit when the
    fraction rounds to zero labeled samples. labeled_fraction may be 1.0,
    in which case the unlabeled list is empty (fully supervised runs).
    """
    if not (0.0 < labeled_fraction <= 1.0):
        raise InvalidParam("labeled_fraction must be in (0, 1]")
    if not (0 <= val_count < len(samples)):
        raise InvalidParam("val_count must satisfy 0 <= val_count < len(samples)")
    rng = np.random.default_rng(seed)
    ids = [s.id for s in samples]
    perm = [ids[i] for i in rng.permutation(len(ids))]
    validation = perm[:val_count]
    train = perm[val_count:]
    n_labeled = int(round(labeled_fraction * len(train)))
    if n_labeled == 0:
        raise EmptySplit(
            f"labeled_fraction {labeled_fraction} yields 0 labeled of {len(train)} train samples"
        )
    split = DatasetSplit(labeled=train[:n_labeled], unlabeled=train[n_labeled:],
                         validation=validation)
    split.validate()
    return split


def generate(
    spec: PhantomSpec,
    labeled_fraction: float = 0.2,
    val_count: int | None = None,
    split_seed: int | None = None,
) -> tuple[list[VolumeSample], DatasetSplit]:
    """Generate samples plus a default split (validation = count // 5)."""
    samples = generate_samples(spec)
    if val_count is None:
        val_count = spec.count // 5
    if split_seed is None:
        split_seed = spec.seed
    split = make_split(samples, labeled_fraction, val_count, split_seed)
    return samples, split


# --------------------------------------------------------------------------- #
# on-disk dataset layout: <root>/volumes/* + <root>/manifest.json
# --------------------------------------------------------------------------- #
def write_dataset(
    samples: list[VolumeSample],
    split: DatasetSplit,
    spec: PhantomSpec,
    root: Path | str,
) -> Path:
    root = Path(root)
    vol_dir = root / "volumes"
    for s in samples:
        save_volume(s, vol_dir, classes=spec.classes)
    manifest = {
        "task": spec.task,
        "volume_shape": list(spec.volume_shape),
        "classes": spec.classes,
        "count": spec.count,
        "noise_std": spec.noise_std,
        "seed": spec.seed,
        "samples": [s.id for s in samples],
        "split": split.to_dict(),
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def load_dataset(root: Path | str) -> tuple[dict[str, VolumeSample], DatasetSplit, dict]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = {vid: load_volume(root / "volumes", vid) for vid in manifest["samples"]}
    split = DatasetSplit.from_dict(manifest["split"])
    return samples, split, manifest

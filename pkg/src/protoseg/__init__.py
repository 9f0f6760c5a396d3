"""Semi-supervised 3D segmentation with mixed-prototype consistency training.

Library layout:

* :mod:`protoseg.volumes` — dense volume types, normalization, cropping,
  sliding-window prediction stitching, raw-file I/O
* :mod:`protoseg.synthdata` — deterministic synthetic phantom datasets
* :mod:`protoseg.augment` — cuboid paste / blend / erase / noise-mask mixing
* :mod:`protoseg.netcore` — tiny 3D encoder-decoder, heads, taps, EMA
* :mod:`protoseg.uncertainty` — entropy weights and reliable pseudo-labels
* :mod:`protoseg.prototypes` — masked average pooling, fusion, similarity maps
* :mod:`protoseg.losses` — supervised, consistency, and total objectives
* :mod:`protoseg.metrics` — Dice / Jaccard / 95HD / ASD evaluation
* :mod:`protoseg.trainkit` — training loop, configs, checkpoints, ablations
* :mod:`protoseg.cli` — ``protoseg`` command-line entry point
"""

__version__ = "0.1.0"

from .volumes import DatasetSplit, ProbabilityVolume, VolumeSample  # noqa: F401
from .synthdata import PhantomSpec  # noqa: F401
from .trainkit import RunConfig, Trainer  # noqa: F401

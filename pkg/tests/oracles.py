"""Independent brute-force reference implementations.

Everything here is written as plain per-voxel loops (or all-pairs scans)
so it shares no code path with the library: the library vectorizes and
uses distance transforms, the oracles enumerate.
"""

from __future__ import annotations

import math

import numpy as np


# --------------------------------------------------------------------------- #
# masked average pooling
# --------------------------------------------------------------------------- #
def prototype_oracle(
    features: np.ndarray,   # (B, E, H, W, D)
    masks: np.ndarray,      # (B, H, W, D) int
    classes: int,
    weights: np.ndarray | None = None,  # (B, H, W, D)
) -> dict[int, np.ndarray]:
    """Per-class prototypes via explicit loops; absent classes are missing."""
    b, e = features.shape[:2]
    spatial = features.shape[2:]
    out: dict[int, np.ndarray] = {}
    for c in range(classes):
        contributions = []
        for a in range(b):
            total = np.zeros(e, dtype=np.float64)
            count = 0
            for i in range(spatial[0]):
                for j in range(spatial[1]):
                    for k in range(spatial[2]):
                        if masks[a, i, j, k] == c:
                            w = 1.0 if weights is None else float(weights[a, i, j, k])
                            total += w * features[a, :, i, j, k].astype(np.float64)
                            count += 1
            if count > 0:
                contributions.append(total / count)
        if contributions:
            out[c] = np.mean(np.stack(contributions, axis=0), axis=0)
    return out


def reliability_weight_oracle(entropy: np.ndarray, mode: str = "normalized") -> np.ndarray:
    """Loop version of the entropy-to-weight map for one volume."""
    total = float(entropy.sum())
    out = np.empty_like(entropy, dtype=np.float64)
    flat_in = entropy.ravel()
    flat_out = out.ravel()
    for idx in range(flat_in.size):
        if total > 0:
            flat_out[idx] = 1.0 - float(flat_in[idx]) / total
        else:
            flat_out[idx] = 1.0
        if mode == "literal":
            flat_out[idx] /= flat_in.size
    return out


# --------------------------------------------------------------------------- #
# overlap and surface metrics
# --------------------------------------------------------------------------- #
def dice_jaccard_oracle(pred: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    a = {tuple(idx) for idx in np.argwhere(pred)}
    b = {tuple(idx) for idx in np.argwhere(ref)}
    if not a and not b:
        return 1.0, 1.0
    if not a or not b:
        return 0.0, 0.0
    inter = len(a & b)
    return 2.0 * inter / (len(a) + len(b)), inter / len(a | b)


def surface_oracle(mask: np.ndarray) -> list[tuple[int, int, int]]:
    """Mask voxels with a 6-connected background neighbor; outside the
    volume counts as background."""
    mask = np.asarray(mask, dtype=bool)
    shape = mask.shape
    surface = []
    for i in range(shape[0]):
        for j in range(shape[1]):
            for k in range(shape[2]):
                if not mask[i, j, k]:
                    continue
                on_surface = False
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    ni, nj, nk = i + di, j + dj, k + dk
                    inside = 0 <= ni < shape[0] and 0 <= nj < shape[1] and 0 <= nk < shape[2]
                    if not inside or not mask[ni, nj, nk]:
                        on_surface = True
                        break
                if on_surface:
                    surface.append((i, j, k))
    return surface


def directed_distances_oracle(
    surf_from: list[tuple[int, int, int]],
    surf_to: list[tuple[int, int, int]],
) -> np.ndarray:
    """min-over-all-pairs Euclidean distances, sqrt of exact integer sums."""
    out = np.empty(len(surf_from), dtype=np.float64)
    for idx, a in enumerate(surf_from):
        best = None
        for b in surf_to:
            d2 = (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2
            if best is None or d2 < best:
                best = d2
        out[idx] = math.sqrt(best)
    return out


def percentile_linear_oracle(values: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 1:
        return float(v[0])
    pos = (v.size - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, v.size - 1)
    frac = pos - lo
    return float(v[lo] + frac * (v[hi] - v[lo]))


def surface_distances_oracle(pred: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    surf_p = surface_oracle(pred)
    surf_r = surface_oracle(ref)
    d_pr = directed_distances_oracle(surf_p, surf_r)
    d_rp = directed_distances_oracle(surf_r, surf_p)
    hd95 = max(percentile_linear_oracle(d_pr, 95.0),
               percentile_linear_oracle(d_rp, 95.0))
    asd = float(np.concatenate([d_pr, d_rp]).mean())
    return hd95, asd


# --------------------------------------------------------------------------- #
# finite-difference gradient checking
# --------------------------------------------------------------------------- #
def finite_difference_check(
    fn,
    x,
    n_coords: int,
    rng: np.random.Generator,
    h: float = 1e-6,
):
    """Compare central finite differences of ``fn`` against autograd.

    ``fn`` maps a float64 tensor to a scalar tensor. Returns an array of
    relative errors |fd - an| / max(|fd|, |an|, 1e-8) over sampled
    coordinates.
    """
    import torch

    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach().clone()
    flat = x.detach().reshape(-1)
    coords = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
    errors = []
    for c in coords:
        c = int(c)
        orig = float(flat[c])
        with torch.no_grad():
            flat[c] = orig + h
            plus = float(fn(x.detach()))
            flat[c] = orig - h
            minus = float(fn(x.detach()))
            flat[c] = orig
        fd = (plus - minus) / (2.0 * h)
        an = float(grad.reshape(-1)[c])
        errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return np.asarray(errors)

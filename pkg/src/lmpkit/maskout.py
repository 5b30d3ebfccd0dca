"""Attention mask-out: hide the strongest keypoint and fuse two networks' predictions."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .clustering import ClusteringOutput, DistanceMetric, grid_distance
from .errors import SizeError


class MaskMode(str, enum.Enum):
    DISK = "disk"
    SQUARE = "square"


@dataclass(frozen=True)
class MaskSpec:
    center: tuple      # (row, col) in image pixels
    radius: float
    mode: MaskMode = MaskMode.SQUARE

    def __post_init__(self):
        object.__setattr__(self, "mode", MaskMode(self.mode))
        if not self.radius > 0:
            raise ValueError("mask radius must be positive")


def make_mask(spec: MaskSpec, h_img: int, w_img: int) -> np.ndarray:
    """Binary ``[h, w]`` mask: 0 inside the region around ``spec.center``, 1 elsewhere."""
    r0, c0 = spec.center
    if not (0 <= r0 < h_img and 0 <= c0 < w_img):
        raise ValueError(f"mask center {spec.center} outside {h_img}x{w_img} image")
    rows = np.arange(h_img)[:, None] - r0
    cols = np.arange(w_img)[None, :] - c0
    if spec.mode is MaskMode.DISK:
        inside = rows ** 2 + cols ** 2 <= spec.radius ** 2
    else:
        inside = (np.abs(rows) <= spec.radius) & (np.abs(cols) <= spec.radius)
    return np.where(inside, 0.0, 1.0)


def apply_mask(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[1:] != mask.shape:
        raise SizeError(f"mask {mask.shape} does not match image {img.shape}")
    return img * mask[None, :, :]


def fuse_predictions(primary_out: ClusteringOutput, replica_out: ClusteringOutput,
                     k: int, thr: float = 3.0,
                     metric=DistanceMetric.EUCLIDEAN) -> ClusteringOutput:
    """Merge the primary and replica predictions for one image.

    The primary's first peak leads. Remaining candidates alternate
    replica[0], primary[1], replica[1], primary[2], ... and a candidate is
    dropped when it lies within ``thr`` grid cells of an accepted peak.
    """
    p, r = primary_out, replica_out
    if p.count == 0:
        # nothing was masked; the replica saw the plain image
        lead = r
        candidates = [(r, j) for j in range(r.count)]
    else:
        lead = p
        candidates = [(p, 0)]
        for j in range(max(p.count - 1, r.count)):
            if j < r.count:
                candidates.append((r, j))
            if j + 1 < p.count:
                candidates.append((p, j + 1))

    peaks, maps = [], []
    for src, j in candidates:
        if len(peaks) == k:
            break
        cand = src.peaks[j]
        if all(grid_distance(cand, q, metric) >= thr for q in peaks):
            peaks.append(cand)
            maps.append(src.heatmaps[j])
    shape = lead.heatmaps.shape[1:] if lead.heatmaps.ndim == 3 else (0, 0)
    hm = np.stack(maps) if maps else np.zeros((0,) + tuple(shape))
    return ClusteringOutput(heatmaps=hm, peaks=peaks, votes=lead.votes, config=lead.config)

"""Greedy distance-weighted voting of keypoint proposals into predictions.

Each channel of a binarized ``[c, h, w]`` feature volume is one proposal: a
single spike on the feature grid. Predictions are produced one at a time.
For prediction ``i`` the vote column ``W[:, i]`` starts at ones and is
refined ``n`` times::

    w = softmax(W[:, i])          # over proposals still in play
    Y = sum_ch w[ch] * x[ch]
    d[ch] = dist(peak(Y), peak(x[ch]))
    W[:, i] = w + 1 / max(d, dist_floor)

after which ``Y`` is rebuilt from the final column, emitted, and every
proposal with ``d < thr`` is removed from later rounds. The loop stops early
once no proposals remain.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ExcludedChannel, SizeError


class DistanceMetric(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    MANHATTAN = "manhattan"


@dataclass(frozen=True)
class ClusteringConfig:
    k: int = 5
    n: int = 3
    thr: float = 3.0
    dist_floor: float = 0.5
    metric: DistanceMetric = DistanceMetric.EUCLIDEAN

    def __post_init__(self):
        object.__setattr__(self, "metric", DistanceMetric(self.metric))
        if self.k < 1 or self.n < 1:
            raise ValueError("k and n must be >= 1")
        if not (self.thr > 0 and self.dist_floor > 0):
            raise ValueError("thr and dist_floor must be positive")


@dataclass
class ClusteringOutput:
    heatmaps: np.ndarray            # [k', h, w]
    peaks: list                     # [(row, col)] on the feature grid
    votes: np.ndarray               # W, [c, k]
    config: ClusteringConfig = field(default_factory=ClusteringConfig)

    @property
    def count(self) -> int:
        return len(self.peaks)


def binarize_proposals(x: np.ndarray) -> np.ndarray:
    """One-hot each channel at its maximum; channels with max <= 0 become zero."""
    if x.ndim != 3 or x.shape[0] < 1:
        raise SizeError(f"expected [c, h, w] with c >= 1, got {x.shape}")
    c = x.shape[0]
    flat = x.reshape(c, -1)
    idx = np.argmax(flat, axis=1)
    live = flat[np.arange(c), idx] > 0
    out = np.zeros_like(flat, dtype=np.float64)
    out[np.arange(c)[live], idx[live]] = 1.0
    return out.reshape(x.shape)


def grid_distance(a, b, metric=DistanceMetric.EUCLIDEAN) -> float:
    dr, dc = a[0] - b[0], a[1] - b[1]
    if DistanceMetric(metric) is DistanceMetric.MANHATTAN:
        return float(abs(dr) + abs(dc))
    return float(np.hypot(dr, dc))


def peak_of(m: np.ndarray):
    """(row, col) of the first maximum of a 2-d map."""
    r, c = np.unravel_index(int(np.argmax(m)), m.shape)
    return int(r), int(c)


def channel_peak_distance(y: np.ndarray, x_ch: np.ndarray, metric=DistanceMetric.EUCLIDEAN) -> float:
    if not np.any(x_ch):
        raise ExcludedChannel("proposal channel is all zero")
    return grid_distance(peak_of(y), peak_of(x_ch), metric)


def _masked_softmax(logits, live):
    out = np.zeros_like(logits)
    z = logits[live]
    e = np.exp(z - z.max())
    out[live] = e / e.sum()
    return out


def _distances(peak, rows, cols, metric):
    dr = rows - peak[0]
    dc = cols - peak[1]
    if metric is DistanceMetric.MANHATTAN:
        return np.abs(dr) + np.abs(dc)
    return np.hypot(dr, dc)


def cluster(x: np.ndarray, cfg: ClusteringConfig = ClusteringConfig()) -> ClusteringOutput:
    """Group binarized proposals ``x[c, h, w]`` into at most ``cfg.k`` predictions."""
    if x.ndim != 3:
        raise SizeError(f"expected [c, h, w], got {x.shape}")
    c, h, w = x.shape
    flat = x.reshape(c, h * w).astype(np.float64)
    live = np.any(flat != 0, axis=1)
    ch_rows, ch_cols = np.divmod(np.argmax(flat, axis=1), w)
    votes = np.ones((c, cfg.k))
    heatmaps, peaks = [], []

    for i in range(cfg.k):
        if not live.any():
            break
        d = None
        for _ in range(cfg.n):
            wv = _masked_softmax(votes[:, i], live)
            y = wv @ flat
            peak = divmod(int(np.argmax(y)), w)
            d = _distances(peak, ch_rows, ch_cols, cfg.metric)
            votes[live, i] = wv[live] + 1.0 / np.maximum(d[live], cfg.dist_floor)
        wv = _masked_softmax(votes[:, i], live)
        y = (wv @ flat).reshape(h, w)
        heatmaps.append(y)
        peaks.append(peak_of(y))
        live &= ~(d < cfg.thr)

    hm = np.stack(heatmaps) if heatmaps else np.zeros((0, h, w))
    return ClusteringOutput(heatmaps=hm, peaks=peaks, votes=votes, config=cfg)

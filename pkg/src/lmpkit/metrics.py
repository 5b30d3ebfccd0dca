"""Feature-map entropy and greedy-matching PCK."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyActivation, SizeError

ENTROPY_EPS = 1e-12


class MatchMode(str, enum.Enum):
    GT_REUSABLE = "gt_reusable"
    GT_CONSUMED = "gt_consumed"


@dataclass(frozen=True)
class PckConfig:
    alpha: float = 0.1
    match_mode: MatchMode = MatchMode.GT_CONSUMED

    def __post_init__(self):
        object.__setattr__(self, "match_mode", MatchMode(self.match_mode))
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass
class PckReport:
    per_keypoint_acc: list
    average: float
    n_images: int
    warning: Optional[str] = None
    correct: list = field(default_factory=list)


def channel_entropies(x: np.ndarray) -> np.ndarray:
    """Entropy (nats) of each channel with nonzero mass; zero channels are dropped."""
    if x.ndim != 3 or x.shape[0] < 1:
        raise SizeError(f"expected [c, h, w] with c >= 1, got {x.shape}")
    v = np.maximum(x.reshape(x.shape[0], -1), 0.0)
    v = v[v.sum(axis=1) > 0]
    p = v + ENTROPY_EPS
    p /= p.sum(axis=1, keepdims=True)
    return -(p * np.log(p)).sum(axis=1)


def feature_entropy(x: np.ndarray) -> float:
    """Mean entropy over the channels of ``x[c, h, w]`` that carry any mass.

    Channels are clamped at zero and L1-normalised before taking
    ``-sum p log p``. Raises :class:`EmptyActivation` if every channel is zero.
    """
    h = channel_entropies(x)
    if h.size == 0:
        raise EmptyActivation("all channels are zero")
    return float(h.mean())


def entropy_summary(feature_maps) -> tuple:
    """``(mean, std, n_images)`` of per-image entropy; all-zero images are skipped."""
    values = []
    for fm in feature_maps:
        try:
            values.append(feature_entropy(fm))
        except EmptyActivation:
            continue
    if not values:
        return float("nan"), float("nan"), 0
    arr = np.asarray(values)
    return float(arr.mean()), float(arr.std()), len(values)


def greedy_pck(preds, gts, cfg: PckConfig = PckConfig(), image_sizes=None, k=None) -> PckReport:
    """Greedy-matching PCK.

    ``preds[n]`` lists image ``n``'s predictions in emission order, so column
    ``i`` across images is keypoint ``i``. A prediction scores when the
    nearest still-available ground-truth point lies within
    ``alpha * min(h, w)`` pixels. In ``GT_CONSUMED`` mode a matched point
    becomes unavailable to later predictions of the same image. Missing
    predictions (fewer than ``k``) count as misses.
    """
    if len(preds) != len(gts):
        raise SizeError(f"{len(preds)} prediction lists for {len(gts)} images")
    n_img = len(preds)
    if image_sizes is None:
        raise ValueError("image_sizes is required")
    if isinstance(image_sizes, tuple) and len(image_sizes) == 2 and np.isscalar(image_sizes[0]):
        image_sizes = [image_sizes] * n_img
    if k is None:
        k = max((len(p) for p in preds), default=0)
    correct = np.zeros(k, dtype=np.int64)
    for pred, gt, (h, w) in zip(preds, gts, image_sizes):
        radius = cfg.alpha * min(h, w)
        available = [tuple(map(float, g)) for g in gt]
        for i, p in enumerate(list(pred)[:k]):
            if not available:
                break
            dists = [math.hypot(p[0] - g[0], p[1] - g[1]) for g in available]
            j = int(np.argmin(dists))
            if dists[j] <= radius:
                correct[i] += 1
                if cfg.match_mode is MatchMode.GT_CONSUMED:
                    available.pop(j)

    if n_img == 0:
        acc = [0.0] * k
        return PckReport(acc, 0.0, 0, warning="empty test split: no images evaluated",
                         correct=correct.tolist())
    acc = (correct / n_img).tolist()
    avg = float(np.mean(acc)) if k else 0.0
    return PckReport(acc, avg, n_img, correct=correct.tolist())


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_pck_csv(path, rows) -> None:
    """``rows`` is a list of ``(label, PckReport)``; values are percentages."""
    k = max((len(r.per_keypoint_acc) for _, r in rows), default=0)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["kind_or_thr"] + [f"kp{i + 1}" for i in range(k)] + ["avg"])
        for label, rep in rows:
            cols = [100.0 * a for a in rep.per_keypoint_acc]
            cols += [0.0] * (k - len(cols))
            out.writerow([label] + [_fmt(v) for v in cols] + [_fmt(100.0 * rep.average)])


def write_entropy_csv(path, rows) -> None:
    """``rows`` is a list of ``(pooling_label, mean, std, n_images)``."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["pooling", "mean_entropy", "std_entropy", "n_images"])
        for label, mean, std, n in rows:
            out.writerow([label, _fmt(mean), _fmt(std), n])

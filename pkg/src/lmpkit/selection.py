"""Per-image filter selection by peak activation strength."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import SizeError


@dataclass(frozen=True)
class SelectionConfig:
    """Keep either ``keep_count`` channels or ``keep_fraction`` of them.

    Exactly one may be set; with neither, a quarter of the channels is kept.
    """

    keep_count: Optional[int] = None
    keep_fraction: Optional[float] = None

    def __post_init__(self):
        if self.keep_count is not None and self.keep_fraction is not None:
            raise ValueError("keep_count and keep_fraction are mutually exclusive")
        if self.keep_count is not None and self.keep_count < 1:
            raise ValueError("keep_count must be >= 1")
        if self.keep_fraction is not None and not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")

    def count_for(self, c: int) -> int:
        if self.keep_count is not None:
            return self.keep_count
        frac = 0.25 if self.keep_fraction is None else self.keep_fraction
        return min(c, max(1, math.floor(frac * c + 0.5)))


def select_filters(x: np.ndarray, cfg: SelectionConfig = SelectionConfig()):
    """Keep the channels of ``x[c, h, w]`` with the largest maxima.

    Returns ``(x[indices], indices)`` with indices ascending. Equal maxima
    favour the lower channel index.
    """
    if x.ndim != 3:
        raise SizeError(f"expected [c, h, w], got {x.shape}")
    c = x.shape[0]
    keep = cfg.count_for(c)
    if keep > c:
        raise SizeError(f"cannot keep {keep} of {c} channels")
    maxima = x.reshape(c, -1).max(axis=1)
    # stable sort on -max keeps lower indices first among equals
    order = np.argsort(-maxima, kind="stable")[:keep]
    indices = np.sort(order)
    return x[indices], indices

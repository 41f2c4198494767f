from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class Batch:
    """Inputs ``x`` (n, d_x) with named per-sample side arrays ``y``.

    IV samples carry ``y = {"t": ..., "o": ...}``; RL transitions carry
    ``y = {"r": ..., "s_next": ...}``.
    """

    x: np.ndarray
    y: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"batch inputs must be 2-D, got shape {x.shape}")
        object.__setattr__(self, "x", x)
        ys = {}
        for k, v in self.y.items():
            v = np.asarray(v)
            if v.shape[0] != x.shape[0]:
                raise ValueError(f"y[{k!r}] has {v.shape[0]} rows, x has {x.shape[0]}")
            ys[k] = v
        object.__setattr__(self, "y", ys)

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return Batch(self.x[idx], {k: v[idx] for k, v in self.y.items()})

    def sample(self, rng: np.random.Generator, size: int | None) -> "Batch":
        """Draw ``size`` rows with replacement; ``None`` or ``size >= n`` in full-batch mode returns self."""
        if size is None:
            return self
        return self.take(rng.integers(0, len(self), size=size))

"""Time-indexed feature sequences shared by the encoders and the fusion module."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("content", "dynamic", "fused", "projected", "refined")


@dataclass
class FeatureSeq:
    values: np.ndarray  # [T, D]
    frame_rate: float
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] <= 0:
            raise ValueError("values must be [T, D] with D > 0")
        if not np.isfinite(self.values).all():
            raise ValueError("feature values must be finite")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

"""Feature layouts and tagged stage features shared by the model zoo, FTM and FAM."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .tensor import Tensor


class Layout(str, enum.Enum):
    SEQ = "SEQ"  # (B, N, C)
    GRID = "GRID"  # (B, C, H, W)

    @property
    def rank(self) -> int:
        return 3 if self is Layout.SEQ else 4

    @property
    def spectral_axes(self) -> tuple[int, ...]:
        # tokens for SEQ, (H, W) for GRID
        return (1,) if self is Layout.SEQ else (2, 3)


class Source(str, enum.Enum):
    TEACHER = "teacher"
    STUDENT = "student"


@dataclass(frozen=True)
class StageFeature:
    tensor: Tensor
    layout: Layout
    stage: int
    source: Source

    def __post_init__(self):
        if self.tensor.ndim != self.layout.rank:
            raise ValueError(
                f"{self.layout.value} feature must be rank {self.layout.rank}, "
                f"got shape {self.tensor.shape}"
            )
        if self.stage not in (1, 2, 3, 4):
            raise ValueError(f"stage must be in 1..4, got {self.stage}")

    @property
    def channels(self) -> int:
        return self.tensor.shape[2] if self.layout is Layout.SEQ else self.tensor.shape[1]

    @property
    def tokens(self) -> int:
        if self.layout is Layout.SEQ:
            return self.tensor.shape[1]
        return self.tensor.shape[2] * self.tensor.shape[3]

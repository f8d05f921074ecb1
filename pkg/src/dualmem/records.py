"""Region records and box geometry shared by every other module."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CorpusFormatError(ValueError):
    """A corpus file violates the record format (bad header, bad line, bad field)."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, origin top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"degenerate box [{self.x1}, {self.y1}, {self.x2}, {self.y2}]: "
                "x2 must exceed x1 and y2 must exceed y1"
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(eq=False)
class RegionRecord:
    """One proposal: where it is, how confident the proposer was, and its feature.

    ``gt_label`` is evaluation-side metadata; discovery never reads it except in
    the ground-truth-overlap initialization path.
    """

    region_id: str
    image_id: str
    box: BoundingBox
    score: float
    feature: np.ndarray
    gt_label: str | None = field(default=None)

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"region '{self.region_id}': score {self.score} outside [0, 1]")
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if self.feature.ndim != 1:
            raise ValueError(f"region '{self.region_id}': feature must be a flat vector")
        if not np.all(np.isfinite(self.feature)):
            raise ValueError(f"region '{self.region_id}': feature contains non-finite values")

"""Axis-aligned box arithmetic.

Boxes use continuous corner coordinates ``(x_min, y_min, x_max, y_max)`` with
no ``+1`` pixel convention, so a box touching another along an edge has zero
intersection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import DataError


@dataclass(frozen=True, order=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise DataError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(f"box must have positive extent, got {coords}")

    @classmethod
    def from_seq(cls, coords: Sequence[float]) -> "BBox":
        if len(coords) != 4:
            raise DataError(f"expected 4 box coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def scaled(self, s: float) -> "BBox":
        return BBox(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min


def area(b: BBox) -> float:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def intersection(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint or edge-touching boxes."""
    inter = intersection(a, b)
    if inter == 0.0:
        return 0.0
    if a == b:
        return 1.0
    # distinct boxes must stay below 1 even when rounding says otherwise
    return min(inter / (area(a) + area(b) - inter), math.nextafter(1.0, 0.0))


"""Axis-aligned box algebra: bounding boxes, IoU, clipping.

Boxes are stored corner-form (x_min, y_min, x_max, y_max) in continuous
pixel coordinates, origin top-left. Detector files using (x, y, w, h) are
converted at ingestion via :meth:`BoundingBox.from_xywh`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import GroundingError


class ClipCollapse(GroundingError):
    """Clamping a box to the image would collapse it to zero area."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"box must have positive extent, got {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> BoundingBox:
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def translate(self, dx: float, dy: float) -> BoundingBox:
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.width}x{self.height}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when disjoint."""
    ix0 = max(a.x_min, b.x_min)
    iy0 = max(a.y_min, b.y_min)
    ix1 = min(a.x_max, b.x_max)
    iy1 = min(a.y_max, b.y_max)
    iw = ix1 - ix0
    ih = iy1 - iy0
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def clip_to_image(box: BoundingBox, size: ImageSize) -> BoundingBox:
    """Clamp a box to [0, width] x [0, height].

    Raises ClipCollapse when the box lies entirely outside the image, so
    callers can drop the proposal.
    """
    x0 = min(max(box.x_min, 0.0), float(size.width))
    y0 = min(max(box.y_min, 0.0), float(size.height))
    x1 = min(max(box.x_max, 0.0), float(size.width))
    y1 = min(max(box.y_max, 0.0), float(size.height))
    if not (x0 < x1 and y0 < y1):
        raise ClipCollapse(f"box {box.as_tuple()} lies outside {size.width}x{size.height} image")
    return BoundingBox(x0, y0, x1, y1)

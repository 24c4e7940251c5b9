"""Axis-aligned rectangle arithmetic.

Rectangles are ``(x1, y1, x2, y2)`` tuples in window coordinates with
``x1 <= x2`` and ``y1 <= y2``. Everything here is a pure function over plain
floats; plain Python arithmetic is faster than numpy for the handful of boxes
a layout holds.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence


class Rect(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def area(r: Sequence[float]) -> float:
    return (r[2] - r[0]) * (r[3] - r[1])


def intersection_area(a: Sequence[float], b: Sequence[float]) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    if w <= 0:
        return 0.0
    h = min(a[3], b[3]) - max(a[1], b[1])
    if h <= 0:
        return 0.0
    return float(w * h)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union; 0 when the union is empty."""
    inter = intersection_area(a, b)
    union = area(a) + area(b) - inter
    if union > 0:
        return float(inter / union)
    return 0.0


def total_overlap(rects: Sequence[Sequence[float]]) -> float:
    """Sum of pairwise IoU over all unique pairs, i ascending then j."""
    boxes = [(float(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rects]
    areas = [(b[2] - b[0]) * (b[3] - b[1]) for b in boxes]
    n = len(boxes)
    total = 0.0
    # Inlined iou(); must stay numerically identical to it.
    for i in range(n):
        ax1, ay1, ax2, ay2 = boxes[i]
        area_i = areas[i]
        for j in range(i + 1, n):
            bx1, by1, bx2, by2 = boxes[j]
            w = min(ax2, bx2) - max(ax1, bx1)
            h = min(ay2, by2) - max(ay1, by1)
            inter = w * h if (w > 0 and h > 0) else 0.0
            union = area_i + areas[j] - inter
            total += inter / union if union > 0 else 0.0
    return total


def clip_to_window(r: Sequence[float], window_size: float) -> Rect:
    if window_size <= 0:
        raise ValueError(f"window_size must be positive, got {window_size}")
    return Rect(*(min(max(float(v), 0.0), float(window_size)) for v in r))

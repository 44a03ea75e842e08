"""Rectangles, IoU and class-agnostic non-maximum suppression."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from owdisc import kernels


class InvalidRectError(ValueError):
    """A rectangle with non-finite coordinates or non-positive extent."""


class Source(str, enum.Enum):
    CLASS_AWARE = "aware"
    CLASS_AGNOSTIC = "agnostic"
    FUSED = "fused"


@dataclass(frozen=True)
class Rect:
    """Axis-aligned box in corner form; area is ``(x2 - x1) * (y2 - y1)``."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidRectError(f"non-finite rect {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidRectError(f"degenerate rect {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class DetBox:
    rect: Rect
    score: float
    source: Source
    image_id: Hashable
    trusted: bool = False

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


def iou(a: Rect, b: Rect) -> float:
    """Intersection over union of two valid rectangles."""
    for r in (a, b):
        if not isinstance(r, Rect):
            raise InvalidRectError(f"expected Rect, got {type(r).__name__}")
    w = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    h = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = w * h
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(n, 4)`` and ``(m, 4)`` corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    w = np.maximum(0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]))
    h = np.maximum(0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = w * h
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _image_rank(image_ids):
    # orders opaque ids of mixed types deterministically
    keyed = sorted(set(image_ids), key=lambda v: (type(v).__name__, v))
    return {v: i for i, v in enumerate(keyed)}


def priority_order(boxes: Sequence[DetBox]) -> list[int]:
    """Indices sorted by descending score, then trusted first, then image id,
    then input position."""
    rank = _image_rank([b.image_id for b in boxes])
    return sorted(
        range(len(boxes)),
        key=lambda i: (-boxes[i].score, not boxes[i].trusted, rank[boxes[i].image_id], i),
    )


def class_agnostic_nms(boxes: Sequence[DetBox], iou_thresh: float) -> list[DetBox]:
    """Greedy NMS that ignores class labels.

    Boxes only suppress boxes with the same ``image_id``. The result is a
    subset of the input in priority order (see :func:`priority_order`), and no
    two surviving boxes of one image overlap with IoU above ``iou_thresh``.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    if len(boxes) == 0:
        return []
    order = priority_order(boxes)
    rank = _image_rank([b.image_id for b in boxes])
    coords = np.array([boxes[i].rect.as_tuple() for i in order], dtype=np.float64)
    groups = np.array([rank[boxes[i].image_id] for i in order], dtype=np.int64)
    keep = kernels.nms_keep(coords, groups, float(iou_thresh))
    return [boxes[i] for i, k in zip(order, keep) if k]

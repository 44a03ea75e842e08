"""Debiased region mining.

Two proposal streams (class-aware and class-agnostic) are brought onto a
common score scale by replacing every raw score with its empirical-CDF rank
within its own stream. Each stream is then thresholded with its own
``(alpha, beta)`` pair, the survivors are concatenated and duplicates are
collapsed by class-agnostic NMS within every image.
"""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from owdisc.geometry import DetBox, Source, class_agnostic_nms, iou_matrix


class EmptyProposalSetError(ValueError):
    pass


@dataclass(frozen=True)
class ProposalSet:
    boxes: tuple[DetBox, ...]
    detector_id: int
    calibrated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.detector_id not in (1, 2):
            raise ValueError(f"detector_id must be 1 or 2, got {self.detector_id}")
        sources = {b.source for b in self.boxes}
        if len(sources) > 1:
            raise ValueError(f"mixed sources in one proposal set: {sorted(s.value for s in sources)}")

    def __len__(self):
        return len(self.boxes)

    @property
    def scores(self) -> np.ndarray:
        return np.array([b.score for b in self.boxes], dtype=np.float64)


@dataclass(frozen=True)
class DrmParams:
    alpha1: float = 0.9
    alpha2: float = 0.9
    beta1: float = 0.2
    beta2: float = 0.2
    nms_iou: float = 0.5
    target: str = "uniform"

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.beta1 > self.alpha1 or self.beta2 > self.alpha2:
            raise ValueError("beta must not exceed alpha for either detector")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError(f"nms_iou={self.nms_iou} outside (0, 1)")
        if self.target != "uniform":
            raise ValueError(f"unsupported calibration target {self.target!r}")

    def thresholds(self, detector_id: int) -> tuple[float, float]:
        if detector_id == 1:
            return self.alpha1, self.beta1
        return self.alpha2, self.beta2


def calibrate_scores(pset: ProposalSet) -> ProposalSet:
    """Replace every score by ``rank / n`` within the set (ties share the
    mean rank), which maps any score distribution onto uniform ranks in
    ``(0, 1]``."""
    if len(pset) == 0:
        raise EmptyProposalSetError("empty proposal set")
    ranks = rankdata(pset.scores, method="average") / len(pset)
    boxes = [dataclasses.replace(b, score=float(r)) for b, r in zip(pset.boxes, ranks)]
    return ProposalSet(boxes, pset.detector_id, calibrated=True)


def filter_thresholds(pset: ProposalSet, alpha: float, beta: float) -> ProposalSet:
    """Drop boxes scoring below ``beta`` and mark boxes at or above ``alpha``
    as trusted."""
    if beta > alpha:
        raise ValueError(f"beta={beta} exceeds alpha={alpha}")
    if not pset.calibrated:
        raise ValueError("filter_thresholds expects a calibrated proposal set")
    boxes = [
        dataclasses.replace(b, trusted=b.score >= alpha)
        for b in pset.boxes
        if b.score >= beta
    ]
    return ProposalSet(boxes, pset.detector_id, calibrated=True)


def _prepare(pset: ProposalSet, params: DrmParams) -> list[DetBox]:
    if len(pset) == 0:
        return []
    alpha, beta = params.thresholds(pset.detector_id)
    filtered = filter_thresholds(calibrate_scores(pset), alpha, beta)
    return [dataclasses.replace(b, source=Source.FUSED) for b in filtered.boxes]


def debiased_region_mining(
    set_a: ProposalSet, set_b: ProposalSet, params: DrmParams = DrmParams()
) -> list[DetBox]:
    """Fuse two proposal streams into one list of ``Source.FUSED`` boxes.

    Calibration is global to each stream; NMS then runs per image. The output
    is grouped by image (in order of first appearance across ``set_a`` then
    ``set_b``) and score-sorted within each image.
    """
    if set_a.detector_id == set_b.detector_id:
        raise ValueError("proposal sets must come from different detectors")
    pooled = _prepare(set_a, params) + _prepare(set_b, params)
    per_image: dict = defaultdict(list)
    for b in pooled:
        per_image[b.image_id].append(b)
    fused: list[DetBox] = []
    for boxes in per_image.values():
        fused.extend(class_agnostic_nms(boxes, params.nms_iou))
    return fused


def fuse_single(pset: ProposalSet, params: DrmParams = DrmParams()) -> list[DetBox]:
    """Run the fusion pipeline with only one stream present."""
    other = ProposalSet([], 2 if pset.detector_id == 1 else 1)
    if pset.detector_id == 1:
        return debiased_region_mining(pset, other, params)
    return debiased_region_mining(other, pset, params)


def stream_recall(
    boxes: Sequence[DetBox], gt_boxes: dict, iou_thresh: float = 0.5
) -> float:
    """Fraction of ground-truth rects (``image_id -> list of Rect``) hit by
    at least one box with IoU >= ``iou_thresh``."""
    by_image: dict = defaultdict(list)
    for b in boxes:
        by_image[b.image_id].append(b.rect.as_tuple())
    total = hit = 0
    for image_id, rects in gt_boxes.items():
        if not rects:
            continue
        total += len(rects)
        props = by_image.get(image_id)
        if not props:
            continue
        M = iou_matrix(np.array([r.as_tuple() for r in rects]), np.array(props))
        hit += int(np.sum(M.max(axis=1) >= iou_thresh))
    return hit / total if total else 0.0

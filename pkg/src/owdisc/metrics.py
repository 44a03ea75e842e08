"""Open-world discovery metrics.

* CorLoc: fraction of images whose top-scoring proposal overlaps some
  ground-truth object with IoU > 0.5.
* Purity-coverage AuC: every clustered instance is matched to its best
  unknown-class ground-truth box; clusters are ranked by purity and the
  running (pooled) purity is integrated against the cumulative share of
  validly matched instances.
* Discovered classes: unknown classes that are the modal class of at least
  one sufficiently pure cluster.
* Cluster AP / AP50: clusters are named after their modal class and scored
  as a detector with VOC-style all-point interpolated AP.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from owdisc.geometry import DetBox, Rect, iou_matrix

COCO_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


@dataclass(frozen=True)
class GtObject:
    rect: Rect
    class_id: Hashable
    known: bool


@dataclass
class GroundTruth:
    images: dict = field(default_factory=dict)
    known_classes: frozenset = frozenset()
    unknown_classes: frozenset = frozenset()

    def __post_init__(self):
        self.known_classes = frozenset(self.known_classes)
        self.unknown_classes = frozenset(self.unknown_classes)
        overlap = self.known_classes & self.unknown_classes
        if overlap:
            raise ValueError(f"classes marked both known and unknown: {sorted(overlap, key=str)}")
        for objs in self.images.values():
            for o in objs:
                bucket = self.known_classes if o.known else self.unknown_classes
                if o.class_id not in bucket:
                    raise ValueError(f"class {o.class_id!r} missing from its known/unknown split")

    @classmethod
    def from_objects(cls, items: Iterable[tuple[Hashable, GtObject]], image_ids: Iterable[Hashable] = ()):
        images: dict = {i: [] for i in image_ids}
        known, unknown = set(), set()
        for image_id, obj in items:
            images.setdefault(image_id, []).append(obj)
            (known if obj.known else unknown).add(obj.class_id)
        return cls(images, frozenset(known), frozenset(unknown))

    def subset(self, known: bool) -> "GroundTruth":
        """Ground truth restricted to known (or unknown) objects."""
        images = {i: [o for o in objs if o.known == known] for i, objs in self.images.items()}
        return GroundTruth(images, self.known_classes, self.unknown_classes)

    def rects(self) -> dict:
        return {i: [o.rect for o in objs] for i, objs in self.images.items()}

    @property
    def n_objects(self) -> int:
        return sum(len(v) for v in self.images.values())


def _top_proposals(proposals: Sequence[DetBox]) -> dict:
    top: dict = {}
    for b in proposals:
        cur = top.get(b.image_id)
        if cur is None or (b.score, b.trusted) > (cur.score, cur.trusted):
            top[b.image_id] = b
    return top


def corloc(proposals: Sequence[DetBox], gt: GroundTruth, iou_thresh: float = 0.5) -> float:
    """Share of images with ground truth whose top proposal has IoU above
    ``iou_thresh`` with at least one ground-truth box.

    Score ties go to trusted boxes, then to the earlier box.
    """
    images = [i for i, objs in gt.images.items() if objs]
    if not images:
        raise ValueError("no images with ground-truth objects")
    top = _top_proposals(proposals)
    hit = 0
    for image_id in images:
        b = top.get(image_id)
        if b is None:
            continue
        gts = np.array([o.rect.as_tuple() for o in gt.images[image_id]])
        if np.any(iou_matrix(np.array([b.rect.as_tuple()]), gts) > iou_thresh):
            hit += 1
    return hit / len(images)


def match_unknown(instances: Sequence[DetBox], gt: GroundTruth, iou_thresh: float):
    """Best unknown-class ground-truth match of every instance.

    Returns ``(classes, ious)`` where ``classes[i]`` is the class of the
    highest-IoU unknown box in the instance's image (first box on ties), or
    ``None`` when that IoU is below ``iou_thresh``.
    """
    classes: list = [None] * len(instances)
    ious = np.zeros(len(instances))
    unk = {i: [o for o in objs if not o.known] for i, objs in gt.images.items()}
    by_image: dict = defaultdict(list)
    for idx, b in enumerate(instances):
        by_image[b.image_id].append(idx)
    for image_id, idxs in by_image.items():
        objs = unk.get(image_id)
        if not objs:
            continue
        M = iou_matrix(
            np.array([instances[i].rect.as_tuple() for i in idxs]),
            np.array([o.rect.as_tuple() for o in objs]),
        )
        best = M.argmax(axis=1)
        for row, i in enumerate(idxs):
            v = M[row, best[row]]
            ious[i] = v
            if v >= iou_thresh:
                classes[i] = objs[best[row]].class_id
    return classes, ious


@dataclass(frozen=True)
class ClusterStat:
    size: int
    valid: int
    modal_class: Hashable
    modal_count: int

    @property
    def purity(self) -> float:
        return self.modal_count / self.size


def _modal(counter: Counter):
    if not counter:
        return None, 0
    best = max(counter.values())
    cls = min((c for c, v in counter.items() if v == best), key=lambda c: (type(c).__name__, c))
    return cls, best


def cluster_stats(assignments: Sequence[int], classes: Sequence) -> list[ClusterStat]:
    members: dict = defaultdict(list)
    for a, c in zip(np.asarray(assignments).tolist(), classes):
        members[a].append(c)
    out = []
    for cs in members.values():
        counter = Counter(c for c in cs if c is not None)
        modal_class, modal_count = _modal(counter)
        out.append(ClusterStat(len(cs), sum(counter.values()), modal_class, modal_count))
    return out


def _check_aligned(instances, assignments):
    if len(instances) != len(assignments):
        raise ValueError(f"{len(instances)} instances but {len(assignments)} assignments")


def purity_coverage_auc(
    instances: Sequence[DetBox], assignments: Sequence[int], gt: GroundTruth, iou_thresh: float
):
    """Purity-coverage curve and its normalized area.

    Clusters are ordered by purity (ties: larger clusters first, then more
    valid instances; remaining ties contribute identically). After the
    ``j``-th cluster the curve point is ``(valid instances in clusters 1..j /
    all valid instances, modal counts in 1..j / members in 1..j)``. The area
    uses the trapezoid rule from coverage 0, where the curve starts at the
    first cluster's purity. Returns ``(points, auc)``.
    """
    _check_aligned(instances, assignments)
    classes, _ = match_unknown(instances, gt, iou_thresh)
    stats = cluster_stats(assignments, classes)
    total_valid = sum(s.valid for s in stats)
    if total_valid == 0:
        return [], 0.0
    stats.sort(key=lambda s: (-s.purity, -s.size, -s.valid))
    points = []
    cum_valid = cum_modal = cum_size = 0
    for s in stats:
        cum_valid += s.valid
        cum_modal += s.modal_count
        cum_size += s.size
        points.append((cum_valid / total_valid, cum_modal / cum_size))
    xs = np.array([0.0] + [p[0] for p in points])
    ys = np.array([points[0][1]] + [p[1] for p in points])
    auc = float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))
    return points, min(max(auc, 0.0), 1.0)


def discovered_classes(
    instances: Sequence[DetBox],
    assignments: Sequence[int],
    gt: GroundTruth,
    iou_thresh: float = 0.5,
    purity_min: float = 0.5,
) -> int:
    """Number of distinct unknown classes that are the modal class of a
    cluster with purity at least ``purity_min``."""
    _check_aligned(instances, assignments)
    classes, _ = match_unknown(instances, gt, iou_thresh)
    found = {
        s.modal_class
        for s in cluster_stats(assignments, classes)
        if s.modal_count > 0 and s.purity >= purity_min
    }
    return len(found)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under a precision-recall curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def class_ap(dets: Sequence[DetBox], gt_rects: Mapping, iou_thresh: float) -> float:
    """AP of one class: ``dets`` against ``gt_rects`` (image_id -> rects)."""
    n_gt = sum(len(v) for v in gt_rects.values())
    if n_gt == 0:
        raise ValueError("class without ground truth")
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = {i: np.zeros(len(v), dtype=bool) for i, v in gt_rects.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        d = dets[i]
        rects = gt_rects.get(d.image_id)
        if not rects:
            continue
        ious = iou_matrix(np.array([d.rect.as_tuple()]), np.array([r.as_tuple() for r in rects]))[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh and not taken[d.image_id][j]:
            taken[d.image_id][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    return average_precision(recall, precision)


def cluster_map(
    instances: Sequence[DetBox],
    assignments: Sequence[int],
    gt: GroundTruth,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    label_iou: float = 0.5,
) -> tuple[float, float]:
    """``(ap, ap50)`` of clusters used as class predictions.

    Each cluster is named after its modal valid unknown class (matches at
    ``label_iou``); clusters without valid members predict nothing. AP is
    averaged over unknown classes that have ground truth, then over
    ``iou_thresholds``; AP50 uses IoU 0.5 alone.
    """
    _check_aligned(instances, assignments)
    classes, _ = match_unknown(instances, gt, label_iou)
    members: dict = defaultdict(list)
    for idx, a in enumerate(np.asarray(assignments).tolist()):
        members[a].append(idx)
    predicted: dict = defaultdict(list)
    for idxs in members.values():
        label, _ = _modal(Counter(classes[i] for i in idxs if classes[i] is not None))
        if label is None:
            continue
        predicted[label].extend(idxs)
    predicted = {c: [instances[i] for i in sorted(idxs)] for c, idxs in predicted.items()}

    per_class: dict = defaultdict(lambda: defaultdict(list))
    for image_id, objs in gt.images.items():
        for o in objs:
            if not o.known:
                per_class[o.class_id][image_id].append(o.rect)
    if not per_class:
        return 0.0, 0.0

    def mean_ap(t):
        return float(np.mean([class_ap(predicted.get(c, []), per_class[c], t) for c in per_class]))

    ap = float(np.mean([mean_ap(t) for t in iou_thresholds]))
    return ap, mean_ap(0.5)


@dataclass
class EvalReport:
    corloc: float
    auc: dict
    discovered_classes: int
    ap: float
    ap50: float
    curve_points: dict
    corloc_known: float | None = None
    corloc_unknown: float | None = None
    n_instances: int = 0
    k: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["auc"] = {f"{t:g}": v for t, v in self.auc.items()}
        d["curve_points"] = {f"{t:g}": [list(p) for p in pts] for t, pts in self.curve_points.items()}
        return json.dumps(d, sort_keys=True, indent=2)

    def curve_rows(self) -> list[tuple[float, float, float]]:
        return [(t, c, p) for t, pts in sorted(self.curve_points.items()) for c, p in pts]


def _safe_corloc(proposals, gt):
    try:
        return corloc(proposals, gt)
    except ValueError:
        return None


def evaluate(
    proposals: Sequence[DetBox],
    instances: Sequence[DetBox],
    assignments: Sequence[int],
    gt: GroundTruth,
    auc_thresholds: Sequence[float] = (0.5, 0.2),
    disc_iou: float = 0.5,
    purity_min: float = 0.5,
) -> EvalReport:
    """All discovery metrics for one proposal set and one clustering."""
    auc, curves = {}, {}
    for t in auc_thresholds:
        curves[t], auc[t] = purity_coverage_auc(instances, assignments, gt, t)
    ap, ap50 = cluster_map(instances, assignments, gt)
    return EvalReport(
        corloc=corloc(proposals, gt),
        auc=auc,
        discovered_classes=discovered_classes(instances, assignments, gt, disc_iou, purity_min),
        ap=ap,
        ap50=ap50,
        curve_points=curves,
        corloc_known=_safe_corloc(proposals, gt.subset(known=True)),
        corloc_unknown=_safe_corloc(proposals, gt.subset(known=False)),
        n_instances=len(instances),
        k=len(set(np.asarray(assignments).tolist())),
    )

"""Synthetic open-world scenes.

A world is a set of images holding non-overlapping rectangles, each labeled
with one of ``n_known + n_unknown`` classes. Class ``c`` is known when
``c < n_known``. Every class owns a random unit-vector descriptor mean and
every object gets ``normalize(separation * mean_c + noise)``.

Two simulated detectors turn the ground truth into proposal streams. Each
object is found with a class-conditional recall, its corners are jittered
and it receives a Beta-distributed raw score. Random false positives with
their own score model are added on top.

Proposals that do not coincide with an object get a descriptor from
:func:`proposal_descriptors`, a crude stand-in for a frozen backbone applied
to the crop: the IoU-weighted sum of overlapping object descriptors plus a
box-specific background vector.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from owdisc.drm import ProposalSet
from owdisc.geometry import DetBox, Rect, Source, iou_matrix
from owdisc.metrics import GroundTruth, GtObject


class PlacementError(RuntimeError):
    """Raised when an image's objects cannot be placed without overlap."""


def _check_beta(name: str, mean: float, sd: float):
    if not 0.0 < mean < 1.0:
        raise ValueError(f"{name} mean must lie in (0, 1)")
    if not 0.0 < sd * sd < mean * (1.0 - mean):
        raise ValueError(f"{name} spread {sd} impossible for a Beta with mean {mean}")


def _beta(rng: np.random.Generator, mean: float, sd: float, size=None):
    conc = mean * (1.0 - mean) / (sd * sd) - 1.0
    return rng.beta(mean * conc, (1.0 - mean) * conc, size=size)


@dataclass(frozen=True)
class DetectorProfile:
    """Behavior of one simulated detector.

    Raw scores follow Beta distributions given by mean and standard deviation:
    ``true_score_*`` for detected known objects and for unknown objects the
    detector mistakes for known ones, ``unknown_score_*`` for the remaining
    detected unknown objects and ``fp_score_*`` for false positives.
    """

    source: Source = Source.CLASS_AWARE
    recall_known: float = 0.95
    recall_unknown: float = 0.2
    localization_jitter_sigma: float = 2.0
    true_score_mean: float = 0.85
    true_score_sd: float = 0.08
    unknown_score_mean: float = 0.3
    unknown_score_sd: float = 0.12
    fp_per_image: float = 0.5
    fp_score_mean: float = 0.15
    fp_score_sd: float = 0.08
    misclassify_unknown_as_known: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "source", Source(self.source))
        if self.source == Source.FUSED:
            raise ValueError("a simulated detector cannot be the fused stream")
        for name in ("recall_known", "recall_unknown", "misclassify_unknown_as_known"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.localization_jitter_sigma < 0 or self.fp_per_image < 0:
            raise ValueError("jitter and false-positive rate must be non-negative")
        _check_beta("true_score", self.true_score_mean, self.true_score_sd)
        _check_beta("unknown_score", self.unknown_score_mean, self.unknown_score_sd)
        _check_beta("fp_score", self.fp_score_mean, self.fp_score_sd)

    @property
    def detector_id(self) -> int:
        return 1 if self.source == Source.CLASS_AWARE else 2


def aware_profile() -> DetectorProfile:
    """Precise and confident on known classes, mostly blind to unknown ones."""
    return DetectorProfile()


def agnostic_profile() -> DetectorProfile:
    """Finds objects of any class, with looser boxes and more clutter."""
    return DetectorProfile(
        source=Source.CLASS_AGNOSTIC,
        recall_known=0.8,
        recall_unknown=0.8,
        localization_jitter_sigma=5.0,
        true_score_mean=0.7,
        true_score_sd=0.12,
        unknown_score_mean=0.7,
        unknown_score_sd=0.12,
        fp_per_image=2.0,
        fp_score_mean=0.35,
        fp_score_sd=0.15,
        misclassify_unknown_as_known=0.0,
    )


@dataclass(frozen=True)
class WorldConfig:
    n_images: int = 500
    n_known: int = 20
    n_unknown: int = 60
    objects_per_image: tuple = (1, 6)
    canvas: tuple = (640, 480)
    object_size: tuple = (48, 200)
    d_in: int = 64
    class_mean_separation: float = 1.0
    descriptor_noise_sigma: float = 0.12
    background_weight: float = 1.0
    max_placement_retries: int = 200
    aware: DetectorProfile = field(default_factory=aware_profile)
    agnostic: DetectorProfile = field(default_factory=agnostic_profile)
    seed: int = 0

    def __post_init__(self):
        for name in ("objects_per_image", "canvas", "object_size"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_images < 1 or self.n_known < 1 or self.n_unknown < 1 or self.d_in < 1:
            raise ValueError("image, class and dimension counts must be positive")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        smin, smax = self.object_size
        if not 0 < smin <= smax:
            raise ValueError(f"bad object_size range {self.object_size}")
        if min(self.canvas) <= 0:
            raise ValueError("canvas must have positive size")
        if self.class_mean_separation <= 0:
            raise ValueError("class_mean_separation must be positive")
        if self.descriptor_noise_sigma < 0 or self.background_weight < 0:
            raise ValueError("noise and background weight must be non-negative")
        if self.max_placement_retries < 1:
            raise ValueError("max_placement_retries must be positive")

    @property
    def n_classes(self) -> int:
        return self.n_known + self.n_unknown


class World(NamedTuple):
    gt: GroundTruth
    descriptors: np.ndarray  # one row per object, in GroundTruth iteration order


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _seed_streams(seed: int):
    """Independent (class means, images, detectors) seed sequences."""
    return np.random.SeedSequence(seed).spawn(3)


def class_means(config: WorldConfig) -> np.ndarray:
    """Fixed random unit-vector mean per class."""
    means_ss = _seed_streams(config.seed)[0]
    rng = np.random.default_rng(means_ss)
    return _normalize(rng.normal(size=(config.n_classes, config.d_in)))


def _place(rng: np.random.Generator, n: int, config: WorldConfig) -> list[Rect]:
    W, H = config.canvas
    smin, smax = config.object_size
    if smin > W or smin > H:
        if n:
            raise PlacementError(f"objects of size {smin} do not fit a {W}x{H} canvas")
        return []
    placed: list[tuple] = []
    for _ in range(n):
        for _attempt in range(config.max_placement_retries):
            w = rng.uniform(smin, min(smax, W))
            h = rng.uniform(smin, min(smax, H))
            x = rng.uniform(0, W - w)
            y = rng.uniform(0, H - h)
            r = (x, y, x + w, y + h)
            if all(r[2] <= p[0] or p[2] <= r[0] or r[3] <= p[1] or p[3] <= r[1] for p in placed):
                placed.append(r)
                break
        else:
            raise PlacementError(
                f"could not place object {len(placed) + 1} of {n} after {config.max_placement_retries} tries"
            )
    return [Rect(*r) for r in placed]


def _image_streams(seed: int, n: int):
    return _seed_streams(seed)[1].spawn(n)


def generate_world(config: WorldConfig) -> World:
    """Sample ground truth and object descriptors.

    Image ``i`` draws from its own child seed, so generating any subset of
    images in any order gives the same result.
    """
    means = class_means(config)
    lo, hi = config.objects_per_image
    images: dict = {}
    rows: list[np.ndarray] = []
    for image_id, ss in enumerate(_image_streams(config.seed, config.n_images)):
        rng = np.random.default_rng(ss)
        n = int(rng.integers(lo, hi + 1))
        rects = _place(rng, n, config)
        classes = rng.integers(0, config.n_classes, size=n)
        noise = rng.normal(size=(n, config.d_in)) * config.descriptor_noise_sigma
        images[image_id] = [GtObject(r, int(c), bool(c < config.n_known)) for r, c in zip(rects, classes)]
        if n:
            rows.append(_normalize(config.class_mean_separation * means[classes] + noise))
    gt = GroundTruth(
        images,
        frozenset(range(config.n_known)),
        frozenset(range(config.n_known, config.n_classes)),
    )
    desc = np.vstack(rows) if rows else np.zeros((0, config.d_in))
    return World(gt, desc)


def _jitter(rng, rect: Rect, sigma: float, canvas) -> Rect:
    W, H = canvas
    if sigma == 0:
        return rect
    x1, y1, x2, y2 = np.asarray(rect.as_tuple()) + rng.normal(0.0, sigma, 4)
    x1, x2 = sorted((float(np.clip(x1, 0, W)), float(np.clip(x2, 0, W))))
    y1, y2 = sorted((float(np.clip(y1, 0, H)), float(np.clip(y2, 0, H))))
    # keep at least one pixel of extent
    if x2 - x1 < 1.0:
        x1, x2 = (x1, x1 + 1.0) if x1 + 1.0 <= W else (x2 - 1.0, x2)
    if y2 - y1 < 1.0:
        y1, y2 = (y1, y1 + 1.0) if y1 + 1.0 <= H else (y2 - 1.0, y2)
    return Rect(x1, y1, x2, y2)


def _random_rect(rng, canvas, size) -> Rect:
    W, H = canvas
    w = rng.uniform(min(size[0], W), min(size[1], W))
    h = rng.uniform(min(size[0], H), min(size[1], H))
    x = rng.uniform(0, W - w)
    y = rng.uniform(0, H - h)
    return Rect(x, y, x + w, y + h)


def simulate_detector(
    gt: GroundTruth,
    profile: DetectorProfile,
    seed: int,
    canvas: tuple = (640, 480),
    fp_size: tuple = (24, 200),
) -> ProposalSet:
    """Proposal stream of one simulated detector over every image of ``gt``.

    Boxes are grouped by image; detections come before false positives.
    """
    boxes: list[DetBox] = []
    streams = np.random.SeedSequence(seed).spawn(len(gt.images))
    for ss, (image_id, objs) in zip(streams, gt.images.items()):
        rng = np.random.default_rng(ss)
        for o in objs:
            recall = profile.recall_known if o.known else profile.recall_unknown
            if rng.random() >= recall:
                continue
            rect = _jitter(rng, o.rect, profile.localization_jitter_sigma, canvas)
            confident = o.known or rng.random() < profile.misclassify_unknown_as_known
            if confident:
                score = _beta(rng, profile.true_score_mean, profile.true_score_sd)
            else:
                score = _beta(rng, profile.unknown_score_mean, profile.unknown_score_sd)
            boxes.append(DetBox(rect, float(score), profile.source, image_id))
        for _ in range(int(rng.poisson(profile.fp_per_image))):
            rect = _random_rect(rng, canvas, fp_size)
            score = _beta(rng, profile.fp_score_mean, profile.fp_score_sd)
            boxes.append(DetBox(rect, float(score), profile.source, image_id))
    return ProposalSet(boxes, profile.detector_id)


def simulate_streams(config: WorldConfig, gt: GroundTruth) -> tuple[ProposalSet, ProposalSet]:
    """Class-aware and class-agnostic streams for ``gt`` with independent seeds."""
    aware_ss, agnostic_ss = _seed_streams(config.seed)[2].spawn(2)
    seed_of = lambda ss: int(ss.generate_state(1, dtype=np.uint64)[0])
    aware = simulate_detector(gt, config.aware, seed_of(aware_ss), config.canvas)
    agnostic = simulate_detector(gt, config.agnostic, seed_of(agnostic_ss), config.canvas)
    return aware, agnostic


def _background(seed: int, image_id, rect: Rect, d: int) -> np.ndarray:
    key = repr((seed, image_id, rect.as_tuple())).encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return _normalize(rng.normal(size=d))


def proposal_descriptors(
    boxes: Sequence[DetBox], world: World, config: WorldConfig
) -> np.ndarray:
    """Descriptor of every proposal crop.

    ``normalize(sum_j iou_j * d_j + background_weight * (1 - max_j iou_j) * b)``
    where ``d_j`` runs over the objects of the box's image and ``b`` is a
    unit background vector determined by the box alone.
    """
    offsets: dict = {}
    start = 0
    for image_id, objs in world.gt.images.items():
        offsets[image_id] = (start, objs)
        start += len(objs)
    out = np.empty((len(boxes), config.d_in))
    for i, b in enumerate(boxes):
        begin, objs = offsets.get(b.image_id, (0, []))
        v = np.zeros(config.d_in)
        top = 0.0
        if objs:
            ious = iou_matrix(
                np.array([b.rect.as_tuple()]), np.array([o.rect.as_tuple() for o in objs])
            )[0]
            v = ious @ world.descriptors[begin : begin + len(objs)]
            top = float(ious.max())
        if top < 1.0 and config.background_weight > 0:
            v = v + config.background_weight * (1.0 - top) * _background(
                config.seed, b.image_id, b.rect, config.d_in
            )
        out[i] = _normalize(v)
    return out

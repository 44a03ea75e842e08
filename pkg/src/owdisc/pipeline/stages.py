"""Pipeline stages.

Every stage reads its declared inputs from the run directory and writes its
declared outputs there:

========== ================================================ ==========================================
stage      reads                                            writes
========== ================================================ ==========================================
generate   (config only)                                    gt.jsonl, proposals_aware.jsonl,
                                                            proposals_agnostic.jsonl, descriptors.bin,
                                                            descriptors_index.jsonl
fuse       gt.jsonl, proposals_*.jsonl, descriptors.bin     fused.jsonl, features.bin,
                                                            features_index.jsonl
train      gt.jsonl, fused.jsonl, features.bin              embedder.bin, train_loss.csv
cluster    gt.jsonl, fused.jsonl, features.bin,             clusters_base.jsonl, clusters_over.jsonl
           embedder.bin
evaluate   gt.jsonl, fused.jsonl, clusters_*.jsonl          eval_base.json, eval_over.json,
                                                            curve_base.csv, curve_over.csv
report     gt.jsonl, proposals_*.jsonl, descriptors.bin     report.csv
bench      (config only)                                    bench_cluster.csv
========== ================================================ ==========================================

``features.bin`` holds one synthetic crop descriptor per fused proposal.
Fused proposals whose best known-class ground-truth match reaches
``known_label_iou`` carry that class as a training label. All other fused
proposals are unlabeled and form the instances that get clustered.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from owdisc.cluster import ClusterParams, Clustering, kmeans_full, kmeans_minibatch, overcluster_pair
from owdisc.drm import ProposalSet, debiased_region_mining, fuse_single, stream_recall
from owdisc.embed import TrainResult, embed_batch, train_embedder
from owdisc.geometry import DetBox, Source, iou_matrix
from owdisc.metrics import EvalReport, GroundTruth, evaluate
from owdisc.pipeline import io
from owdisc.pipeline.config import RunConfig
from owdisc.synth import World, generate_world, proposal_descriptors, simulate_streams

GT = "gt.jsonl"
AWARE = "proposals_aware.jsonl"
AGNOSTIC = "proposals_agnostic.jsonl"
DESC = "descriptors.bin"
DESC_INDEX = "descriptors_index.jsonl"
FUSED = "fused.jsonl"
FEATURES = "features.bin"
FEATURES_INDEX = "features_index.jsonl"
EMBEDDER = "embedder.bin"
TRAIN_LOSS = "train_loss.csv"
SETTINGS = ("base", "over")


# ---------------------------------------------------------------------------
# in-memory building blocks

def known_labels(boxes: Sequence[DetBox], gt: GroundTruth, iou_thresh: float) -> list:
    """Known class of each box's best known-object match, or ``None``."""
    labels: list = [None] * len(boxes)
    known = {i: [o for o in objs if o.known] for i, objs in gt.images.items()}
    for idx, b in enumerate(boxes):
        objs = known.get(b.image_id)
        if not objs:
            continue
        ious = iou_matrix(np.array([b.rect.as_tuple()]), np.array([o.rect.as_tuple() for o in objs]))[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            labels[idx] = objs[j].class_id
    return labels


def cluster_params(cfg: RunConfig) -> ClusterParams:
    c = cfg.cluster
    return ClusterParams(
        k=1,
        batch_size=c.batch_size,
        max_iters=c.max_iters,
        init_subset_size=c.init_subset_size,
        init_max_iters=c.init_max_iters,
        tol=c.tol,
        seed=cfg.stage_seed("cluster"),
    )


def train(features: np.ndarray, labels: list, cfg: RunConfig) -> TrainResult:
    return train_embedder(features, labels, cfg.contrastive)


def cluster_instances(Z: np.ndarray, cfg: RunConfig) -> tuple[Clustering, Clustering]:
    if Z.shape[0] < cfg.k_over:
        raise ValueError(
            f"{Z.shape[0]} unlabeled instances cannot fill k_over={cfg.k_over} clusters"
        )
    return overcluster_pair(Z, cfg.k_base, cfg.k_over, cluster_params(cfg), method=cfg.cluster.method)


def evaluate_clustering(
    proposals: Sequence[DetBox], instances: Sequence[DetBox], assignments, gt: GroundTruth, cfg: RunConfig
) -> EvalReport:
    m = cfg.metrics
    return evaluate(proposals, instances, assignments, gt, m.auc_thresholds, m.disc_iou, m.purity_min)


@dataclass
class Discovery:
    proposals: list
    instance_idx: np.ndarray
    training: TrainResult
    clusterings: dict
    reports: dict


def discover(proposals: list, features: np.ndarray, gt: GroundTruth, cfg: RunConfig) -> Discovery:
    """Train, cluster the unlabeled proposals at both k and evaluate."""
    labels = known_labels(proposals, gt, cfg.metrics.known_label_iou)
    result = train(features, labels, cfg)
    idx = np.array([i for i, l in enumerate(labels) if l is None], dtype=np.int64)
    Z = embed_batch(result.embedder, features[idx])
    base, over = cluster_instances(Z, cfg)
    instances = [proposals[i] for i in idx]
    clusterings = {"base": base, "over": over}
    reports = {
        s: evaluate_clustering(proposals, instances, c.assignments, gt, cfg) for s, c in clusterings.items()
    }
    return Discovery(proposals, idx, result, clusterings, reports)


# ---------------------------------------------------------------------------
# file-backed stages

def _world_from_files(run_dir: Path) -> World:
    gt = io.read_gt(run_dir / GT)
    desc = io.read_matrix(run_dir / DESC)
    io.read_index(run_dir / DESC_INDEX, desc.shape[0])
    if desc.shape[0] != gt.n_objects:
        raise ValueError(f"{DESC} has {desc.shape[0]} rows for {gt.n_objects} ground-truth objects")
    return World(gt, desc)


def _streams_from_files(run_dir: Path) -> tuple[ProposalSet, ProposalSet]:
    aware = io.read_boxes(run_dir / AWARE, Source.CLASS_AWARE)
    agnostic = io.read_boxes(run_dir / AGNOSTIC, Source.CLASS_AGNOSTIC)
    return ProposalSet(aware, 1), ProposalSet(agnostic, 2)


def _fused_with_features(run_dir: Path, cfg: RunConfig):
    proposals = io.read_boxes(run_dir / FUSED)
    features = io.read_matrix(run_dir / FEATURES)
    io.read_index(run_dir / FEATURES_INDEX, features.shape[0])
    if features.shape[0] != len(proposals):
        raise ValueError(f"{FEATURES} has {features.shape[0]} rows for {len(proposals)} proposals")
    return proposals, features


def stage_generate(cfg: RunConfig, run_dir) -> list[Path]:
    """Simulate a world and both detector streams."""
    run_dir = io.ensure_dir(run_dir)
    world = generate_world(cfg.world)
    aware, agnostic = simulate_streams(cfg.world, world.gt)
    io.write_gt(run_dir / GT, world.gt)
    io.write_boxes(run_dir / AWARE, aware.boxes)
    io.write_boxes(run_dir / AGNOSTIC, agnostic.boxes)
    io.write_matrix(run_dir / DESC, world.descriptors)
    index = (
        {"instance_id": k, "image_id": image_id, "object": j}
        for k, (image_id, j) in enumerate(
            (i, j) for i, objs in world.gt.images.items() for j in range(len(objs))
        )
    )
    io.write_jsonl(run_dir / DESC_INDEX, index)
    return [run_dir / f for f in (GT, AWARE, AGNOSTIC, DESC, DESC_INDEX)]


def _write_features(run_dir: Path, proposals, world: World, cfg: RunConfig):
    features = proposal_descriptors(proposals, world, cfg.world)
    io.write_matrix(run_dir / FEATURES, features)
    io.write_jsonl(
        run_dir / FEATURES_INDEX,
        ({"instance_id": k, "image_id": b.image_id} for k, b in enumerate(proposals)),
    )


def stage_fuse(cfg: RunConfig, run_dir) -> list[Path]:
    """Fuse the two proposal streams and extract crop features."""
    run_dir = Path(run_dir)
    world = _world_from_files(run_dir)
    aware, agnostic = _streams_from_files(run_dir)
    fused = debiased_region_mining(aware, agnostic, cfg.drm)
    io.write_boxes(run_dir / FUSED, fused)
    _write_features(run_dir, fused, world, cfg)
    return [run_dir / f for f in (FUSED, FEATURES, FEATURES_INDEX)]


def stage_train(cfg: RunConfig, run_dir) -> list[Path]:
    """Train the contrastive embedder on fused proposals."""
    run_dir = Path(run_dir)
    gt = io.read_gt(run_dir / GT)
    proposals, features = _fused_with_features(run_dir, cfg)
    labels = known_labels(proposals, gt, cfg.metrics.known_label_iou)
    result = train(features, labels, cfg)
    io.write_embedder(run_dir / EMBEDDER, result.embedder, cfg.contrastive.seed)
    io.write_csv(run_dir / TRAIN_LOSS, ["epoch", "mean_loss"], enumerate(result.loss_trace, 1))
    return [run_dir / EMBEDDER, run_dir / TRAIN_LOSS]


def stage_cluster(cfg: RunConfig, run_dir) -> list[Path]:
    """Cluster unlabeled proposals at k_base and k_over."""
    run_dir = Path(run_dir)
    gt = io.read_gt(run_dir / GT)
    proposals, features = _fused_with_features(run_dir, cfg)
    embedder, _ = io.read_embedder(run_dir / EMBEDDER)
    labels = known_labels(proposals, gt, cfg.metrics.known_label_iou)
    idx = [i for i, l in enumerate(labels) if l is None]
    Z = embed_batch(embedder, features[idx])
    base, over = cluster_instances(Z, cfg)
    out = []
    for name, c in zip(SETTINGS, (base, over)):
        path = run_dir / f"clusters_{name}.jsonl"
        io.write_jsonl(
            path, ({"instance_id": int(i), "cluster": int(a)} for i, a in zip(idx, c.assignments))
        )
        out.append(path)
    return out


def _read_assignments(path: Path, n_proposals: int):
    idx, assign = [], []
    for n, rec in io.read_jsonl(path):
        i, a = rec.get("instance_id"), rec.get("cluster")
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in (i, a)):
            raise io.SchemaError(path, n, "instance_id and cluster must be integers")
        if not 0 <= i < n_proposals:
            raise io.SchemaError(path, n, f"instance_id {i} does not name a fused proposal")
        idx.append(i)
        assign.append(a)
    return idx, assign


def stage_evaluate(cfg: RunConfig, run_dir) -> list[Path]:
    """Score both clusterings."""
    run_dir = Path(run_dir)
    gt = io.read_gt(run_dir / GT)
    proposals = io.read_boxes(run_dir / FUSED)
    out = []
    for name in SETTINGS:
        idx, assign = _read_assignments(run_dir / f"clusters_{name}.jsonl", len(proposals))
        report = evaluate_clustering(proposals, [proposals[i] for i in idx], assign, gt, cfg)
        (run_dir / f"eval_{name}.json").write_text(report.to_json() + "\n", encoding="utf-8")
        io.write_csv(run_dir / f"curve_{name}.csv", ["iou_thresh", "coverage", "purity"], report.curve_rows())
        out += [run_dir / f"eval_{name}.json", run_dir / f"curve_{name}.csv"]
    return out


REPORT_HEADER = [
    "proposals", "setting", "k", "n_proposals", "n_instances",
    "auc@0.5", "auc@0.2", "disc_cls", "corloc", "corloc_known",
    "ap", "ap50", "unknown_recall",
]


def report_rows(cfg: RunConfig, world: World, aware: ProposalSet, agnostic: ProposalSet) -> list[list]:
    """{aware-only, agnostic-only, fused} x {k_base, k_over} table."""
    sources = {
        "aware-only": fuse_single(aware, cfg.drm),
        "agnostic-only": fuse_single(agnostic, cfg.drm),
        "fused": debiased_region_mining(aware, agnostic, cfg.drm),
    }
    unknown_rects = world.gt.subset(known=False).rects()
    rows = []
    for name, proposals in sources.items():
        features = proposal_descriptors(proposals, world, cfg.world)
        d = discover(proposals, features, world.gt, cfg)
        recall = stream_recall(proposals, unknown_rects)
        for setting, k in (("k_base", cfg.k_base), ("k_over", cfg.k_over)):
            r = d.reports[setting[2:]]
            rows.append([
                name, setting, k, len(proposals), r.n_instances,
                r.auc.get(0.5, float("nan")), r.auc.get(0.2, float("nan")),
                r.discovered_classes, r.corloc, r.corloc_known,
                r.ap, r.ap50, recall,
            ])
    return rows


def stage_report(cfg: RunConfig, run_dir) -> list[Path]:
    """Compare aware-only, agnostic-only and fused proposals."""
    run_dir = Path(run_dir)
    world = _world_from_files(run_dir)
    aware, agnostic = _streams_from_files(run_dir)
    path = run_dir / "report.csv"
    io.write_csv(path, REPORT_HEADER, report_rows(cfg, world, aware, agnostic))
    return [path]


def bench_features(n: int, dim: int, n_centers: int, noise: float, seed: int) -> np.ndarray:
    """Unit-sphere mixture used for clustering timings."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_centers, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    X = means[rng.integers(0, n_centers, n)] + noise * rng.normal(size=(n, dim))
    return X


def bench_cluster(cfg: RunConfig, clock=time.perf_counter) -> list[list]:
    b = cfg.bench
    base = cluster_params(cfg)
    rows = []
    for n in b.n_values:
        X = bench_features(n, b.dim, b.n_centers, b.noise, cfg.stage_seed("bench"))
        for k in b.k_values:
            for method in b.methods:
                fn = kmeans_full if method == "full" else kmeans_minibatch
                t0 = clock()
                c = fn(X, replace(base, k=k))
                rows.append([method, n, k, clock() - t0, c.inertia, c.n_iter])
    return rows


BENCH_HEADER = ["method", "n", "k", "seconds", "inertia", "iterations"]


def stage_bench(cfg: RunConfig, run_dir) -> list[Path]:
    """Time full against mini-batch k-means."""
    run_dir = io.ensure_dir(run_dir)
    path = run_dir / "bench_cluster.csv"
    io.write_csv(path, BENCH_HEADER, bench_cluster(cfg))
    return [path]


def run_all(cfg: RunConfig, run_dir) -> list[Path]:
    """Run every stage from generate to report."""
    out = []
    for stage in (stage_generate, stage_fuse, stage_train, stage_cluster, stage_evaluate, stage_report):
        out += stage(cfg, run_dir)
    return out

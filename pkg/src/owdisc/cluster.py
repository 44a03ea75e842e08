"""K-means (Lloyd) and mini-batch K-means for novel-class grouping.

Mini-batch K-means follows four steps: seed the centers with full K-means
on a random subset, then repeatedly draw a batch, assign it to the nearest
centers and move every touched center by a per-center step ``1 / n_c``
(``n_c`` counts every point the center has absorbed so far), until the
largest center movement falls below ``tol`` or the batch budget runs out.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from owdisc import kernels


@dataclass(frozen=True)
class ClusterParams:
    """Clustering hyperparameters.

    ``max_iters`` bounds Lloyd iterations for :func:`kmeans_full` (default
    100) and the number of batches for :func:`kmeans_minibatch` (default
    1000). ``init_max_iters`` bounds
    the Lloyd iterations of the seeding run on the initial subset.
    ``init_subset_size`` defaults to ``3 * max(k, batch_size)`` when left as
    ``None``.
    """

    k: int
    batch_size: int = 256
    max_iters: Optional[int] = None
    init_subset_size: Optional[int] = None
    init_max_iters: int = 100
    tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if (self.max_iters is not None and self.max_iters < 0) or self.init_max_iters < 0:
            raise ValueError("iteration budgets must be non-negative")
        if self.init_subset_size is not None and self.init_subset_size < 1:
            raise ValueError("init_subset_size must be positive")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")


@dataclass
class Clustering:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centers.shape[0]


def _check(X, params: ClusterParams) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty instance matrix")
    if params.k > X.shape[0]:
        raise ValueError(f"k={params.k} exceeds the number of instances {X.shape[0]}")
    return X


def _exact_inertia(X, centers, labels) -> float:
    diff = X - centers[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy D^2-weighted seeding.

    Every step draws ``2 + floor(ln k)`` candidates proportionally to the
    squared distance to the nearest chosen center and keeps the candidate that
    lowers the total potential most. Once every point coincides with a chosen
    center, remaining centers are drawn uniformly from unchosen points.
    """
    n = X.shape[0]
    trials = 2 + int(np.log(k))
    xx = np.einsum("ij,ij->i", X, X)

    def sqdist(rows):
        d = xx[:, None] - 2.0 * (X @ X[rows].T) + xx[rows][None, :]
        return np.maximum(d, 0.0)

    first = int(rng.integers(n))
    idx = [first]
    d2 = sqdist([first])[:, 0]
    d2[first] = 0.0
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            cand = np.searchsorted(np.cumsum(d2), rng.random(trials) * total, side="right")
            cand = np.minimum(cand, n - 1)
            D = np.minimum(d2[:, None], sqdist(cand))
            D[cand, np.arange(cand.size)] = 0.0
            best = int(np.argmin(D.sum(axis=0)))
            j = int(cand[best])
            d2 = D[:, best]
        else:
            taken = np.zeros(n, dtype=bool)
            taken[idx] = True
            j = int(rng.choice(np.flatnonzero(~taken)))
        idx.append(j)
    return X[idx].copy()


def _lloyd(X, centers, max_iters, tol):
    history = []
    labels, dist = kernels.assign_nearest(X, centers)
    it = 0
    for it in range(1, max_iters + 1):
        history.append(_exact_inertia(X, centers, labels))
        sums, counts = kernels.accumulate(X, labels, centers.shape[0])
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            # farthest points from their current centers, one per dead center
            far = np.argsort(-dist, kind="stable")[: empty.size]
            new[empty] = X[far]
        shift = float(np.sqrt(np.max(np.einsum("ij,ij->i", new - centers, new - centers))))
        centers = new
        labels, dist = kernels.assign_nearest(X, centers)
        if shift < tol and empty.size == 0:
            break
    return centers, labels, it, history


def kmeans_full(X, params: ClusterParams) -> Clustering:
    """Lloyd iterations from k-means++ seeding.

    Stops once no center moves more than ``tol`` or after ``max_iters``
    iterations; the returned assignments are nearest-center for the returned
    centers.
    """
    X = _check(X, params)
    rng = np.random.default_rng(params.seed)
    centers = kmeans_plusplus(X, params.k, rng)
    max_iters = 100 if params.max_iters is None else params.max_iters
    centers, labels, it, history = _lloyd(X, centers, max_iters, params.tol)
    inertia = _exact_inertia(X, centers, labels)
    return Clustering(centers, labels, inertia, it, history + [inertia])


def kmeans_minibatch(X, params: ClusterParams) -> Clustering:
    X = _check(X, params)
    n = X.shape[0]
    init_ss, loop_ss = np.random.SeedSequence(params.seed).spawn(2)
    rng = np.random.default_rng(loop_ss)

    subset_size = params.init_subset_size or 3 * max(params.k, params.batch_size)
    subset_size = min(max(subset_size, params.k), n)
    init_rng = np.random.default_rng(init_ss)
    subset = np.sort(init_rng.choice(n, size=subset_size, replace=False))
    seed_params = replace(
        params, max_iters=params.init_max_iters, seed=int(init_rng.integers(2**63))
    )
    init = kmeans_full(X[subset], seed_params)
    centers = np.ascontiguousarray(init.centers)
    # the seeding run already absorbed the subset points
    counts = np.bincount(init.assignments, minlength=params.k).astype(np.int64)

    it = 0
    batch_size = min(params.batch_size, n)
    max_iters = 1000 if params.max_iters is None else params.max_iters
    for it in range(1, max_iters + 1):
        batch_idx = rng.choice(n, size=batch_size, replace=False)
        batch = X[batch_idx]
        labels, _ = kernels.assign_nearest(batch, centers)
        touched = np.unique(labels)
        before = centers[touched].copy()
        kernels.minibatch_update(centers, counts, batch, labels)
        moved = centers[touched] - before
        shift = float(np.sqrt(np.max(np.einsum("ij,ij->i", moved, moved))))
        if shift < params.tol:
            break

    labels, _ = kernels.assign_nearest(X, centers)
    return Clustering(centers, labels, _exact_inertia(X, centers, labels), it)


def overcluster_pair(X, k_base: int, k_over: int, params: ClusterParams, method: str = "minibatch"):
    """Cluster the same instances at a base and an over-clustered ``k``.

    The two runs draw from independent child seeds of ``params.seed``.
    """
    if k_base >= k_over:
        raise ValueError(f"k_base={k_base} must be smaller than k_over={k_over}")
    fn = {"minibatch": kmeans_minibatch, "full": kmeans_full}[method]
    base_ss, over_ss = np.random.SeedSequence(params.seed).spawn(2)
    seed_of = lambda ss: int(ss.generate_state(1, dtype=np.uint64)[0])
    base = fn(X, replace(params, k=k_base, seed=seed_of(base_ss)))
    over = fn(X, replace(params, k=k_over, seed=seed_of(over_ss)))
    return base, over

"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``OWDISC_PURE_PYTHON=1`` is set. Signatures and results match the compiled
versions up to floating-point rounding.
"""

import numpy as np
import scipy.sparse as sp

_CHUNK = 512


def assign_nearest(X, C):
    """Nearest-center index and squared distance for every row of ``X``.

    Ties go to the smallest center index.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    n = X.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    cc = np.einsum("ij,ij->i", C, C)
    for start in range(0, n, _CHUNK):
        Xc = X[start:start + _CHUNK]
        D = cc - 2.0 * (Xc @ C.T)
        idx = np.argmin(D, axis=1)
        xx = np.einsum("ij,ij->i", Xc, Xc)
        labels[start:start + len(Xc)] = idx
        dist[start:start + len(Xc)] = np.maximum(D[np.arange(len(Xc)), idx] + xx, 0.0)
    return labels, dist


def accumulate(X, labels, k):
    """Per-cluster coordinate sums and member counts."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = X.shape[0]
    M = sp.csr_matrix((np.ones(n), (labels, np.arange(n))), shape=(k, n))
    sums = np.asarray(M @ X)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    return sums, counts


def minibatch_update(centers, counts, batch, labels):
    """Apply per-center running-mean updates for one assigned batch in place.

    Equivalent to streaming ``c += (x - c) / n_c`` over the batch: each
    touched center becomes the count-weighted mean of its old value and the
    new members.
    """
    k = centers.shape[0]
    sums, m = accumulate(batch, labels, k)
    touched = m > 0
    n0 = counts[touched].astype(np.float64)
    n1 = n0 + m[touched]
    centers[touched] = (centers[touched] * n0[:, None] + sums[touched]) / n1[:, None]
    counts += m


def nms_keep(boxes, groups, thresh):
    """Greedy suppression over boxes already sorted by priority.

    A box is dropped when it overlaps an earlier kept box of the same group
    with IoU strictly above ``thresh``.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    groups = np.asarray(groups, dtype=np.int64)
    n = boxes.shape[0]
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return keep
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    alive = np.ones(n, dtype=bool)
    for i in range(n):
        if not alive[i]:
            continue
        keep[i] = True
        rest = np.nonzero(alive[i + 1:])[0] + i + 1
        if rest.size == 0:
            break
        rest = rest[groups[rest] == groups[i]]
        w = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        h = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = w * h
        ovr = inter / (areas[i] + areas[rest] - inter)
        alive[rest[ovr > thresh]] = False
    return keep

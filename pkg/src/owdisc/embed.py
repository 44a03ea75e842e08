"""Semi-supervised instance-level contrastive embedding.

A two-layer perceptron (tanh hidden layer, L2-normalized output) maps patch
descriptors to unit embeddings. Training batches hold two augmented views of
every patch, laid out as ``[view_1 of patches 0..N-1; view_2 of patches
0..N-1]`` so that the partner of row ``i`` is row ``(i + N) mod 2N``.

The objective mixes an instance-discrimination loss over every row with a
supervised loss over labeled rows, where all same-label rows in the batch
count as positives. Both share the same denominator: a softmax over every
other row of the batch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from typing import Hashable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp


class DegenerateBatchWarning(UserWarning):
    """A loss term with no negatives or no positives contributed zero."""


@dataclass(frozen=True)
class ContrastiveParams:
    tau: float = 0.2
    lam: float = 0.5
    d_in: int = 64
    d_hidden: int = 64
    d_out: int = 32
    learning_rate: float = 1.0
    epochs: int = 20
    batch_size: int = 64
    augment_noise_sigma: float = 0.05
    augment_dropout_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        for name in ("d_in", "d_hidden", "d_out", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.augment_noise_sigma < 0:
            raise ValueError("augment_noise_sigma must be >= 0")
        if not 0.0 <= self.augment_dropout_p < 1.0:
            raise ValueError("augment_dropout_p must be in [0, 1)")


@dataclass
class Embedder:
    """Weights of ``x -> normalize(tanh(x W1 + b1) W2 + b2)``.

    Gradients are returned as ``Embedder`` instances too.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, vec: np.ndarray, d_in: int, d_hidden: int, d_out: int) -> "Embedder":
        shapes = [(d_in, d_hidden), (d_hidden,), (d_hidden, d_out), (d_out,)]
        sizes = [int(np.prod(s)) for s in shapes]
        if vec.size != sum(sizes):
            raise ValueError(f"expected {sum(sizes)} parameters, got {vec.size}")
        parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum(sizes)[:-1])
        return cls(*[p.reshape(s).copy() for p, s in zip(parts, shapes)])

    def copy(self) -> "Embedder":
        return Embedder(*[a.copy() for a in self.arrays()])


def init_embedder(d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator) -> Embedder:
    """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` per layer."""
    a1 = 1.0 / np.sqrt(d_in)
    a2 = 1.0 / np.sqrt(d_hidden)
    return Embedder(
        W1=rng.uniform(-a1, a1, (d_in, d_hidden)),
        b1=rng.uniform(-a1, a1, d_hidden),
        W2=rng.uniform(-a2, a2, (d_hidden, d_out)),
        b2=rng.uniform(-a2, a2, d_out),
    )


def _forward(e: Embedder, X: np.ndarray):
    H = np.tanh(X @ e.W1 + e.b1)
    A = H @ e.W2 + e.b2
    norm = np.linalg.norm(A, axis=1, keepdims=True)
    Z = np.empty_like(A)
    ok = norm[:, 0] > 0
    Z[ok] = A[ok] / norm[ok]
    # an exactly-zero pre-activation has no direction; pin it to the first axis
    Z[~ok] = 0.0
    Z[~ok, 0] = 1.0
    return Z, (X, H, norm)


def embed_batch(e: Embedder, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != e.W1.shape[0]:
        raise ValueError(f"descriptor dimension {X.shape[1]} != embedder d_in {e.W1.shape[0]}")
    return _forward(e, X)[0]


def embed(e: Embedder, x) -> np.ndarray:
    """Unit-norm embedding of one descriptor vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("embed expects a single descriptor vector")
    return embed_batch(e, x[None, :])[0]


def augment(x, params: ContrastiveParams, rng: np.random.Generator) -> np.ndarray:
    """Gaussian jitter then independent coordinate dropout (no rescaling)."""
    x = np.asarray(x, dtype=np.float64)
    out = x + params.augment_noise_sigma * rng.standard_normal(x.shape)
    if params.augment_dropout_p > 0:
        out = out * (rng.random(x.shape) >= params.augment_dropout_p)
    return out


def _partner(i: int, m: int) -> int:
    if m % 2:
        raise ValueError("a two-view batch must have an even number of rows")
    return (i + m // 2) % m


def _log_denominator(Z: np.ndarray, i: int, tau: float) -> float:
    s = Z @ Z[i] / tau
    return float(logsumexp(np.delete(s, i)))


def unsup_loss(i: int, Z: np.ndarray, tau: float) -> float:
    """Instance-discrimination loss of anchor ``i`` against its other view."""
    Z = np.asarray(Z, dtype=np.float64)
    m = Z.shape[0]
    j = _partner(i, m)
    if m == 2:
        warnings.warn("single-pair batch has no negatives", DegenerateBatchWarning, stacklevel=2)
        return 0.0
    return _log_denominator(Z, i, tau) - float(Z[i] @ Z[j]) / tau


def _label_codes(labels: Sequence[Optional[Hashable]]) -> np.ndarray:
    codes = {}
    out = np.full(len(labels), -1, dtype=np.int64)
    for idx, lab in enumerate(labels):
        if lab is not None:
            out[idx] = codes.setdefault(lab, len(codes))
    return out


def sup_loss(i: int, Z: np.ndarray, labels: Sequence[Optional[Hashable]], tau: float) -> float:
    """Supervised loss of labeled anchor ``i``: mean over same-label rows."""
    Z = np.asarray(Z, dtype=np.float64)
    codes = _label_codes(labels)
    if codes[i] < 0:
        raise ValueError(f"row {i} is unlabeled")
    pos = np.nonzero(codes == codes[i])[0]
    pos = pos[pos != i]
    if pos.size == 0:
        warnings.warn(f"labeled row {i} has no positive in batch", DegenerateBatchWarning, stacklevel=2)
        return 0.0
    lse = _log_denominator(Z, i, tau)
    return float(np.mean(lse - Z[pos] @ Z[i] / tau))


def _loss_and_dZ(Z: np.ndarray, codes: np.ndarray, tau: float, lam: float, need_grad: bool = True):
    m = Z.shape[0]
    half = m // 2
    if m % 2:
        raise ValueError("a two-view batch must have an even number of rows")
    S = (Z @ Z.T) / tau
    np.fill_diagonal(S, -np.inf)
    lse = logsumexp(S, axis=1)
    partner = (np.arange(m) + half) % m
    rows = np.arange(m)

    same = (codes[:, None] == codes[None, :]) & (codes[:, None] >= 0)
    np.fill_diagonal(same, False)
    npos = same.sum(axis=1)
    sup_rows = npos > 0

    unsup = lse - S[rows, partner]
    if m == 2:
        unsup = np.zeros(m)
    Sfin = np.where(np.isfinite(S), S, 0.0)
    sup = np.zeros(m)
    sup[sup_rows] = lse[sup_rows] - (same[sup_rows] * Sfin[sup_rows]).sum(axis=1) / npos[sup_rows]
    loss = (1.0 - lam) * float(np.sum(unsup)) + lam * float(np.sum(sup))
    if not need_grad:
        return loss, None

    P = np.exp(S - lse[:, None])
    w = (1.0 - lam) * (m > 2) + lam * sup_rows
    G = w[:, None] * P
    if m > 2:
        G[rows, partner] -= 1.0 - lam
    G[sup_rows] -= lam * same[sup_rows] / npos[sup_rows, None]
    dZ = (G + G.T) @ Z / tau
    return loss, dZ


def total_loss(Z: np.ndarray, labels: Sequence[Optional[Hashable]], params: ContrastiveParams) -> float:
    """``(1 - lam) * sum_i unsup_i + lam * sum_{labeled i} sup_i`` over the batch."""
    Z = np.asarray(Z, dtype=np.float64)
    return _loss_and_dZ(Z, _label_codes(labels), params.tau, params.lam, need_grad=False)[0]


def _backward(e: Embedder, cache, Z: np.ndarray, dZ: np.ndarray) -> Embedder:
    X, H, norm = cache
    safe = np.where(norm > 0, norm, 1.0)
    dA = (dZ - Z * np.sum(Z * dZ, axis=1, keepdims=True)) / safe
    dA[norm[:, 0] == 0] = 0.0
    dH = dA @ e.W2.T
    dP = dH * (1.0 - H * H)
    return Embedder(W1=X.T @ dP, b1=dP.sum(axis=0), W2=H.T @ dA, b2=dA.sum(axis=0))


def loss_and_gradient(e: Embedder, X_views, labels, params: ContrastiveParams) -> tuple[float, Embedder]:
    X_views = np.asarray(X_views, dtype=np.float64)
    Z, cache = _forward(e, X_views)
    loss, dZ = _loss_and_dZ(Z, _label_codes(labels), params.tau, params.lam)
    return loss, _backward(e, cache, Z, dZ)


def loss_gradient(e: Embedder, X_views, labels, params: ContrastiveParams) -> Embedder:
    """Analytic gradient of :func:`total_loss` with respect to every weight.

    ``X_views`` holds the descriptors of both views in the two-view layout;
    ``labels`` has one entry per row (``None`` for unlabeled rows).
    """
    return loss_and_gradient(e, X_views, labels, params)[1]


@dataclass
class TrainResult:
    embedder: Embedder
    initial: Embedder
    loss_trace: list[float]


def train_embedder(X, labels: Sequence[Optional[Hashable]], params: ContrastiveParams) -> TrainResult:
    """Mini-batch gradient descent on the two-view contrastive objective.

    Labeled and unlabeled descriptors are pooled and shuffled every epoch,
    so batches mix the two in proportion to their sizes. Each step moves the
    weights by ``learning_rate`` times the gradient averaged over the batch
    rows. The trace records the mean batch loss of every epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty dataset")
    if X.shape[0] < 2:
        raise ValueError("at least two descriptors are needed to form a batch")
    if X.shape[1] != params.d_in:
        raise ValueError(f"descriptor dimension {X.shape[1]} != d_in {params.d_in}")
    if len(labels) != X.shape[0]:
        raise ValueError("labels must align with descriptors")
    labels = list(labels)

    init_ss, loop_ss = np.random.SeedSequence(params.seed).spawn(2)
    e = init_embedder(params.d_in, params.d_hidden, params.d_out, np.random.default_rng(init_ss))
    initial = e.copy()
    rng = np.random.default_rng(loop_ss)
    n = X.shape[0]
    trace: list[float] = []
    for _ in range(params.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, params.batch_size):
            idx = perm[start:start + params.batch_size]
            if idx.size < 2:
                continue
            xb = X[idx]
            views = np.vstack([augment(xb, params, rng), augment(xb, params, rng)])
            lb = [labels[i] for i in idx]
            loss, grad = loss_and_gradient(e, views, lb + lb, params)
            step = params.learning_rate / views.shape[0]
            for p, g in zip(e.arrays(), grad.arrays()):
                p -= step * g
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return TrainResult(embedder=e, initial=initial, loss_trace=trace)

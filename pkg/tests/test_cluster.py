import itertools

import numpy as np
import pytest

from owdisc import _pykernels, cluster
from owdisc.cluster import ClusterParams, kmeans_full, kmeans_minibatch, kmeans_plusplus, overcluster_pair


def blobs(rng, n_per, centers, sigma):
    centers = np.asarray(centers, dtype=np.float64)
    X = np.vstack([c + sigma * rng.normal(size=(n_per, centers.shape[1])) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per)
    return X, y


def same_partition(a, b):
    """True when two labelings induce the same partition (up to relabeling)."""
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


@pytest.fixture(params=["compiled", "python"])
def backend(request, monkeypatch):
    if request.param == "python":
        for name in ("assign_nearest", "accumulate", "minibatch_update"):
            monkeypatch.setattr(cluster.kernels, name, getattr(_pykernels, name))
    return request.param


class TestParams:
    @pytest.mark.parametrize("kw", [dict(k=0), dict(k=2, batch_size=0), dict(k=2, tol=-1.0), dict(k=2, max_iters=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ClusterParams(**kw)

    def test_k_exceeds(self):
        with pytest.raises(ValueError):
            kmeans_full(np.zeros((3, 2)), ClusterParams(k=4))
        with pytest.raises(ValueError):
            kmeans_minibatch(np.zeros((3, 2)), ClusterParams(k=4))

    def test_empty(self):
        with pytest.raises(ValueError):
            kmeans_full(np.zeros((0, 2)), ClusterParams(k=1))


class TestFull:
    def test_k1_is_mean(self, backend):
        X = np.random.default_rng(0).normal(size=(500, 6)) * 3 + 1
        c = kmeans_full(X, ClusterParams(k=1))
        np.testing.assert_allclose(c.centers[0], X.mean(axis=0), atol=1e-9)
        expected = ((X - X.mean(axis=0)) ** 2).sum()
        assert c.inertia == pytest.approx(expected, rel=1e-12)
        assert np.all(c.assignments == 0)

    def test_k_equals_n(self, backend):
        X = np.random.default_rng(1).normal(size=(40, 3))
        c = kmeans_full(X, ClusterParams(k=40))
        assert c.inertia == pytest.approx(0.0, abs=1e-20)
        assert len(set(c.assignments.tolist())) == 40

    def test_separated_blobs(self, backend):
        rng = np.random.default_rng(2)
        X, y = blobs(rng, 100, [[0, 0, 0], [10, 0, 0]], 1.0)
        for seed in range(5):
            c = kmeans_full(X, ClusterParams(k=2, seed=seed))
            assert same_partition(c.assignments, y)

    def test_inertia_non_increasing(self, backend):
        X = np.random.default_rng(3).normal(size=(600, 4))
        c = kmeans_full(X, ClusterParams(k=12, tol=0.0, max_iters=50))
        h = np.array(c.inertia_history)
        assert np.all(np.diff(h) <= 1e-9 * h[0])

    def test_final_assignment_is_nearest(self, backend):
        X = np.random.default_rng(4).normal(size=(300, 5))
        c = kmeans_full(X, ClusterParams(k=9, max_iters=5))
        D = ((X[:, None, :] - c.centers[None]) ** 2).sum(-1)
        np.testing.assert_allclose(D[np.arange(300), c.assignments], D.min(axis=1), rtol=1e-12, atol=1e-12)
        assert c.inertia == pytest.approx(D.min(axis=1).sum(), rel=1e-12)

    def test_deterministic(self, backend):
        X = np.random.default_rng(5).normal(size=(400, 3))
        a = kmeans_full(X, ClusterParams(k=7, seed=9))
        b = kmeans_full(X, ClusterParams(k=7, seed=9))
        assert np.array_equal(a.centers, b.centers) and np.array_equal(a.assignments, b.assignments)

    def test_empty_cluster_reseeded(self):
        # duplicated points force k-means++ into the uniform fallback and Lloyd into empty clusters
        X = np.vstack([np.zeros((5, 2)), np.ones((5, 2))])
        c = kmeans_full(X, ClusterParams(k=4, seed=0))
        assert c.inertia == pytest.approx(0.0)
        assert c.assignments.max() < 4

    def test_plusplus_distinct(self):
        X = np.random.default_rng(6).normal(size=(30, 2))
        C = kmeans_plusplus(X, 30, np.random.default_rng(0))
        assert len({tuple(r) for r in C}) == 30


class TestMinibatch:
    def test_zero_iters_is_init(self, backend):
        X = np.random.default_rng(0).normal(size=(500, 4))
        p = ClusterParams(k=5, max_iters=0, init_subset_size=100, seed=3)
        c = kmeans_minibatch(X, p)
        init_ss, _ = np.random.SeedSequence(3).spawn(2)
        rng = np.random.default_rng(init_ss)
        subset = np.sort(rng.choice(500, size=100, replace=False))
        init = kmeans_full(X[subset], ClusterParams(k=5, max_iters=100, seed=int(rng.integers(2**63))))
        assert np.array_equal(c.centers, init.centers)
        D = ((X[:, None, :] - c.centers[None]) ** 2).sum(-1)
        assert np.array_equal(c.assignments, D.argmin(axis=1))
        assert c.n_iter == 0

    def test_full_batch_matches_full(self, backend):
        rng = np.random.default_rng(1)
        X, y = blobs(rng, 80, [[0, 0], [12, 0], [0, 12]], 1.0)
        full = kmeans_full(X, ClusterParams(k=3))
        mb = kmeans_minibatch(X, ClusterParams(k=3, batch_size=len(X), max_iters=500))
        assert same_partition(full.assignments, mb.assignments)
        assert same_partition(mb.assignments, y)

    def test_inertia_close_to_full(self, backend):
        rng = np.random.default_rng(2)
        # grid corners: every pair of blob centers is at least 12 sigma apart
        centers = 12.0 * np.array(list(itertools.product([0, 1], repeat=3)), dtype=float)
        X, _ = blobs(rng, 250, centers, 1.0)
        full = kmeans_full(X, ClusterParams(k=8))
        mb = kmeans_minibatch(X, ClusterParams(k=8, batch_size=64, max_iters=300))
        assert mb.inertia <= 1.1 * full.inertia

    def test_deterministic(self, backend):
        X = np.random.default_rng(3).normal(size=(1000, 4))
        p = ClusterParams(k=10, batch_size=50, max_iters=40, seed=11)
        a, b = kmeans_minibatch(X, p), kmeans_minibatch(X, p)
        assert np.array_equal(a.centers, b.centers) and np.array_equal(a.assignments, b.assignments)

    def test_backends_agree(self, monkeypatch):
        X = np.random.default_rng(4).normal(size=(800, 6))
        p = ClusterParams(k=6, batch_size=40, max_iters=30, seed=2)
        compiled = kmeans_minibatch(X, p)
        for name in ("assign_nearest", "accumulate", "minibatch_update"):
            monkeypatch.setattr(cluster.kernels, name, getattr(_pykernels, name))
        python = kmeans_minibatch(X, p)
        np.testing.assert_allclose(compiled.centers, python.centers, atol=1e-10)
        assert np.array_equal(compiled.assignments, python.assignments)

    def test_sequential_update_rule(self):
        centers = np.array([[0.0, 0.0], [10.0, 10.0]])
        counts = np.array([1, 3], dtype=np.int64)
        batch = np.array([[2.0, 0.0], [4.0, 0.0], [10.0, 14.0]])
        labels = np.array([0, 0, 1])
        from owdisc import kernels

        kernels.minibatch_update(centers, counts, batch, labels)
        # c0: 0 -> 0 + (2-0)/2 = 1 -> 1 + (4-1)/3 = 2 ; c1: 10 + (14-10)/4 = 11
        np.testing.assert_allclose(centers, [[2.0, 0.0], [10.0, 11.0]], atol=1e-15)
        assert counts.tolist() == [3, 4]


class TestOvercluster:
    def test_ordering(self):
        with pytest.raises(ValueError):
            overcluster_pair(np.zeros((10, 2)), 5, 5, ClusterParams(k=1))

    def test_fine_at_n(self):
        X = np.random.default_rng(0).normal(size=(60, 3))
        base, over = overcluster_pair(X, 3, 60, ClusterParams(k=1), method="full")
        assert base.k == 3 and over.k == 60
        assert over.inertia == pytest.approx(0.0, abs=1e-20)

    def test_deterministic(self):
        X = np.random.default_rng(1).normal(size=(300, 3))
        a = overcluster_pair(X, 4, 20, ClusterParams(k=1, seed=5))
        b = overcluster_pair(X, 4, 20, ClusterParams(k=1, seed=5))
        for x, y in zip(a, b):
            assert np.array_equal(x.assignments, y.assignments)

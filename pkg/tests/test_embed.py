import math

import numpy as np
import pytest

from owdisc.embed import (
    ContrastiveParams,
    DegenerateBatchWarning,
    Embedder,
    augment,
    embed,
    embed_batch,
    init_embedder,
    loss_and_gradient,
    loss_gradient,
    sup_loss,
    total_loss,
    train_embedder,
    unsup_loss,
)


def brute_unsup(i, Z, tau):
    m = len(Z)
    j = (i + m // 2) % m
    dot = lambda a, b: sum(x * y for x, y in zip(a, b))
    den = sum(math.exp(dot(Z[i], Z[n]) / tau) for n in range(m) if n != i)
    return -math.log(math.exp(dot(Z[i], Z[j]) / tau) / den)


def brute_sup(i, Z, labels, tau):
    m = len(Z)
    dot = lambda a, b: sum(x * y for x, y in zip(a, b))
    den = sum(math.exp(dot(Z[i], Z[n]) / tau) for n in range(m) if n != i)
    pos = [q for q in range(m) if q != i and labels[q] is not None and labels[q] == labels[i]]
    return -sum(math.log(math.exp(dot(Z[i], Z[q]) / tau) / den) for q in pos) / len(pos)


def brute_total(Z, labels, tau, lam):
    u = sum(brute_unsup(i, Z, tau) for i in range(len(Z)))
    s = sum(brute_sup(i, Z, labels, tau) for i in range(len(Z)) if labels[i] is not None)
    return (1 - lam) * u + lam * s


def unit_rows(rng, m, d):
    Z = rng.normal(size=(m, d))
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


def straight_line_forward(e, x):
    h = [math.tanh(sum(x[a] * e.W1[a, b] for a in range(len(x))) + e.b1[b]) for b in range(e.W1.shape[1])]
    o = [sum(h[b] * e.W2[b, c] for b in range(len(h))) + e.b2[c] for c in range(e.W2.shape[1])]
    nrm = math.sqrt(sum(v * v for v in o))
    return [v / nrm for v in o]


def fd_gradient(e, views, labels, params, h=1e-5):
    base = e.flat()
    dims = e.dims
    g = np.empty_like(base)
    for k in range(base.size):
        v = base.copy()
        v[k] += h
        lp = total_loss(embed_batch(Embedder.from_flat(v, *dims), views), labels, params)
        v[k] -= 2 * h
        lm = total_loss(embed_batch(Embedder.from_flat(v, *dims), views), labels, params)
        g[k] = (lp - lm) / (2 * h)
    return g


def max_rel_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12))


class TestParams:
    @pytest.mark.parametrize(
        "kw",
        [dict(augment_dropout_p=1.0), dict(tau=0.0), dict(lam=1.5), dict(d_out=0), dict(augment_noise_sigma=-1)],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ContrastiveParams(**kw)


class TestAugment:
    def test_identity(self):
        p = ContrastiveParams(augment_noise_sigma=0.0, augment_dropout_p=0.0)
        x = np.arange(6.0)
        assert np.array_equal(augment(x, p, np.random.default_rng(0)), x)

    def test_replay(self):
        p = ContrastiveParams()
        x = np.linspace(-1, 1, 16)
        a = augment(x, p, np.random.default_rng(123))
        b = augment(x, p, np.random.default_rng(123))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, x)

    def test_dropout_rate(self):
        p = ContrastiveParams(augment_noise_sigma=0.0, augment_dropout_p=0.3)
        out = augment(np.ones(100_000), p, np.random.default_rng(1))
        assert abs(np.mean(out == 0) - 0.3) < 0.01


class TestEmbed:
    def setup_method(self):
        self.e = init_embedder(7, 5, 4, np.random.default_rng(0))

    def test_unit_norm(self):
        X = np.random.default_rng(1).normal(scale=10, size=(200, 7))
        Z = embed_batch(self.e, X)
        np.testing.assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-12)

    def test_bias_only(self):
        e = Embedder(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 3)), np.array([3.0, 0.0, 4.0]))
        np.testing.assert_allclose(embed(e, [1.0, -2.0, 5.0]), [0.6, 0.0, 0.8], atol=1e-15)

    def test_matches_straight_line(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.normal(size=7)
            np.testing.assert_allclose(embed(self.e, x), straight_line_forward(self.e, x), atol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            embed(self.e, np.zeros(6))

    def test_flat_roundtrip(self):
        e2 = Embedder.from_flat(self.e.flat(), *self.e.dims)
        assert all(np.array_equal(a, b) for a, b in zip(self.e.arrays(), e2.arrays()))

    def test_init_range(self):
        e = init_embedder(16, 9, 3, np.random.default_rng(5))
        assert np.abs(e.W1).max() <= 0.25 and np.abs(e.W2).max() <= 1 / 3


class TestLosses:
    def test_identical_embeddings(self):
        for n in (2, 3, 8):
            Z = np.tile([[0.6, 0.8]], (2 * n, 1))
            for i in range(2 * n):
                assert unsup_loss(i, Z, 0.5) == pytest.approx(math.log(2 * n - 1), abs=1e-12)
            labels = ["a"] * (2 * n)
            assert sup_loss(0, Z, labels, 0.5) == pytest.approx(math.log(2 * n - 1), abs=1e-12)

    def test_hand_built_n2(self):
        Z = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [-0.8, 0.6]])
        for i in range(4):
            assert unsup_loss(i, Z, 1.0) == pytest.approx(brute_unsup(i, Z, 1.0), abs=1e-14)
        # anchor 0: positive 2 (0.6), negatives 1 (0.0) and 3 (-0.8)
        expected = -math.log(math.exp(0.6) / (math.exp(0.0) + math.exp(0.6) + math.exp(-0.8)))
        assert unsup_loss(0, Z, 1.0) == pytest.approx(expected, abs=1e-14)

    def test_large_tau_limit(self):
        Z = unit_rows(np.random.default_rng(3), 10, 6)
        for i in range(10):
            assert abs(unsup_loss(i, Z, 1e6) - math.log(9)) < 1e-3

    def test_positive(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            Z = unit_rows(rng, 6, 3)
            assert all(unsup_loss(i, Z, 0.3) > 0 for i in range(6))

    def test_single_pair_degenerate(self):
        Z = unit_rows(np.random.default_rng(0), 2, 3)
        with pytest.warns(DegenerateBatchWarning):
            assert unsup_loss(0, Z, 0.5) == 0.0

    def test_sup_without_positive(self):
        Z = unit_rows(np.random.default_rng(0), 4, 3)
        with pytest.warns(DegenerateBatchWarning):
            assert sup_loss(0, Z, ["a", None, "b", None], 0.5) == 0.0

    def test_sup_collapses_to_unsup(self):
        Z = unit_rows(np.random.default_rng(5), 6, 4)
        labels = ["a", "b", "c", "a", "b", "c"]
        for i in range(6):
            assert sup_loss(i, Z, labels, 0.4) == pytest.approx(unsup_loss(i, Z, 0.4), abs=1e-13)

    def test_sup_brute_two_classes(self):
        rng = np.random.default_rng(6)
        Z = unit_rows(rng, 8, 3)
        labels = [0, 1, 0, None, 0, 1, 0, None]
        for i in (0, 1, 2, 4, 5, 6):
            assert sup_loss(i, Z, labels, 0.7) == pytest.approx(brute_sup(i, Z, labels, 0.7), abs=1e-13)

    def test_total_endpoints_and_mix(self):
        rng = np.random.default_rng(7)
        Z = unit_rows(rng, 8, 5)
        labels = ["x", None, "y", "x", "x", None, "y", "x"]
        u = sum(unsup_loss(i, Z, 0.3) for i in range(8))
        s = sum(sup_loss(i, Z, labels, 0.3) for i in range(8) if labels[i] is not None)
        p = lambda lam: ContrastiveParams(tau=0.3, lam=lam)
        assert total_loss(Z, labels, p(0.0)) == pytest.approx(u, abs=1e-12)
        assert total_loss(Z, labels, p(1.0)) == pytest.approx(s, abs=1e-12)
        assert total_loss(Z, labels, p(0.5)) == pytest.approx(0.5 * u + 0.5 * s, abs=1e-12)
        assert total_loss(Z, labels, p(0.5)) == pytest.approx(brute_total(Z, labels, 0.3, 0.5), abs=1e-12)
        assert total_loss(Z, [None] * 8, p(1.0)) == 0.0

    def test_affine_in_lambda(self):
        rng = np.random.default_rng(8)
        Z = unit_rows(rng, 10, 4)
        labels = [0, 1, None, 0, None] * 2
        vals = [total_loss(Z, labels, ContrastiveParams(lam=l)) for l in (0.0, 0.25, 0.5, 1.0)]
        a, b = vals[0], vals[3]
        assert vals[1] == pytest.approx(a + 0.25 * (b - a), abs=1e-12)
        assert vals[2] == pytest.approx(a + 0.5 * (b - a), abs=1e-12)

    def test_small_tau_stable(self):
        Z = unit_rows(np.random.default_rng(9), 6, 3)
        v = total_loss(Z, [None] * 6, ContrastiveParams(tau=1e-4))
        assert np.isfinite(v)


def random_batch(rng, n_patches=4, d_in=5, n_classes=2):
    X = rng.normal(size=(n_patches, d_in))
    views = np.vstack([X + 0.1 * rng.normal(size=X.shape), X + 0.1 * rng.normal(size=X.shape)])
    labs = [int(rng.integers(n_classes)) if rng.random() < 0.6 else None for _ in range(n_patches)]
    return views, labs + labs


class TestGradient:
    def test_zero_when_nothing_to_learn(self):
        rng = np.random.default_rng(0)
        e = init_embedder(5, 4, 3, rng)
        views, _ = random_batch(rng)
        g = loss_gradient(e, views, [None] * 8, ContrastiveParams(lam=1.0))
        assert all(np.all(a == 0) for a in g.arrays())

    def test_finite_differences(self):
        rng = np.random.default_rng(1)
        for lam in (0.0, 0.5, 1.0):
            params = ContrastiveParams(tau=0.5, lam=lam)
            e = init_embedder(5, 4, 3, rng)
            views, labels = random_batch(rng)
            g = loss_gradient(e, views, labels, params).flat()
            assert max_rel_error(g, fd_gradient(e, views, labels, params)) <= 1e-5

    def test_duplicated_batch_sums(self):
        rng = np.random.default_rng(2)
        e = init_embedder(5, 4, 3, rng)
        views, labels = random_batch(rng)
        params = ContrastiveParams()
        g = loss_gradient(e, views, labels, params).flat()
        twice = sum(loss_gradient(e, v, l, params).flat() for v, l in [(views, labels), (views, labels)])
        assert np.array_equal(twice, 2 * g)

    def test_affine_in_lambda(self):
        rng = np.random.default_rng(3)
        e = init_embedder(5, 4, 3, rng)
        views, labels = random_batch(rng)
        g = {lam: loss_gradient(e, views, labels, ContrastiveParams(lam=lam)).flat() for lam in (0, 0.5, 1)}
        np.testing.assert_allclose(g[0.5], 0.5 * g[0] + 0.5 * g[1], atol=1e-12)

    def test_loss_matches(self):
        rng = np.random.default_rng(4)
        e = init_embedder(5, 4, 3, rng)
        views, labels = random_batch(rng)
        params = ContrastiveParams()
        loss, _ = loss_and_gradient(e, views, labels, params)
        assert loss == total_loss(embed_batch(e, views), labels, params)


def three_class_data(rng, n_per, d=16, sep=1.0, noise=0.35):
    means = rng.normal(size=(3, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    X = np.vstack([sep * means[c] + noise * rng.normal(size=(n_per, d)) for c in range(3)])
    y = np.repeat(np.arange(3), n_per)
    return X, y


def cosine_gap(Z, y):
    S = Z @ Z.T
    same = y[:, None] == y[None, :]
    off = ~np.eye(len(y), dtype=bool)
    return S[same & off].mean() - S[~same].mean()


class TestTraining:
    def test_zero_epochs(self):
        X = np.random.default_rng(0).normal(size=(10, 4))
        p = ContrastiveParams(d_in=4, d_hidden=3, d_out=2, epochs=0)
        res = train_embedder(X, [None] * 10, p)
        assert res.loss_trace == []
        assert all(np.array_equal(a, b) for a, b in zip(res.embedder.arrays(), res.initial.arrays()))

    def test_zero_learning_rate(self):
        X = np.random.default_rng(0).normal(size=(10, 4))
        p = ContrastiveParams(
            d_in=4, d_hidden=3, d_out=2, epochs=5, learning_rate=0.0, batch_size=10,
            augment_noise_sigma=0.0, augment_dropout_p=0.0,
        )
        trace = train_embedder(X, [None] * 10, p).loss_trace
        # batch row order is reshuffled each epoch, so only summation order varies
        np.testing.assert_allclose(trace, trace[0], rtol=1e-12, atol=0)

    def test_deterministic(self):
        X, y = three_class_data(np.random.default_rng(1), 20)
        labels = [int(c) if i % 2 else None for i, c in enumerate(y)]
        p = ContrastiveParams(d_in=16, epochs=3, batch_size=16, seed=42)
        a = train_embedder(X, labels, p)
        b = train_embedder(X, labels, p)
        assert a.loss_trace == b.loss_trace
        assert np.array_equal(a.embedder.flat(), b.embedder.flat())

    def test_empty(self):
        with pytest.raises(ValueError):
            train_embedder(np.zeros((0, 4)), [], ContrastiveParams(d_in=4))

    def test_learns_classes(self):
        rng = np.random.default_rng(2)
        X, y = three_class_data(rng, 100)
        labels = [int(c) if rng.random() < 0.3 else None for c in y]
        p = ContrastiveParams(d_in=16, d_hidden=32, d_out=8, epochs=20, batch_size=32, seed=3)
        res = train_embedder(X, labels, p)
        assert res.loss_trace[-1] < res.loss_trace[0]
        Xh, yh = three_class_data(np.random.default_rng(2), 50)
        assert cosine_gap(embed_batch(res.embedder, Xh), yh) >= 0.2

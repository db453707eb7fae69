import math

import numpy as np
import pytest

from pam import tensor as T
from pam.backbone import BackboneConfig, PlacementPlan, build_model
from pam.harness import loss as L
from pam.harness.data import generate_dataset
from pam.harness.evaluate import (BUCKET_NAMES, best_threshold, bucket_of, evaluate_pairs,
                                  evaluate_verification, make_pairs, verify)
from pam.tensor import Tensor


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestMarginLoss:
    def test_zero_margin_is_cosine_softmax(self):
        rng = np.random.default_rng(0)
        e, w = _unit(rng, 6, 5), _unit(rng, 4, 5)
        labels = rng.integers(0, 4, size=6)
        got = L.margin_loss(Tensor(e), labels, Tensor(w), s=64.0, m=0.0).data.item()
        z = 64.0 * e @ w.T
        zmax = z.max(axis=1, keepdims=True)
        lse = (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]
        ref = np.mean(lse - z[np.arange(6), labels])
        assert abs(got - ref) <= 1e-12 * max(1.0, abs(ref))

    def test_hand_scalar_example(self):
        c2 = 0.3
        e = np.array([[1.0, 0.0]])
        w = np.array([[1.0, 0.0], [c2, math.sqrt(1 - c2 ** 2)]])
        got = L.margin_loss(Tensor(e), [0], Tensor(w), s=64.0, m=0.5).data.item()
        a, b = 64 * math.cos(0.5), 64 * c2
        ref = -(a - (a + math.log1p(math.exp(b - a))))
        assert got == pytest.approx(ref, abs=1e-12)

    def test_margin_raises_loss(self):
        rng = np.random.default_rng(1)
        e, w = _unit(rng, 5, 4), _unit(rng, 3, 4)
        labels = np.array([0, 1, 2, 0, 1])
        lo = L.margin_loss(Tensor(e), labels, Tensor(w), m=0.0).data.item()
        hi = L.margin_loss(Tensor(e), labels, Tensor(w), m=0.5).data.item()
        assert hi > lo

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError, match="embedding"):
            L.margin_loss(Tensor(np.array([[2.0, 0.0]])), [0], Tensor(np.eye(2)))
        with pytest.raises(ValueError, match="class weight"):
            L.margin_loss(Tensor(np.array([[1.0, 0.0]])), [0], Tensor(np.eye(2) * 1.01))

    def test_rejects_bad_labels_and_hyperparameters(self):
        e = Tensor(np.array([[1.0, 0.0]]))
        with pytest.raises(ValueError):
            L.margin_loss(e, [2], Tensor(np.eye(2)))
        with pytest.raises(ValueError):
            L.margin_loss(e, [0], Tensor(np.eye(2)), s=0.0)
        with pytest.raises(ValueError):
            L.margin_loss(e, [0], Tensor(np.eye(2)), m=2.0)

    def test_clamp_counts_and_stops_gradient(self):
        L.stats.reset()
        e = Tensor(np.array([[-1.0, 0.0]]), requires_grad=True)
        w = Tensor(np.eye(2), requires_grad=True)
        loss = L.margin_loss(e, [0], w, s=4.0, m=0.5)
        assert L.stats.clamped == 1
        loss.backward()
        assert np.isfinite(e.grad).all()

    def test_gradient_flows_through_normalization(self):
        rng = np.random.default_rng(2)
        e = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        L.margin_loss(T.l2_normalize(e), [0, 1, 1], T.l2_normalize(w)).backward()
        assert np.abs(e.grad).sum() > 0 and np.abs(w.grad).sum() > 0


class TestVerification:
    def test_buckets(self):
        assert bucket_of(np.array([0, 29.9, 30, 59.99, 60, 90])).tolist() == [0, 0, 1, 1, 2, 2]

    def test_best_threshold_separable(self):
        sims = np.array([0.1, 0.2, 0.8, 0.9])
        same = np.array([False, False, True, True])
        t = best_threshold(sims, same)
        assert 0.2 < t < 0.8

    def test_verify_perfect_and_buckets(self):
        sims = np.tile([0.9, 0.1], 30)
        same = np.tile([True, False], 30)
        yaw = np.repeat([10.0, 40.0, 80.0], 20)
        res = verify(sims, same, yaw)
        assert res.accuracy == 1.0
        assert all(res.bucket_accuracy[k] == 1.0 for k in BUCKET_NAMES)
        assert [res.bucket_counts[k] for k in BUCKET_NAMES] == [20, 20, 20]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            verify(np.array([]), np.array([], dtype=bool), np.array([]))
        with pytest.raises(ValueError):
            evaluate_verification(None, [])

    def test_make_pairs_balanced(self):
        ds = generate_dataset(0, 5, 4, "uniform", image_size=16)
        a, b, same = make_pairs(ds, 0)
        assert same.sum() == (~same).sum() == 20
        assert np.all((ds.labels[a] == ds.labels[b]) == same)
        assert np.all(a != b)

    def test_self_pairs_score_one(self):
        ds = generate_dataset(1, 3, 4, "uniform", image_size=32)
        model = build_model(BackboneConfig.toy(), PlacementPlan(), seed=0)
        samples = ds.samples()
        res = evaluate_verification(model, [(s, s, True) for s in samples])
        assert res.accuracy == 1.0

    def test_random_embeddings_are_near_chance(self):
        accs = []
        for seed in range(5):
            ds = generate_dataset(100 + seed, 20, 4, "uniform", image_size=32)
            model = build_model(BackboneConfig.toy(), PlacementPlan(), seed=seed, dtype=np.float32)
            rng = np.random.default_rng(seed)
            # random embeddings: scramble which image each embedding belongs to
            perm = rng.permutation(len(ds))
            shuffled = ds.subset(np.arange(len(ds)))
            shuffled.images = ds.images[perm]
            accs.append(evaluate_pairs(model, shuffled, make_pairs(ds, seed)).accuracy)
        assert abs(np.mean(accs) - 0.5) <= 0.1

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sta_lab.cka import (
    ActivationDump,
    CkaMatrix,
    block_similarity,
    capture_activations,
    cka,
    median_bandwidth,
    pairwise_sq_dists,
    rbf_gram,
    redundancy_summary,
)
from sta_lab.metrics import dice_score, iou_score
from sta_lab.model import ModelConfig, StageConfig, StaUNet


class TestOverlap:
    def test_perfect(self, rng):
        y = rng.integers(0, 3, (6, 6))
        np.testing.assert_array_equal(dice_score(y, y, 3).per_class, [1.0, 1.0, 1.0])
        assert iou_score(y, y, 3).mean == 1.0

    def test_half_overlap(self):
        pred = np.array([1, 1, 1, 1, 0, 0, 0, 0])
        gt = np.array([0, 0, 1, 1, 1, 1, 0, 0])
        np.testing.assert_array_equal(dice_score(pred, gt, 2, exclude=(0,)).per_class, [0.5])

    def test_disjoint(self):
        pred, gt = np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1])
        np.testing.assert_array_equal(dice_score(pred, gt, 2).per_class, [0.0, 0.0])
        np.testing.assert_array_equal(iou_score(pred, gt, 2).per_class, [0.0, 0.0])

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            dice_score(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.int64, (5, 5), elements=st.integers(0, 3)), arrays(np.int64, (5, 5), elements=st.integers(0, 3)))
    def test_iou_dice_identity(self, pred, gt):
        d, j = dice_score(pred, gt, 4), iou_score(pred, gt, 4)
        for dc, jc in zip(d.per_class, j.per_class):
            assert jc == pytest.approx(dc / (2 - dc), abs=1e-12)

    def test_exclude(self, rng):
        y = rng.integers(0, 3, (4, 4))
        assert dice_score(y, y, 3, exclude=(0,)).classes == (1, 2)


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


class TestGram:
    def test_unit_diagonal(self, rng):
        np.testing.assert_array_equal(np.diag(rbf_gram(rng.standard_normal((6, 3)))), 1.0)

    def test_identical_samples(self):
        np.testing.assert_array_equal(rbf_gram(np.ones((2, 4))), np.ones((2, 2)))

    def test_unit_distance(self):
        assert rbf_gram(np.array([[0.0], [1.0]]))[0, 1] == pytest.approx(np.exp(-1.0), abs=1e-16)

    def test_entries_in_unit_interval(self, rng):
        k = rbf_gram(rng.standard_normal((10, 4)) * 0.3)
        assert np.all((k > 0) & (k <= 1))
        off = k[~np.eye(10, dtype=bool)]
        assert np.all(off < 1)

    def test_sq_dists_exact(self, rng):
        x = rng.standard_normal((5, 3))
        brute = np.array([[((a - b) ** 2).sum() for b in x] for a in x])
        np.testing.assert_allclose(pairwise_sq_dists(x), brute, atol=1e-14)
        assert np.all(np.diag(pairwise_sq_dists(x)) == 0)

    def test_median_bandwidth(self):
        x = np.array([[0.0], [1.0], [3.0]])
        # off-diagonal squared distances 1, 9, 4 → median 4
        assert median_bandwidth(pairwise_sq_dists(x)) == pytest.approx(4.0)


class TestCka:
    def test_self_similarity(self, rng):
        x = rng.standard_normal((12, 5)) * 0.4
        assert cka(x, x) == pytest.approx(1.0, abs=1e-6)

    def test_symmetry(self, rng):
        x, y = rng.standard_normal((10, 4)) * 0.5, rng.standard_normal((10, 7)) * 0.5
        assert abs(cka(x, y) - cka(y, x)) <= 1e-12

    def test_permutation_and_rigid_invariance(self, rng):
        x, y = rng.standard_normal((15, 6)) * 0.4, rng.standard_normal((15, 3)) * 0.4
        perm = rng.permutation(15)
        assert cka(x[perm], y[perm]) == pytest.approx(cka(x, y), abs=1e-6)
        xt = x @ random_orthogonal(rng, 6) + rng.standard_normal(6)
        assert cka(x, xt) == pytest.approx(1.0, abs=1e-5)

    def test_constant_representation_warns_zero(self, rng):
        with pytest.warns(RuntimeWarning):
            assert cka(np.ones((5, 3)), rng.standard_normal((5, 3))) == 0.0

    def test_sample_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            cka(rng.standard_normal((4, 2)), rng.standard_normal((5, 2)))

    def test_median_bandwidth_avoids_saturation(self, rng):
        # large activations: unit bandwidth collapses K to the identity
        x, y = rng.standard_normal((20, 50)) * 30, rng.standard_normal((20, 50)) * 30
        assert cka(x, y) == pytest.approx(1.0, abs=1e-6)
        assert cka(x, y, bandwidth="median") < 0.9


class TestBlockSimilarity:
    def test_duplicate_blocks_all_ones(self, rng):
        b = rng.standard_normal((8, 3)) * 0.5
        m = block_similarity(ActivationDump(["a", "b", "c"], [b, b.copy(), b.copy()]))
        np.testing.assert_allclose(m.values, 1.0, atol=1e-12)

    def test_independent_blocks_low(self, rng):
        # Monte-Carlo reference: the estimator's positive bias decays like 1/n,
        # mean 0.40 at n=50, 0.15 at n=200, 0.04 at n=800 for this shape
        blocks = [rng.standard_normal((800, 10)) * 0.25 for _ in range(3)]
        m = block_similarity(ActivationDump(list("xyz"), blocks)).values
        assert m[~np.eye(3, dtype=bool)].max() < 0.1

    def test_row_permutation(self, rng):
        blocks = [rng.standard_normal((12, 4)) * 0.5 for _ in range(3)]
        perm = rng.permutation(12)
        a = block_similarity(ActivationDump(list("xyz"), blocks)).values
        b = block_similarity(ActivationDump(list("xyz"), [x[perm] for x in blocks])).values
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_min_max(self, rng):
        blocks = [rng.standard_normal((12, 4)) * s for s in (0.3, 0.5, 0.8)]
        m = block_similarity(ActivationDump(list("xyz"), blocks), normalize=True).values
        assert m.min() == 0.0 and m.max() == 1.0

    def test_constant_matrix_warns(self, rng):
        b = rng.standard_normal((6, 2)) * 0.5
        with pytest.warns(RuntimeWarning):
            m = block_similarity(ActivationDump(["a", "b"], [b, b]), normalize=True)
        assert np.all(m.values == 0)

    def test_sample_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            ActivationDump(["a", "b"], [rng.standard_normal((4, 2)), rng.standard_normal((5, 2))])

    def test_summary(self):
        v = np.array([[1, .9, .1, .1], [.9, 1, .1, .1], [.1, .1, 1, .3], [.1, .1, .3, 1]])
        s = redundancy_summary(CkaMatrix(list("abcd"), v))
        assert s == {"shallow_mean_offdiag": pytest.approx(0.9), "deep_mean_offdiag": pytest.approx(0.3)}


@pytest.fixture(scope="module")
def tiny_model():
    cfg = ModelConfig(num_classes=2, base_channels=4, input_size=(32, 32),
                      stages=(StageConfig(1, (4, 4), 2), StageConfig(1, (2, 2), 2),
                              StageConfig(1, (1, 1), 2), StageConfig(1, (1, 1), 2)))
    return StaUNet(cfg, seed=0)


class TestCapture:
    def test_selector_order_and_duplicates(self, tiny_model):
        x = np.random.default_rng(0).random((3, 1, 32, 32), dtype=np.float32)
        dump = capture_activations(tiny_model, x, ["dec1.sta0", "enc1.sta0", "enc1.sta0"])
        assert dump.names == ["dec1.sta0", "enc1.sta0", "enc1.sta0"]
        np.testing.assert_array_equal(dump.blocks[1], dump.blocks[2])
        assert dump.blocks[0].shape == (3, 4 * 32 * 32)

    def test_default_all_blocks_and_determinism(self, tiny_model):
        x = np.random.default_rng(1).random((5, 1, 32, 32), dtype=np.float32)
        a = capture_activations(tiny_model, x, max_features=100, seed=4, batch_size=2)
        b = capture_activations(tiny_model, x, max_features=100, seed=4, batch_size=3)
        assert a.names == tiny_model.block_names()
        for u, v in zip(a.blocks, b.blocks):
            assert u.shape[1] <= 100
            np.testing.assert_array_equal(u, v)

    def test_empty_and_unknown(self, tiny_model):
        x = np.zeros((1, 1, 32, 32), np.float32)
        with pytest.raises(ValueError):
            capture_activations(tiny_model, x, [])
        with pytest.raises(KeyError):
            capture_activations(tiny_model, x, ["enc9.sta0"])

    def test_restores_training_mode(self, tiny_model):
        tiny_model.train()
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            capture_activations(tiny_model, np.zeros((2, 1, 32, 32), np.float32), ["enc1.sta0"])
        assert tiny_model.training

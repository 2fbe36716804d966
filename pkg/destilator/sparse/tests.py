import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st
from masking.masks import MaskGrid, expand_hierarchy, full_mask, generate_masks
from tensors import ops
from tensors.autodiff import Tensor, backward, recording
from tensors.gradcheck import grad_check
from tensors.layers import parameter

from .kernels import (
    SparseError,
    SparseFeatureMap,
    densify,
    from_dense,
    mask_pattern_check,
    sparse_add,
    sparse_batchnorm,
    sparse_conv2d,
    sparse_map,
)


def masked_conv_oracle(x, w, visible, out_visible, stride=1, padding=1):
    """Gosta konvolucija zakritega vhoda, na izhodu obdržimo le vidne položaje."""
    x = np.pad(x * visible[:, None], ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, _, _, _ = x.shape
    o, _, kh, kw = w.shape
    out_h, out_w = out_visible.shape[1:]
    out = np.zeros((n, o, out_h, out_w))
    for b in range(n):
        for k in range(o):
            for i in range(out_h):
                for j in range(out_w):
                    if out_visible[b, i, j]:
                        patch = x[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                        out[b, k, i, j] = np.sum(patch * w[k])
    return out


def checkerboard(n, size, cell):
    grid = (np.indices((size // cell, size // cell)).sum(axis=0) % 2).astype(bool)
    return MaskGrid(np.stack([grid] * n), 0.5)


class SparseConvTest(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_all_visible_matches_dense(self):
        x = self.rng.normal(size=(2, 3, 8, 8))
        w = self.rng.normal(size=(4, 3, 3, 3))
        b = self.rng.normal(size=4)
        hierarchy = expand_hierarchy(full_mask(2, 2, 2), [8, 4])
        inp = SparseFeatureMap(Tensor(x), hierarchy.at(8))
        for stride in (1, 2):
            out = sparse_conv2d(
                inp, Tensor(w), Tensor(b), stride=stride, out_mask=hierarchy.at(8 // stride)
            )
            dense = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=1)
            np.testing.assert_allclose(out.features.data, dense.data, rtol=1e-12, atol=1e-12)

    def test_checkerboard_matches_nested_loops(self):
        x = self.rng.normal(size=(1, 2, 8, 8))
        w = self.rng.normal(size=(3, 2, 3, 3))
        hierarchy = expand_hierarchy(checkerboard(1, 4, 1), [8, 4])
        visible = hierarchy.at(8)
        out = sparse_conv2d(SparseFeatureMap(Tensor(x * visible[:, None]), visible), Tensor(w))
        np.testing.assert_allclose(
            out.features.data, masked_conv_oracle(x, w, visible, visible), atol=1e-12
        )
        strided = sparse_conv2d(
            SparseFeatureMap(Tensor(x * visible[:, None]), visible),
            Tensor(w),
            stride=2,
            out_mask=hierarchy.at(4),
        )
        np.testing.assert_allclose(
            strided.features.data,
            masked_conv_oracle(x, w, visible, hierarchy.at(4), stride=2),
            atol=1e-12,
        )

    def test_masked_inputs_contribute_nothing(self):
        hierarchy = expand_hierarchy(checkerboard(1, 4, 1), [4])
        visible = hierarchy.at(4)
        x = self.rng.normal(size=(1, 1, 4, 4)) * visible[:, None]
        garbage = x + 100.0 * ~visible[:, None]
        w = Tensor(self.rng.normal(size=(2, 1, 3, 3)))
        clean = sparse_conv2d(SparseFeatureMap(Tensor(x), visible), w)
        dirty = sparse_conv2d(SparseFeatureMap(Tensor(garbage), visible), w)
        np.testing.assert_array_equal(clean.features.data, dirty.features.data)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 0.9))
    def test_no_leakage(self, seed, ratio):
        rng = np.random.default_rng(seed)
        hierarchy = expand_hierarchy(generate_masks(2, 2, 2, ratio, seed), [8, 4, 2])
        inp = from_dense(rng.normal(size=(2, 3, 8, 8)), hierarchy.at(8))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)))
        b = Tensor(rng.normal(size=4))
        out = sparse_conv2d(inp, w, b)
        self.assertFalse(out.leaked().any())
        for size in (4, 2):
            out = sparse_conv2d(
                out, Tensor(rng.normal(size=(4, 4, 3, 3))), b, stride=2, out_mask=hierarchy.at(size)
            )
            out.assert_canonical()
            self.assertEqual(out.features.shape[-1], size)

    def test_pristranskost_le_na_vidnih(self):
        """Pristranskost konvolucije se prišteje le vidnim položajem"""
        visible = np.array([[[True, False], [False, False]]])
        inp = SparseFeatureMap(Tensor(np.zeros((1, 1, 2, 2))), visible)
        out = sparse_conv2d(inp, Tensor(np.zeros((1, 1, 1, 1))), Tensor([5.0]))
        self.assertEqual(out.features.data.reshape(-1).tolist(), [5.0, 0.0, 0.0, 0.0])

    def test_popolnoma_zakrita_brez_gradienta(self):
        """Pri povsem zakritem vhodu so vsi gradienti nič"""
        hidden = np.zeros((1, 4, 4), dtype=bool)
        x = parameter(self.rng.normal(size=(1, 2, 4, 4)))
        w = parameter(self.rng.normal(size=(3, 2, 3, 3)))
        b = parameter(np.zeros(3))
        with recording():
            out = sparse_conv2d(SparseFeatureMap(x, hidden), w, b)
            np.testing.assert_array_equal(out.features.data, 0.0)
            backward((out.features * out.features).sum())
        np.testing.assert_array_equal(x.grad, 0.0)
        np.testing.assert_array_equal(b.grad, 0.0)
        np.testing.assert_array_equal(w.grad, 0.0)

    def test_stride_must_be_one_or_two(self):
        inp = SparseFeatureMap(Tensor(np.zeros((1, 1, 4, 4))), np.ones((1, 4, 4), dtype=bool))
        with self.assertRaisesMessage(SparseError, "stride 1 or 2"):
            sparse_conv2d(inp, Tensor(np.zeros((1, 1, 3, 3))), stride=3)

    def test_channel_mismatch(self):
        inp = SparseFeatureMap(Tensor(np.zeros((1, 2, 4, 4))), np.ones((1, 4, 4), dtype=bool))
        with self.assertRaisesMessage(SparseError, "3 channels"):
            sparse_conv2d(inp, Tensor(np.zeros((1, 3, 3, 3))))

    def test_stride_two_needs_target_mask(self):
        inp = SparseFeatureMap(Tensor(np.zeros((1, 1, 4, 4))), np.ones((1, 4, 4), dtype=bool))
        with self.assertRaises(SparseError):
            sparse_conv2d(inp, Tensor(np.zeros((1, 1, 3, 3))), stride=2)
        with self.assertRaises(SparseError):
            sparse_conv2d(
                inp,
                Tensor(np.zeros((1, 1, 3, 3))),
                stride=2,
                out_mask=np.ones((1, 3, 3), dtype=bool),
            )

    def test_mask_shape_must_match_features(self):
        with self.assertRaises(SparseError):
            SparseFeatureMap(Tensor(np.zeros((1, 1, 4, 4))), np.ones((1, 2, 2), dtype=bool))


class SparseGradientTest(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.hierarchy = expand_hierarchy(
            MaskGrid(np.array([[[True, False], [True, True]], [[False, True], [True, False]]]), 0.5),
            [4, 2],
        )
        self.weights = Tensor(self.rng.normal(size=(2, 3, 2, 2)))

    def test_sparse_conv_gradients(self):
        visible = self.hierarchy.at(4)
        x = parameter(self.rng.normal(size=(2, 2, 4, 4)) * visible[:, None])
        w = parameter(self.rng.normal(size=(3, 2, 3, 3)))
        b = parameter(self.rng.normal(size=3))

        def loss():
            out = sparse_conv2d(SparseFeatureMap(x, visible), w, b, stride=2, out_mask=self.hierarchy.at(2))
            return (out.features * self.weights).sum()

        report = grad_check(loss, [x, w, b])
        self.assertLess(report.max_rel_error, 1e-4, report.per_param)

    def test_sparse_batchnorm_gradients(self):
        visible = self.hierarchy.at(4)
        x = parameter(self.rng.normal(size=(2, 3, 4, 4)) * visible[:, None])
        gamma = parameter(self.rng.normal(size=3))
        beta = parameter(self.rng.normal(size=3))
        weights = Tensor(self.rng.normal(size=(2, 3, 4, 4)))

        def loss():
            state = ops.BatchNormState(3)
            out = sparse_batchnorm(SparseFeatureMap(x, visible), gamma, beta, state)
            return (out.features * weights).sum()

        report = grad_check(loss, [x, gamma, beta])
        self.assertLess(report.max_rel_error, 1e-4, report.per_param)

    def test_densify_gradients_reach_embedding_only_from_holes(self):
        visible = self.hierarchy.at(2)
        x = parameter(self.rng.normal(size=(2, 3, 2, 2)) * visible[:, None])
        embedding = parameter(self.rng.normal(size=3))

        def loss():
            return (densify(SparseFeatureMap(x, visible), embedding) * self.weights).sum()

        report = grad_check(loss, [x, embedding])
        self.assertLess(report.max_rel_error, 1e-4, report.per_param)
        expected = (self.weights.data * ~visible[:, None]).sum(axis=(0, 2, 3))
        np.testing.assert_allclose(embedding.grad, expected)


class SparseBatchNormTest(SimpleTestCase):
    def test_all_visible_matches_dense(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        ones = Tensor(np.ones(3))
        zeros = Tensor(np.zeros(3))
        sparse = sparse_batchnorm(
            SparseFeatureMap(Tensor(x), np.ones((2, 4, 4), dtype=bool)),
            ones,
            zeros,
            ops.BatchNormState(3),
        )
        dense = ops.batch_norm(Tensor(x), ones, zeros, ops.BatchNormState(3))
        np.testing.assert_array_equal(sparse.features.data, dense.data)

    def test_masked_stay_zero(self):
        visible = np.array([[[True, False], [True, True]]])
        x = np.random.default_rng(1).normal(size=(1, 2, 2, 2)) * visible[:, None]
        out = sparse_batchnorm(
            SparseFeatureMap(Tensor(x), visible),
            Tensor(np.ones(2)),
            Tensor(np.full(2, 3.0)),
            ops.BatchNormState(2),
        )
        out.assert_canonical()
        self.assertAlmostEqual(out.features.data[0, 0][visible[0]].mean(), 3.0)

    def test_no_visible_positions(self):
        with self.assertRaises(SparseError):
            sparse_batchnorm(
                SparseFeatureMap(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 2), dtype=bool)),
                Tensor(np.ones(2)),
                Tensor(np.zeros(2)),
                ops.BatchNormState(2),
            )


class CanonicalFormTest(SimpleTestCase):
    def setUp(self):
        self.visible = np.array([[[True, False], [True, True]]])
        ones = np.ones((1, 1, 2, 2))
        self.clean = SparseFeatureMap(Tensor(ones * self.visible[:, None]), self.visible)
        self.dirty = SparseFeatureMap(Tensor(ones), self.visible)

    def test_sestevanje_z_uhajanjem(self):
        """Seštevanje zavrne zemljevid z neničelnimi zakritimi položaji"""
        self.assertFalse(sparse_add(self.clean, self.clean).leaked().any())
        with self.assertRaises(SparseError):
            sparse_add(self.clean, self.dirty)

    def test_funkcija_brez_nicle(self):
        """Elementna funkcija z f(0) != 0 bi zapolnila zakrite položaje"""
        self.assertFalse(sparse_map(self.clean, ops.relu).leaked().any())
        with self.assertRaises(SparseError):
            sparse_map(self.clean, lambda features: features + 1.0)


class DensifyTest(SimpleTestCase):
    def test_zapolni_luknje(self):
        """Zgostitev zakrite položaje zapolni z vložitvijo maske"""
        visible = np.array([[[True, False]]])
        inp = SparseFeatureMap(Tensor([[[[1.0, 0.0]], [[2.0, 0.0]]]]), visible)
        out = densify(inp, Tensor([7.0, 8.0]))
        self.assertEqual(out.data.tolist(), [[[[1.0, 7.0]], [[2.0, 8.0]]]])

    def test_embedding_size_mismatch(self):
        inp = SparseFeatureMap(Tensor(np.zeros((1, 2, 1, 1))), np.ones((1, 1, 1), dtype=bool))
        with self.assertRaises(SparseError):
            densify(inp, Tensor(np.zeros(3)))


class MaskPatternCheckTest(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(2)
        self.hierarchy = expand_hierarchy(checkerboard(2, 2, 1), [8, 4, 2])
        self.images = rng.normal(size=(2, 1, 8, 8))
        self.kernels = [Tensor(rng.normal(size=(2, 1, 3, 3))), Tensor(rng.normal(size=(2, 2, 3, 3)))]

    def sparse_forward(self, images, hierarchy):
        out = from_dense(images, hierarchy.at(8))
        stages = []
        for kernel, size in zip(self.kernels, (4, 2)):
            out = sparse_map(
                sparse_conv2d(out, kernel, stride=2, out_mask=hierarchy.at(size)), ops.relu
            )
            stages.append(out)
        return stages

    def dense_forward(self, images, hierarchy):
        out = Tensor(images * hierarchy.at(8)[:, None])
        stages = []
        for kernel in self.kernels:
            out = ops.conv2d(out, kernel, stride=2, padding=1)
            stages.append(out)
        return stages

    def test_sparse_pipeline_passes(self):
        report = mask_pattern_check(self.sparse_forward, self.images, self.hierarchy)
        self.assertTrue(report.passed)
        self.assertEqual(report.leaks, [0, 0])

    def test_gosta_veriga_pusca(self):
        """Gosta konvolucija prenese vrednosti čez meje maske"""
        report = mask_pattern_check(self.dense_forward, self.images, self.hierarchy)
        self.assertFalse(report.passed)
        self.assertGreater(sum(report.leaks), 0)
        self.assertEqual(len(report.positions[0]), report.leaks[0])

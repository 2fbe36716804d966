import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st

from .masks import (
    MaskError,
    MaskGrid,
    apply_mask_dense,
    expand_hierarchy,
    generate_mask,
    generate_masks,
    hierarchy_for_images,
    image_scales,
    load_mask,
    save_mask,
)


class GenerateMaskTest(SimpleTestCase):
    def test_brez_zakrivanja(self):
        """Pri deležu nič ostanejo vse celice vidne"""
        mask = generate_mask(2, 2, 0.0, 1)
        self.assertTrue(mask.visible.all())

    def test_half(self):
        self.assertEqual(generate_mask(2, 2, 0.5, 1).masked_count, 2)

    def test_natancno_stevilo_zakritih(self):
        """Maska zakrije natanko zaokroženo število celic, enako seme da enako masko"""
        first = generate_mask(4, 4, 0.6, 7)
        second = generate_mask(4, 4, 0.6, 7)
        self.assertEqual(first.masked_count, 10)
        np.testing.assert_array_equal(first.visible, second.visible)

    def test_ratio_out_of_range(self):
        with self.assertRaises(MaskError):
            generate_mask(2, 2, 1.5, 0)
        with self.assertRaises(MaskError):
            generate_mask(2, 2, -0.1, 0)

    def test_fully_masked(self):
        self.assertEqual(generate_mask(3, 3, 1.0, 0).masked_count, 9)

    @settings(max_examples=200, deadline=None)
    @given(
        st.integers(1, 8),
        st.integers(1, 8),
        st.floats(0, 1),
        st.integers(0, 2**32 - 1),
    )
    def test_masked_fraction(self, grid_h, grid_w, ratio, seed):
        mask = generate_mask(grid_h, grid_w, ratio, seed)
        cells = grid_h * grid_w
        self.assertLessEqual(abs(mask.masked_count - ratio * cells), 1)
        if ratio < 1:
            self.assertGreater(int(mask.visible.sum()), 0)

    def test_batched_masks_differ_per_image(self):
        masks = generate_masks(8, 4, 4, 0.5, seed=3)
        self.assertEqual(masks.visible.shape, (8, 4, 4))
        self.assertEqual(len(masks), 8)
        self.assertGreater(len({m.tobytes() for m in masks.visible}), 1)

    def test_seed_tuple_is_extended_per_image(self):
        masks = generate_masks(3, 4, 4, 0.5, seed=(3, 7))
        np.testing.assert_array_equal(
            masks.visible[2], generate_mask(4, 4, 0.5, (3, 7, 2)).visible
        )


class ExpandHierarchyTest(SimpleTestCase):
    def test_razsiritev_v_bloke(self):
        """Vsaka celica maske se na finejši ločljivosti razširi v kvadratni blok"""
        mask = MaskGrid(np.array([[True, False], [False, True]]), 0.5)
        (block,) = expand_hierarchy(mask, [4]).maps
        expected = np.kron(mask.visible, np.ones((2, 2), dtype=bool))
        np.testing.assert_array_equal(block, expected)

    def test_identity_scale(self):
        mask = generate_mask(2, 3, 0.5, 0)
        hierarchy = expand_hierarchy(mask, [(2, 3)])
        np.testing.assert_array_equal(hierarchy.at(2, 3), mask.visible)

    def test_visible_counts_scale_with_area(self):
        mask = MaskGrid(np.array([[True, True], [True, False]]), 0.25)
        hierarchy = expand_hierarchy(mask, [16, 8, 4, 2])
        self.assertEqual([int(m.sum()) for m in hierarchy.maps], [192, 48, 12, 3])

    def test_non_divisible_scale(self):
        with self.assertRaises(MaskError):
            expand_hierarchy(generate_mask(2, 2, 0.5, 0), [5])

    def test_image_scales(self):
        self.assertEqual(image_scales(64), [64, 32, 16, 8, 4, 2])
        with self.assertRaises(MaskError):
            image_scales(48)

    def test_hierarhija_je_ponovljiva(self):
        """Hierarhija mask je odvisna le od semena in velikosti slik"""
        first = hierarchy_for_images(generate_masks(4, 2, 2, 0.5, 9), 64)
        second = hierarchy_for_images(generate_masks(4, 2, 2, 0.5, 9), 64)
        self.assertEqual(first.checksum(), second.checksum())
        self.assertEqual(first.at(16).shape, (4, 16, 16))
        with self.assertRaises(MaskError):
            first.at(5)

    def test_serialization(self):
        mask = generate_mask(4, 4, 0.6, 2)
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "mask.ntnsr"
            save_mask(path, mask)
            np.testing.assert_array_equal(load_mask(path, 0.6).visible, mask.visible)


class ApplyMaskDenseTest(SimpleTestCase):
    def test_all_visible(self):
        image = np.random.default_rng(0).random((3, 4, 4))
        out = apply_mask_dense(image, np.ones((2, 2), dtype=bool))
        np.testing.assert_array_equal(out.data, image)

    def test_all_masked(self):
        out = apply_mask_dense(np.ones((1, 3, 4, 4)), np.zeros((1, 2, 2), dtype=bool))
        self.assertEqual(out.data.sum(), 0)

    def test_half_masked(self):
        visible = np.array([[True, False], [False, True]])
        out = apply_mask_dense(np.ones((4, 4)), visible)
        self.assertEqual(out.data.sum(), 8)

    def test_dim_mismatch(self):
        with self.assertRaises(MaskError):
            apply_mask_dense(np.ones((1, 5, 5)), np.ones((2, 2), dtype=bool))

import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from masking.masks import MaskGrid, full_mask, generate_masks
from tensors import ntnsr
from tensors.autodiff import Tensor, backward, recording

from .embeddings import (
    MANIFEST_FILE,
    TOKENS_FILE,
    EmbeddingFileError,
    export_teacher_embeddings,
    load_teacher_embeddings,
)
from .encoder import (
    TeacherConfig,
    TeacherError,
    ToyTeacher,
    instance_embedding,
    teacher_encode,
)


class InstanceEmbeddingTest(SimpleTestCase):
    def test_single_token(self):
        np.testing.assert_allclose(instance_embedding([[3.0, 4.0]]), [0.6, 0.8])

    def test_enaki_zetoni(self):
        """Vložitev enakih žetonov je njihova normalizirana smer"""
        v = np.array([1.0, 2.0, 2.0])
        np.testing.assert_allclose(instance_embedding([v, v, v]), v / 3.0)

    def test_two_orthogonal_tokens(self):
        np.testing.assert_allclose(
            instance_embedding([[1.0, 0.0], [0.0, 1.0]]), [0.7071, 0.7071], atol=1e-4
        )

    def test_nicelno_povprecje(self):
        """Žetoni z ničelnim povprečjem nimajo smeri in sprožijo napako"""
        with self.assertRaises(TeacherError):
            instance_embedding([[1.0, 0.0], [-1.0, 0.0]])

    def test_empty(self):
        with self.assertRaises(TeacherError):
            instance_embedding(np.zeros((0, 4)))


class TeacherConfigTest(SimpleTestCase):
    def test_image_not_divisible_by_patch(self):
        with self.assertRaises(TeacherError):
            TeacherConfig(image_size=64, patch_size=24)

    def test_dim_not_divisible_by_heads(self):
        with self.assertRaises(TeacherError):
            TeacherConfig(embed_dim=10, heads=3)


class ToyTeacherTest(SimpleTestCase):
    def setUp(self):
        self.config = TeacherConfig(embed_dim=8, depth=2, heads=2)
        self.teacher = ToyTeacher(self.config)
        self.images = np.random.default_rng(0).normal(size=(2, 3, 64, 64))

    def test_token_counts(self):
        mask = generate_masks(2, 2, 2, 0.5, 0)
        visible = self.teacher.visible_tokens(mask, 2)
        self.assertEqual(visible.sum(axis=1).tolist(), [8, 8])
        output = teacher_encode(self.images, mask, self.teacher)
        self.assertEqual(output.tokens.shape, (2, 16, 8))
        self.assertEqual(output.instance_embedding.shape, (2, 8))

    def test_rows_and_embeddings_are_unit_length(self):
        output = self.teacher(self.images, generate_masks(2, 2, 2, 0.5, 1))
        np.testing.assert_allclose(np.linalg.norm(output.tokens, axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(
            np.linalg.norm(output.instance_embedding, axis=-1), 1.0, atol=1e-12
        )

    def test_deterministic_per_seed(self):
        mask = full_mask(2, 2, 2)
        first = ToyTeacher(self.config)(self.images, mask)
        second = ToyTeacher(self.config)(self.images, mask)
        np.testing.assert_array_equal(first.tokens, second.tokens)

    def test_zakriti_piksli_ne_puscajo(self):
        """Sprememba zakritih pikslov ne vpliva na žetone učitelja"""
        mask = MaskGrid(np.array([[[True, False], [True, True]]] * 2), 0.25)
        changed = self.images.copy()
        changed[:, :, :32, 32:] += 5.0
        first = self.teacher(self.images, mask)
        second = self.teacher(changed, mask)
        np.testing.assert_array_equal(first.tokens, second.tokens)
        np.testing.assert_array_equal(first.instance_embedding, second.instance_embedding)

    def test_zakrita_mesta_z_zetonom_maske(self):
        """Na zakritih mestih učitelj vrne normaliziran žeton maske"""
        mask = MaskGrid(np.array([[[False, True], [True, True]]] * 2), 0.25)
        output = self.teacher(self.images, mask)
        token = self.teacher.mask_token.data / np.linalg.norm(self.teacher.mask_token.data)
        np.testing.assert_allclose(output.tokens[0, 0], token)
        np.testing.assert_allclose(output.tokens[1, 5], token)

    def test_mask_grid_must_fit_patch_grid(self):
        with self.assertRaises(TeacherError):
            self.teacher(self.images, generate_masks(2, 8, 8, 0.5, 0))

    def test_frozen_parameters_never_get_gradients(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with recording():
            output = self.teacher(self.images, full_mask(2, 2, 2))
            backward((x * Tensor(output.tokens[0, 0, :3])).sum())
        for name, param in self.teacher.named_parameters().items():
            self.assertFalse(param.requires_grad, name)
            self.assertIsNone(param.grad, name)


class TeacherEmbeddingsTest(SimpleTestCase):
    def setUp(self):
        self.directory = Path(tempfile.mkdtemp())
        self.teacher = ToyTeacher(TeacherConfig(embed_dim=8, image_size=32))
        self.images = np.random.default_rng(2).normal(size=(10, 3, 32, 32))

    def test_round_trip(self):
        exported = export_teacher_embeddings(self.teacher, self.images, self.directory, "abc", 4)
        provider = load_teacher_embeddings(self.directory, expected_dim=8)
        self.assertEqual(len(provider), 10)
        np.testing.assert_array_equal(provider.tokens, exported.astype(np.float64))
        self.assertEqual(provider.manifest["dataset_checksum"], "abc")
        item = provider[3]
        self.assertEqual(item.tokens.shape, (4, 8))
        np.testing.assert_allclose(np.linalg.norm(item.instance_embedding), 1.0)

    def test_wrong_dim_names_both(self):
        export_teacher_embeddings(self.teacher, self.images, self.directory, "abc")
        with self.assertRaisesMessage(EmbeddingFileError, "dim 8 but the student head dim is 16"):
            load_teacher_embeddings(self.directory, expected_dim=16)

    def test_index_out_of_range(self):
        export_teacher_embeddings(self.teacher, self.images, self.directory, "abc")
        provider = load_teacher_embeddings(self.directory)
        with self.assertRaises(IndexError):
            provider[10]
        with self.assertRaises(IndexError):
            provider.batch([0, 10])

    def write(self, tokens, **manifest):
        entries = {
            "num_instances": tokens.shape[0],
            "num_tokens": tokens.shape[1],
            "embed_dim": tokens.shape[2],
        }
        entries.update(manifest)
        ntnsr.write_tensor(self.directory / TOKENS_FILE, tokens)
        ntnsr.write_manifest(self.directory / MANIFEST_FILE, entries)

    def test_manifest_mismatch(self):
        self.write(np.full((2, 1, 1), 1.0), num_tokens=4)
        with self.assertRaisesMessage(EmbeddingFileError, "num_tokens"):
            load_teacher_embeddings(self.directory)

    def test_rows_far_from_unit_length(self):
        self.write(np.full((2, 1, 1), 1.01))
        with self.assertRaisesMessage(EmbeddingFileError, "unit length"):
            load_teacher_embeddings(self.directory)

    def test_majhno_odstopanje_z_opozorilom(self):
        """Vrstice, ki so skoraj enotske, se normalizirajo z opozorilom v dnevniku"""
        self.write(np.full((2, 1, 1), 1.0001))
        with self.assertLogs("teachers.embeddings", level="WARNING"):
            provider = load_teacher_embeddings(self.directory)
        np.testing.assert_allclose(provider.tokens, 1.0)

    def test_missing_files(self):
        with self.assertRaises(EmbeddingFileError):
            load_teacher_embeddings(self.directory / "missing")

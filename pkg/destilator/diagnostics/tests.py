import io
import shutil
import tempfile
from pathlib import Path

import numpy as np
from distillation.datasets import generate_dataset
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st
from masking.masks import MaskGrid, generate_mask, generate_masks, upsample_map
from students.network import StudentConfig, StudentModel

from .erosion import erosion_profile, erosion_table
from .reports import read_csv
from .shift import (
    DiagnosticError,
    Histogram,
    activation_histogram,
    distribution_shift,
    frozen_twins,
    histogram,
    shift_score,
)


def small_student(image_size=32, widths=(2, 2, 4, 4)):
    return StudentModel(
        StudentConfig(widths=widths, blocks=1, image_size=image_size, embed_dim=4, patch_size=8)
    )


class HistogramTest(SimpleTestCase):
    def test_normirani_stolpci(self):
        """Deleži v histogramu se seštejejo v ena"""
        hist = histogram(np.random.default_rng(0).normal(size=500), bins=16)
        self.assertEqual(len(hist), 16)
        self.assertAlmostEqual(hist.counts.sum(), 1.0, delta=1e-9)
        self.assertTrue(np.all(np.diff(hist.edges) > 0))

    def test_default_bin_count(self):
        self.assertEqual(len(histogram(np.arange(10.0))), 64)

    def test_konstantne_vrednosti(self):
        """Konstantne vrednosti dajo histogram z enim stolpcem"""
        hist = histogram(np.full(20, 0.3))
        self.assertEqual(len(hist), 1)
        np.testing.assert_array_equal(hist.counts, [1.0])

    def test_invalid(self):
        with self.assertRaises(DiagnosticError):
            histogram([])
        with self.assertRaises(DiagnosticError):
            Histogram(np.array([0.0, 0.0, 1.0]), np.array([0.5, 0.5]))
        with self.assertRaises(DiagnosticError):
            Histogram(np.array([0.0, 1.0, 2.0]), np.array([0.5, 0.4]))

    def test_same_model_same_images(self):
        student = small_student()
        images, _ = generate_dataset(8, 2, image_size=32, seed=1)
        first = activation_histogram(student, images)
        second = activation_histogram(student, images)
        np.testing.assert_array_equal(first.edges, second.edges)
        np.testing.assert_array_equal(first.counts, second.counts)

    def test_all_masked_sparse_input(self):
        images, _ = generate_dataset(4, 2, image_size=32)
        mask = MaskGrid(np.zeros((4, 1, 1), dtype=bool), 1.0)
        with self.assertRaises(DiagnosticError):
            activation_histogram(small_student(), images, mask)

    def test_constant_images(self):
        hist = activation_histogram(small_student(), np.zeros((4, 3, 32, 32)))
        self.assertEqual(len(hist), 1)


class ShiftScoreTest(SimpleTestCase):
    edges = np.array([0.0, 1.0, 2.0])

    def test_identical(self):
        p = Histogram(self.edges, np.array([0.3, 0.7]))
        self.assertEqual(shift_score(p, p), 0.0)

    def test_disjoint(self):
        p = Histogram(self.edges, np.array([1.0, 0.0]))
        q = Histogram(self.edges, np.array([0.0, 1.0]))
        self.assertEqual(shift_score(p, q), 1.0)

    def test_rocni_izracun(self):
        """Razdalja skupne variacije se ujema z ročnim izračunom"""
        p = Histogram(self.edges, np.array([0.5, 0.5]))
        q = Histogram(self.edges, np.array([0.25, 0.75]))
        self.assertAlmostEqual(shift_score(p, q), 0.25)

    def test_edges_must_match(self):
        p = Histogram(self.edges, np.array([0.5, 0.5]))
        q = Histogram(self.edges + 1, np.array([0.5, 0.5]))
        with self.assertRaises(DiagnosticError):
            shift_score(p, q)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
        st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
    )
    def test_bounded_and_symmetric(self, a, b):
        edges = np.arange(5.0)
        p = Histogram(edges, np.array(a) / sum(a))
        q = Histogram(edges, np.array(b) / sum(b))
        score = shift_score(p, q)
        self.assertTrue(0.0 <= score <= 1.0)
        self.assertAlmostEqual(score, shift_score(q, p), delta=1e-15)


class DistributionShiftTest(SimpleTestCase):
    def test_redki_kodirnik_zmanjsa_premik(self):
        """Redki kodirnik ohrani porazdelitev aktivacij, gosti z ničlami je ne"""
        student = small_student(image_size=128, widths=(4, 4, 8, 8))
        buffers = {name: value.copy() for name, value in student.named_buffers().items()}
        images, _ = generate_dataset(100, 4, image_size=128, seed=0)
        report = distribution_shift(student, images, ratio=0.6, seed=0)
        self.assertEqual(report.images, 100)
        self.assertTrue(report.reduced, (report.sparse.score, report.dense.score))
        self.assertLess(report.sparse.score, 0.1)
        self.assertGreater(report.dense.score, 2 * report.sparse.score)
        for arm in (report.sparse, report.dense):
            self.assertTrue(0.0 <= arm.score <= 1.0)
            np.testing.assert_array_equal(arm.masked.edges, arm.unmasked.edges)
        for name, value in student.named_buffers().items():
            np.testing.assert_array_equal(value, buffers[name], name)

    def test_ponovljivost(self):
        """Isto seme da enak rezultat, maska pa dejansko zakrije zaplate"""
        student = small_student(image_size=64)
        images, _ = generate_dataset(8, 2, image_size=64, seed=2)
        first = distribution_shift(student, images, seed=3)
        second = distribution_shift(student, images, seed=3)
        self.assertEqual(first.sparse.score, second.sparse.score)
        self.assertEqual(first.dense.score, second.dense.score)
        self.assertGreater(first.dense.score, 0.0)

    def test_dvojcici_z_zamrznjeno_normalizacijo(self):
        """Dvojčici uporabljata statistike nezakritih slik, študent se ne spremeni"""
        student = small_student(image_size=64)
        images, _ = generate_dataset(8, 2, image_size=64, seed=4)
        sparse, dense = frozen_twins(student, images)
        for twin in (sparse, dense):
            self.assertTrue(all(not s.training for s in twin.named_norm_states().values()))
        for name, value in sparse.named_buffers().items():
            np.testing.assert_array_equal(value, dense.named_buffers()[name])
        self.assertTrue(all(s.training for s in student.named_norm_states().values()))
        running_mean = dense.named_buffers()["stem.0.norm.state.running_mean"]
        self.assertFalse(np.allclose(running_mean, 0.0))


class ErosionTest(SimpleTestCase):
    @settings(max_examples=30, deadline=None)
    @given(
        st.sampled_from([1, 2, 4]),
        st.floats(0.0, 1.0),
        st.integers(0, 2**32 - 1),
        st.integers(1, 6),
    )
    def test_sparse_profile_is_constant(self, grid, ratio, seed, depth):
        visible = upsample_map(generate_mask(grid, grid, ratio, seed).visible, 16, 16)
        profile = erosion_profile("sparse", visible, depth)
        self.assertEqual(profile, [visible.mean()] * depth)

    def test_en_zakrit_piksel(self):
        """En sam zakrit piksel gosta konvolucija takoj zapolni, redka ne"""
        visible = np.ones((33, 33), dtype=bool)
        visible[16, 16] = False
        self.assertEqual(erosion_profile("dense", visible, 1), [1.0])
        (sparse,) = erosion_profile("sparse", visible, 1)
        self.assertAlmostEqual(sparse, 1 - 1 / 33**2, delta=1e-15)

    def test_all_masked(self):
        visible = np.zeros((8, 8), dtype=bool)
        self.assertEqual(erosion_profile("dense", visible, 4), [0.0] * 4)
        self.assertEqual(erosion_profile("sparse", visible, 4), [0.0] * 4)

    def test_gosta_rast_do_nasicenja(self):
        """Delež neničelnih položajev pri gosti konvoluciji strogo raste do ena"""
        masks = generate_masks(5, 4, 4, 0.6, 11)
        for visible in masks.visible:
            profile = erosion_profile("dense", upsample_map(visible, 32, 32), 40)
            saturated = profile.index(1.0)
            growing = profile[: saturated + 1]
            self.assertTrue(all(a < b for a, b in zip(growing, growing[1:])))
            self.assertEqual(profile[saturated:], [1.0] * (40 - saturated))
            self.assertGreater(profile[0], visible.mean())

    def test_table(self):
        visible = upsample_map(generate_mask(4, 4, 0.5, 0).visible, 16, 16)
        table = erosion_table(visible, 8)
        self.assertEqual([row[0] for row in table], list(range(1, 9)))
        self.assertTrue(all(row[2] == 0.5 for row in table))

    def test_invalid(self):
        with self.assertRaises(DiagnosticError):
            erosion_profile("dilated", np.ones((4, 4), dtype=bool), 1)
        with self.assertRaises(DiagnosticError):
            erosion_profile("dense", np.ones((4, 4), dtype=bool), 0)


class DiagnoseCommandTest(SimpleTestCase):
    def setUp(self):
        self.directory = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.directory)
        self.out = io.StringIO()

    def test_erosion(self):
        output = self.directory / "erosion.csv"
        plot = self.directory / "erosion.dat"
        call_command(
            "diagnose",
            "erosion",
            "--depth",
            "8",
            "--output",
            str(output),
            "--gnuplot",
            str(plot),
            stdout=self.out,
        )
        header, rows = read_csv(output)
        self.assertEqual(header, ("layer", "dense", "sparse"))
        self.assertEqual(len(rows), 8)
        self.assertEqual(len({row[2] for row in rows}), 1)
        self.assertIn("# dense", plot.read_text())

    def test_shift(self):
        output = self.directory / "shift.csv"
        options = ["--images", "8", "--image-size", "32", "--widths", "2,2,2,2"]
        call_command("diagnose", "shift", *options, "--output", str(output), stdout=self.out)
        header, rows = read_csv(output)
        self.assertEqual(header[:2], ("arm", "shift"))
        self.assertEqual([row[0] for row in rows], ["sparse", "dense"])
        lines = self.out.getvalue().splitlines()
        self.assertTrue(lines[0].startswith("sparse shift="))
        self.assertTrue(lines[1].startswith("dense shift="))
        self.assertIn("distribution", lines[2])

    def test_usage_errors(self):
        with self.assertRaises(CommandError) as context:
            call_command("diagnose", "spectrum", stdout=self.out)
        self.assertEqual(context.exception.returncode, 1)
        with self.assertRaises(CommandError) as context:
            call_command("diagnose", "erosion", "--depth", "0", stdout=self.out)
        self.assertEqual(context.exception.returncode, 1)

    def test_bad_mask_size(self):
        with self.assertRaises(CommandError) as context:
            options = ["--grid", "3", "--size", "16", "--output", str(self.directory / "x.csv")]
            call_command("diagnose", "erosion", *options, stdout=self.out)
        self.assertEqual(context.exception.returncode, 3)

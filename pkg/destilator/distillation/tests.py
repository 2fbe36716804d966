import io
import json
import math
import shutil
import tempfile
from pathlib import Path

import numpy as np
import sympy
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase, TestCase
from hypothesis import given, settings
from hypothesis import strategies as st
from model_bakery import baker
from masking.masks import full_mask, generate_masks, hierarchy_for_images
from sparse.kernels import SparseError
from students.network import StudentConfig, StudentModel
from teachers.embeddings import export_teacher_embeddings
from teachers.encoder import TeacherError, ToyTeacher
from tensors import ntnsr, ops
from tensors.autodiff import Tensor, backward, recording
from tensors.gradcheck import grad_check
from tensors.layers import parameter
from tensors.optim import OptimizerState, optimizer_step, zero_grad

from .ablation import ABLATION_HEADER, ArmResult, verdicts
from .checkpoints import CheckpointError, load_checkpoint, load_student, save_checkpoint
from .datasets import (
    IMAGES_FILE,
    LABELS_FILE,
    Dataset,
    DatasetError,
    augment,
    epoch_order,
    load_dataset,
    write_dataset,
)
from .forms import ConfigError, parse_config, read_config
from .losses import LossBreakdown, LossError, feature_mse, pearson_loss, total_loss
from .management.base import exit_codes
from .models import DistillConfig, RunManifest
from .probe import BackboneFeatures, ProbeConfig, ProbeError, linear_probe
from .queue import (
    MemoryQueue,
    ProtocolViolation,
    QueueError,
    SimilarityError,
    StepProtocol,
    enqueue_batch,
    student_similarity,
    teacher_similarity,
)
from .schedule import LRSchedule, lr_at
from .trainer import (
    METRICS_FILE,
    NumericFailure,
    RunMetrics,
    StepRecord,
    Trainer,
    ablation_configs,
)


def unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


def random_units(rng, count, dim):
    vectors = rng.normal(size=(count, dim))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


class MemoryQueueTest(SimpleTestCase):
    def test_najstarejsi_izpade(self):
        """Polna vrsta ob dodajanju zavrže najstarejši vnos"""
        queue = MemoryQueue(3, 2)
        for angle in (0.1, 0.2, 0.3, 0.4):
            queue.enqueue(unit(angle))
        np.testing.assert_array_equal(
            queue.snapshot(), [unit(0.2), unit(0.3), unit(0.4)]
        )
        self.assertTrue(queue.full)

    def test_batch_into_empty_queue(self):
        queue = MemoryQueue(5, 2)
        enqueue_batch(queue, [unit(0.0), unit(1.0)])
        self.assertEqual(len(queue), 2)
        self.assertEqual(queue.fill, 0.4)

    def test_order_within_batch(self):
        queue = MemoryQueue(4, 4)
        queue.enqueue(np.eye(4)[[2, 0, 3]])
        np.testing.assert_array_equal(queue.snapshot(), np.eye(4)[[2, 0, 3]])

    def test_rejects_non_unit_vectors(self):
        queue = MemoryQueue(3, 2)
        with self.assertRaises(QueueError):
            queue.enqueue([[1.01, 0.0]])
        queue.enqueue([[1.0005, 0.0]])
        self.assertEqual(len(queue), 1)

    def test_rejects_wrong_dim(self):
        with self.assertRaises(QueueError):
            MemoryQueue(3, 2).enqueue(np.ones(3) / np.sqrt(3))

    def test_state_round_trip(self):
        queue = MemoryQueue(3, 2)
        queue.enqueue([unit(a) for a in (0.1, 0.2, 0.3, 0.4, 0.5)])
        restored = MemoryQueue.from_state(**queue.state())
        np.testing.assert_array_equal(restored.snapshot(), queue.snapshot())
        restored.enqueue(unit(0.6))
        queue.enqueue(unit(0.6))
        np.testing.assert_array_equal(restored.snapshot(), queue.snapshot())

    def test_invalid_state(self):
        with self.assertRaises(QueueError):
            MemoryQueue.from_state(np.zeros((3, 2)), cursor=3, count=0)

    def test_thousand_operations_against_list_model(self):
        rng = np.random.default_rng(0)
        queue, model = MemoryQueue(7, 2), []
        for tag in range(1000):
            if rng.random() < 0.2:
                np.testing.assert_array_equal(
                    queue.snapshot(), np.array(model).reshape(-1, 2)
                )
            vector = unit(tag * 0.001)
            queue.enqueue(vector)
            model = (model + [vector])[-7:]
        np.testing.assert_array_equal(queue.snapshot(), np.array(model))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 9), st.lists(st.integers(1, 4), min_size=1, max_size=40))
    def test_fifo_matches_list_model(self, capacity, batches):
        queue, model, tag = MemoryQueue(capacity, 2), [], 0
        for size in batches:
            batch = [unit(0.01 * (tag + i)) for i in range(size)]
            tag += size
            queue.enqueue(batch)
            model = (model + batch)[-capacity:]
            self.assertEqual(len(queue), len(model))
            np.testing.assert_array_equal(queue.snapshot(), np.array(model))


class SimilarityTest(SimpleTestCase):
    def test_identical_entries_give_uniform(self):
        t = unit(0.3)
        p = teacher_similarity(t, np.array([t, t, t, t]), 0.7)
        np.testing.assert_allclose(p.probs.data, 0.25)

    def test_two_entry_softmax(self):
        p = teacher_similarity(unit(0.0), np.array([unit(0.0), unit(np.pi / 2)]), 1.0)
        np.testing.assert_allclose(p.probs.data, [0.7311, 0.2689], atol=1e-4)
        exact = sympy.exp(1) / (sympy.exp(1) + 1)
        self.assertAlmostEqual(p.probs.data[0], float(exact), places=14)

    def test_sharp_temperature_concentrates_on_self(self):
        entries = np.eye(8)
        p = teacher_similarity(entries[0], entries, 0.009)
        self.assertGreater(p.probs.data[0], 0.999)

    def test_self_entry_is_largest(self):
        entries = random_units(np.random.default_rng(1), 6, 5)
        p = teacher_similarity(entries[2], entries, 0.1)
        self.assertEqual(int(np.argmax(p.probs.data)), 2)

    def test_student_equal_to_teacher(self):
        entries = random_units(np.random.default_rng(2), 5, 4)
        t = entries[1]
        teacher = teacher_similarity(t, entries, 0.2)
        student = student_similarity(t.copy(), t, entries, 0.2)
        np.testing.assert_allclose(student.probs.data, teacher.probs.data, atol=1e-12)

    def test_orthogonal_student_gives_uniform(self):
        entries = np.eye(4)[:3]
        p = student_similarity(np.eye(4)[3], entries[0], entries, 0.05)
        np.testing.assert_allclose(p.probs.data, 1 / 3)

    def test_matches_direct_formula_in_both_modes(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            entries = random_units(rng, 3, 6)
            s, t = random_units(rng, 2, 6)
            tau = 0.5
            numerators = np.exp([s @ q / tau for q in entries])
            consistent = numerators / numerators.sum()
            as_written = numerators / sum(math.exp(t @ q / tau) for q in entries)
            np.testing.assert_allclose(
                student_similarity(s, t, entries, tau).probs.data, consistent, atol=1e-10
            )
            np.testing.assert_allclose(
                student_similarity(s, t, entries, tau, "as_written").probs.data,
                as_written,
                atol=1e-10,
            )
            teacher = np.exp([t @ q / tau for q in entries])
            np.testing.assert_allclose(
                teacher_similarity(t, entries, tau).probs.data,
                teacher / teacher.sum(),
                atol=1e-10,
            )

    def test_porazdelitev_sledi_vrstnemu_redu(self):
        """Porazdelitev študenta se sešteje v ena in sledi permutaciji vrste"""
        rng = np.random.default_rng(4)
        entries = random_units(rng, 6, 3)
        s, t = random_units(rng, 2, 3)
        order = rng.permutation(6)
        p = student_similarity(s, t, entries, 0.3).probs.data
        permuted = student_similarity(s, t, entries[order], 0.3).probs.data
        self.assertAlmostEqual(p.sum(), 1.0, places=12)
        np.testing.assert_allclose(permuted, p[order], atol=1e-12)

    def test_batched_rows(self):
        rng = np.random.default_rng(5)
        entries = random_units(rng, 4, 3)
        s = random_units(rng, 2, 3)
        batched = student_similarity(s, entries[:2], entries, 0.3).probs.data
        for row in range(2):
            single = student_similarity(s[row], entries[row], entries, 0.3).probs.data
            np.testing.assert_allclose(batched[row], single, atol=1e-12)

    def test_gradient_le_v_studenta(self):
        """Gradient podobnosti teče le v vložitve študenta"""
        rng = np.random.default_rng(6)
        entries = random_units(rng, 5, 4)
        weights = rng.normal(size=5)
        for mode in ("consistent", "as_written"):
            s = Tensor(random_units(rng, 1, 4)[0], requires_grad=True)
            report = grad_check(
                lambda: (student_similarity(s, entries[0], entries, 0.5, mode).probs * weights).sum(),
                {"s": s},
            )
            self.assertLess(report.max_rel_error, 1e-6, mode)

    def test_errors(self):
        entries = np.eye(3)
        with self.assertRaises(SimilarityError):
            teacher_similarity(entries[0], entries, 0.0)
        with self.assertRaises(SimilarityError):
            teacher_similarity(entries[0], MemoryQueue(4, 3), 0.1)
        with self.assertRaises(SimilarityError):
            student_similarity(entries[0], entries[0], entries, -1.0)
        with self.assertRaises(SimilarityError):
            student_similarity(entries[0], entries[0], entries, 0.1, "printed")


class StepProtocolTest(SimpleTestCase):
    def test_full_step(self):
        protocol = StepProtocol()
        for _ in range(2):
            protocol.begin()
            for phase in StepProtocol.PHASES:
                protocol.enter(phase)
            self.assertTrue(protocol.complete)

    def test_podobnost_pred_dodajanjem(self):
        """Podobnosti študenta ni mogoče računati pred dodajanjem v vrsto"""
        protocol = StepProtocol()
        protocol.begin()
        for phase in ("augment", "teacher", "student", "feature_loss"):
            protocol.enter(phase)
        with self.assertRaises(AssertionError):
            protocol.enter("student_similarity")

    def test_new_step_during_step(self):
        protocol = StepProtocol()
        protocol.begin()
        protocol.enter("augment")
        with self.assertRaises(ProtocolViolation):
            protocol.begin()

    def test_ucitelj_in_student_dobita_isto_masko(self):
        """Študent mora dobiti isto hierarhijo mask kot učitelj"""
        shared = hierarchy_for_images(generate_masks(2, 2, 2, 0.5, 0), 64)
        other = hierarchy_for_images(full_mask(2, 2, 2), 64)
        protocol = StepProtocol()
        protocol.begin()
        with self.assertRaises(ProtocolViolation):
            protocol.check_student_mask(shared)
        self.assertIs(protocol.teacher_mask(shared), shared.grid)
        self.assertIs(protocol.check_student_mask(shared), shared)
        with self.assertRaises(ProtocolViolation):
            protocol.check_student_mask(other)


class PearsonLossTest(SimpleTestCase):
    def test_identical(self):
        p = np.array([0.1, 0.5, 0.15, 0.25])
        self.assertAlmostEqual(pearson_loss(p, p).item(), -1.0, places=12)

    def test_anti_correlated(self):
        loss = pearson_loss([0.5, 0.3, 0.2], [0.2, 0.4, 0.5])
        self.assertAlmostEqual(loss.item(), 1.0, places=12)

    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(0, 2**32 - 1),
        st.floats(0.1, 10.0),
        st.floats(-1.0, 1.0),
    )
    def test_positive_affine_invariance(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        p, q = rng.random(8), rng.random(8)
        self.assertAlmostEqual(
            pearson_loss(p * scale + shift, q).item(), pearson_loss(p, q).item(), delta=1e-9
        )
        self.assertAlmostEqual(
            pearson_loss(p, q * scale + shift).item(), pearson_loss(p, q).item(), delta=1e-9
        )

    def test_matches_covariance_formula(self):
        rng = np.random.default_rng(7)
        p, q = rng.random(16), rng.random(16)
        pc, qc = p - p.mean(), q - q.mean()
        rho = (pc * qc).sum() / math.sqrt((pc**2).sum() * (qc**2).sum())
        self.assertAlmostEqual(pearson_loss(p, q).item(), -rho, delta=1e-10)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        p = rng.random(16)
        q = Tensor(rng.random(16), requires_grad=True)
        report = grad_check(lambda: pearson_loss(p, q), {"q": q})
        self.assertLess(report.max_rel_error, 1e-6)

    def test_gradient_matches_symbolic_derivative(self):
        p = [sympy.Rational(1, 10), sympy.Rational(4, 10), sympy.Rational(2, 10), sympy.Rational(3, 10)]
        xs = sympy.symbols("x0:4")
        mean_p, mean_x = sum(p) / 4, sum(xs) / 4
        cov = sum((a - mean_p) * (b - mean_x) for a, b in zip(p, xs))
        rho = cov / sympy.sqrt(
            sum((a - mean_p) ** 2 for a in p) * sum((b - mean_x) ** 2 for b in xs)
        )
        point = {x: v for x, v in zip(xs, (0.3, 0.1, 0.45, 0.15))}
        q = Tensor(np.array([0.3, 0.1, 0.45, 0.15]), requires_grad=True)
        with recording():
            backward(pearson_loss(np.array(p, dtype=float), q))
        expected = [float(sympy.diff(-rho, x).subs(point)) for x in xs]
        np.testing.assert_allclose(q.grad, expected, atol=1e-10)

    def test_teacher_side_is_detached(self):
        p = Tensor(np.array([0.1, 0.6, 0.3]), requires_grad=True)
        q = Tensor(np.array([0.2, 0.5, 0.3]), requires_grad=True)
        with recording():
            backward(pearson_loss(p, q))
        self.assertIsNone(p.grad)
        self.assertIsNotNone(q.grad)

    def test_errors(self):
        with self.assertRaises(LossError):
            pearson_loss([0.25] * 4, [0.1, 0.2, 0.3, 0.4])
        with self.assertRaises(LossError):
            pearson_loss([0.1, 0.2, 0.7], [0.5, 0.5])
        with self.assertRaises(LossError):
            pearson_loss([1.0], [1.0])


class FeatureMSETest(SimpleTestCase):
    def test_identical(self):
        tokens = np.random.default_rng(9).normal(size=(2, 4, 3))
        self.assertEqual(feature_mse(tokens, Tensor(tokens.copy())).item(), 0.0)

    def test_constant_student(self):
        self.assertAlmostEqual(
            feature_mse(np.zeros((2, 3)), Tensor(np.full((2, 3), 1.5))).item(), 2.25
        )

    def test_matches_elementwise_mean(self):
        rng = np.random.default_rng(10)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        expected = sum((b[i, j] - a[i, j]) ** 2 for i in range(2) for j in range(3)) / 6
        self.assertAlmostEqual(feature_mse(a, Tensor(b)).item(), expected, delta=1e-12)

    def test_shape_mismatch(self):
        with self.assertRaises(LossError):
            feature_mse(np.zeros((2, 4, 3)), Tensor(np.zeros((2, 3, 4))))

    def test_gradient(self):
        rng = np.random.default_rng(11)
        target = rng.normal(size=(2, 3, 4))
        s = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        self.assertLess(grad_check(lambda: feature_mse(target, s), [s]).max_rel_error, 1e-6)


class TotalLossTest(SimpleTestCase):
    def test_weighted_sum(self):
        breakdown = LossBreakdown.combine(Tensor(-0.8), Tensor(0.3))
        self.assertAlmostEqual(breakdown.total, -0.5, places=12)
        self.assertFalse(breakdown.warmup)

    def test_ogrevanje_brez_podobnosti(self):
        """Med ogrevanjem vrste šteje le izguba značilk"""
        breakdown = LossBreakdown.combine(None, Tensor(0.3), (2.0, 1.0))
        self.assertEqual(breakdown.total, 0.3)
        self.assertEqual(breakdown.l_sim, 0.0)
        self.assertTrue(breakdown.warmup)

    def test_without_similarity_weight(self):
        rng = np.random.default_rng(12)
        entries = random_units(rng, 4, 3)
        p_t = teacher_similarity(entries[0], entries, 0.3)
        p_s = student_similarity(random_units(rng, 1, 3)[0], entries[0], entries, 0.3)
        tokens = rng.normal(size=(2, 3))
        student = Tensor(rng.normal(size=(2, 3)))
        breakdown = total_loss(p_t, p_s, tokens, student, (0.0, 1.0))
        self.assertEqual(breakdown.total, feature_mse(tokens, student).item())
        self.assertLessEqual(abs(breakdown.l_sim), 1.0)

    def test_non_finite(self):
        self.assertFalse(LossBreakdown(float("nan"), 0.1, 0.1).is_finite())

    def test_spust_strogo_zmanjsuje_izgubo(self):
        """Gradientni spust na fiksnem majhnem paketu vsak korak zmanjša skupno izgubo"""
        rng = np.random.default_rng(21)
        target = random_units(rng, 8, 4).reshape(2, 4, 4)
        teacher = target.mean(axis=1)
        teacher /= np.linalg.norm(teacher, axis=1, keepdims=True)
        entries = np.vstack([random_units(rng, 5, 4), teacher])
        tokens = parameter(target + 0.5 * rng.normal(size=target.shape))
        params = {"tokens": tokens}
        state = OptimizerState(lr=0.01, momentum=0.0, weight_decay=0.0, max_grad_norm=None)
        totals = []
        for _ in range(25):
            with recording():
                embedding = ops.l2_normalize(tokens.mean(axis=1), axis=-1)
                p_t = teacher_similarity(teacher, entries, 0.2)
                p_s = student_similarity(embedding, teacher, entries, 0.2)
                breakdown = total_loss(p_t, p_s, target, tokens)
                zero_grad(params)
                backward(breakdown.loss)
            optimizer_step(state, params)
            totals.append(breakdown.total)
        self.assertFalse(breakdown.warmup)
        self.assertTrue(all(b < a for a, b in zip(totals, totals[1:])), totals)


class ScheduleTest(SimpleTestCase):
    schedule = LRSchedule(base_lr=0.4, warmup_steps=10, total_steps=30)

    def test_key_points(self):
        self.assertEqual(lr_at(0, self.schedule), 0.0)
        self.assertEqual(lr_at(10, self.schedule), 0.4)
        self.assertAlmostEqual(lr_at(20, self.schedule), 0.2, delta=1e-9)
        self.assertAlmostEqual(lr_at(30, self.schedule), 0.0, delta=1e-12)

    def test_matches_closed_form(self):
        step = sympy.Symbol("step")
        warmup = sympy.Rational(2, 5) * step / 10
        cosine = sympy.Rational(1, 5) * (1 + sympy.cos(sympy.pi * (step - 10) / 20))
        for n in range(31):
            expected = (warmup if n < 10 else cosine).subs(step, n)
            self.assertAlmostEqual(lr_at(n, self.schedule), float(expected), delta=1e-12)

    def test_negative_step(self):
        with self.assertRaises(ValueError):
            lr_at(-1, self.schedule)

    def test_from_config(self):
        config = DistillConfig(learning_rate=0.1, warmup_epochs=2, epochs=6)
        self.assertEqual(
            LRSchedule.from_config(config, 5), LRSchedule(0.1, warmup_steps=10, total_steps=30)
        )


class DistillConfigTest(TestCase):
    def setUp(self):
        self.directory = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.directory)

    def test_text_round_trip_keeps_hash(self):
        config = baker.make(DistillConfig, widths="8,8,16,16", sparse=False, weight_decay=1e-4)
        path = self.directory / "run.ini"
        path.write_text(config.to_text())
        parsed = DistillConfig.from_file(path)
        self.assertEqual(parsed.config_hash(), config.config_hash())
        self.assertFalse(parsed.sparse)
        self.assertEqual(parsed.student_config().widths, (8, 8, 16, 16))

    def test_hash_follows_values(self):
        config = baker.make(DistillConfig)
        self.assertEqual(config.copy().config_hash(), config.config_hash())
        self.assertNotEqual(config.copy(temperature=0.1).config_hash(), config.config_hash())

    def test_missing_keys_take_defaults(self):
        config = parse_config("[train]\nepochs = 12\n")
        self.assertEqual(config.epochs, 12)
        self.assertEqual(config.batch_size, 32)
        self.assertTrue(config.sparse)

    def test_errors_name_section_line_and_field(self):
        text = "\n".join(
            [
                "[train]",
                "epochs = 10",
                "warmup_epochs = 20",
                "batch_size = many",
                "[distill]",
                "temperature = 0",
                "bogus = 1",
            ]
        )
        with self.assertRaises(ConfigError) as context:
            parse_config(text, "run.ini")
        located = {problem[:3] for problem in context.exception.problems}
        self.assertEqual(
            located,
            {
                ("train", 3, "warmup_epochs"),
                ("train", 4, "batch_size"),
                ("distill", 6, "temperature"),
                ("distill", 7, "bogus"),
            },
        )
        self.assertIn("run.ini:7 [distill] bogus: unknown key", str(context.exception))

    def test_unknown_section_and_bad_boolean(self):
        with self.assertRaises(ConfigError) as context:
            parse_config("[model]\nwidth = 3\n[student]\nsparse = maybe\nunet = no\n")
        located = {problem[:3] for problem in context.exception.problems}
        self.assertEqual(located, {("model", 1, None), ("student", 4, "sparse")})

    def test_syntax_error(self):
        with self.assertRaisesMessage(ConfigError, "run.ini:3"):
            parse_config("[train]\nepochs = 1\nepochs = 2\n", "run.ini")

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            read_config(self.directory / "missing.ini")

    def test_file_teacher_needs_path(self):
        with self.assertRaises(ConfigError):
            parse_config("[teacher]\nteacher_kind = file\n")

    def test_ablation_arms(self):
        arms = ablation_configs(baker.make(DistillConfig, name="base"))
        self.assertEqual(len(arms), 7)
        self.assertFalse(arms["without_unet"].unet)
        self.assertFalse(arms["without_sparse"].sparse)
        self.assertEqual(arms["without_similarity"].weights, (0.0, 1.0))
        self.assertEqual(
            (arms["only_sparse"].sparse, arms["only_sparse"].unet, arms["only_sparse"].weight_sim),
            (True, False, 0.0),
        )
        self.assertEqual(len({arm.config_hash() for arm in arms.values()}), 7)


class RunManifestTest(TestCase):
    def test_record_writes_json_once(self):
        directory = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, directory)
        config = DistillConfig(name="poskus")
        manifest = RunManifest.record(config, "abc123", directory)
        self.assertIsNotNone(config.pk)
        written = json.loads((directory / "manifest.json").read_text())
        self.assertEqual(written["config_hash"], config.config_hash())
        self.assertEqual(written["dataset_checksum"], "abc123")
        self.assertEqual(config.runs.get(), manifest)

    def test_immutable(self):
        manifest = baker.make(RunManifest)
        manifest.output_dir = "elsewhere"
        with self.assertRaises(ValueError):
            manifest.save()


class DatasetTest(SimpleTestCase):
    def setUp(self):
        self.directory = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.directory)

    def test_shapes_and_range(self):
        dataset = write_dataset(self.directory / "data", 10, 2, image_size=64, seed=1)
        self.assertEqual(ntnsr.read_tensor(self.directory / "data" / IMAGES_FILE).shape, (10, 3, 64, 64))
        self.assertEqual(ntnsr.read_tensor(self.directory / "data" / LABELS_FILE).shape, (10,))
        self.assertGreaterEqual(dataset.images.min(), 0.0)
        self.assertLessEqual(dataset.images.max(), 1.0)
        self.assertEqual(np.bincount(dataset.labels).tolist(), [5, 5])
        self.assertEqual((dataset.train_count, dataset.val_count), (8, 2))

    def test_same_seed_same_files(self):
        first = write_dataset(self.directory / "a", 6, 3, image_size=32, seed=4)
        second = write_dataset(self.directory / "b", 6, 3, image_size=32, seed=4)
        self.assertEqual(first.checksum, second.checksum)
        third = write_dataset(self.directory / "c", 6, 3, image_size=32, seed=5)
        self.assertNotEqual(first.checksum, third.checksum)

    def test_invalid_counts(self):
        with self.assertRaises(DatasetError):
            write_dataset(self.directory / "x", 10, 0)
        with self.assertRaises(DatasetError):
            write_dataset(self.directory / "x", 2, 3)

    def test_non_empty_directory_needs_force(self):
        write_dataset(self.directory, 4, 2, image_size=32)
        with self.assertRaises(DatasetError):
            write_dataset(self.directory, 4, 2, image_size=32)
        write_dataset(self.directory, 4, 2, image_size=32, force=True)

    def test_missing_path_is_named(self):
        with self.assertRaisesMessage(DatasetError, "nowhere"):
            load_dataset(self.directory / "nowhere")

    def test_epoch_order(self):
        batches = epoch_order(10, 3, seed=2, epoch=1)
        self.assertEqual([len(b) for b in batches], [3, 3, 3])
        self.assertEqual(len(set(np.concatenate(batches))), 9)
        np.testing.assert_array_equal(
            np.concatenate(batches), np.concatenate(epoch_order(10, 3, seed=2, epoch=1))
        )
        with self.assertRaises(DatasetError):
            epoch_order(2, 3, 0, 0)

    def test_augment(self):
        images = np.random.default_rng(13).random((4, 3, 32, 32))
        same = augment(images, np.random.default_rng(0), crop=False, flip=False, jitter=False)
        np.testing.assert_array_equal(same, images)
        out = augment(images, np.random.default_rng(0))
        self.assertEqual(out.shape, images.shape)
        self.assertTrue(((out >= 0) & (out <= 1)).all())
        np.testing.assert_array_equal(out, augment(images, np.random.default_rng(0)))


def tiny_run_config(output_dir, **changes):
    options = dict(
        image_size=64,
        widths="2,2,2,2",
        blocks=1,
        embed_dim=4,
        patch_size=16,
        teacher_depth=1,
        teacher_heads=1,
        epochs=4,
        warmup_epochs=1,
        batch_size=2,
        learning_rate=0.05,
        queue_size=4,
        mask_ratio=0.5,
        temperature=0.2,
        checkpoint_every=0,
        output_dir=str(output_dir),
    )
    options.update(changes)
    return DistillConfig(**options)


class TrainerTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.root = Path(tempfile.mkdtemp())
        cls.dataset = write_dataset(cls.root / "data", 12, 2, image_size=64, seed=3)
        cls.small = write_dataset(cls.root / "data32", 12, 2, image_size=32, seed=3)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root)
        super().tearDownClass()

    def trainer(self, name="run", **changes):
        return Trainer(tiny_run_config(self.root / name, **changes), self.dataset)

    def test_runs_are_deterministic(self):
        first, second = self.trainer("a"), self.trainer("b")
        for _ in range(10):
            first.distill_step()
            second.distill_step()
        self.assertEqual(
            [r.without_timing() for r in first.metrics],
            [r.without_timing() for r in second.metrics],
        )
        for name, param in first.params.items():
            np.testing.assert_array_equal(param.data, second.params[name].data, name)
        self.assertEqual([r.step for r in first.metrics], list(range(10)))

    def test_izguba_znacilk_pada_brez_maske(self):
        """Brez zakrivanja izguba značilk pada, merjeno s povprečjem 10 korakov"""
        trainer = self.trainer(
            "nomask", mask_ratio=0.0, epochs=12, crop=False, flip=False, jitter=False
        )
        for _ in range(40):
            trainer.distill_step()
        l_feat = [record.l_feat for record in trainer.metrics]
        self.assertLess(np.mean(l_feat[-10:]), np.mean(l_feat[:10]), l_feat)

    def test_queue_warmup_then_similarity(self):
        trainer = self.trainer()
        warmup = trainer.distill_step()
        self.assertTrue(warmup.warmup)
        self.assertEqual(warmup.total, warmup.l_feat)
        trainer.distill_step()
        active = trainer.distill_step()
        self.assertFalse(active.warmup)
        self.assertLessEqual(abs(active.l_sim), 1.0)
        self.assertEqual(trainer.metrics[-1].queue_fill, 1.0)

    def test_nicelne_utezi_izgub(self):
        """Z ničelnimi utežmi izgub in brez razpada uteži se parametri ne spremenijo"""
        trainer = self.trainer(weight_sim=0.0, weight_feat=0.0, weight_decay=0.0)
        before = {name: param.data.copy() for name, param in trainer.params.items()}
        for _ in range(3):
            trainer.distill_step()
        for name, param in trainer.params.items():
            np.testing.assert_array_equal(param.data, before[name], name)

    def test_nan_ustavi_ucenje(self):
        """Neskončna vrednost ustavi učenje in v dnevnik zapiše korak"""
        trainer = self.trainer()
        trainer.distill_step()
        trainer.student.head.weight.data[:] = np.nan
        with self.assertLogs("distillation.trainer", level="ERROR") as logs:
            with self.assertRaises(NumericFailure) as context:
                trainer.distill_step()
        self.assertEqual(context.exception.step, 1)
        self.assertIn("step=1", logs.output[0])
        self.assertEqual(len(trainer.metrics), 1)

    def test_protocol_holds_for_hundred_steps(self):
        config = tiny_run_config(self.root / "small", image_size=32, patch_size=8, epochs=20)
        trainer = Trainer(config, self.small)
        for _ in range(100):
            trainer.distill_step()
            self.assertTrue(trainer.protocol.complete)
        self.assertEqual(trainer.step, 100)

    def test_nadaljevanje_je_enako_neprekinjenemu(self):
        """Nadaljevanje s kontrolne točke da enake metrike kot neprekinjen zagon"""
        uninterrupted = self.trainer("whole")
        for _ in range(10):
            uninterrupted.distill_step()
        first = self.trainer("split")
        for _ in range(5):
            first.distill_step()
        directory = save_checkpoint(first)
        resumed = self.trainer("split")
        load_checkpoint(resumed, directory)
        self.assertEqual(resumed.step, 5)
        for _ in range(5):
            resumed.distill_step()
        self.assertEqual(
            [r.without_timing() for r in resumed.metrics],
            [r.without_timing() for r in uninterrupted.metrics[5:]],
        )
        for name, param in uninterrupted.params.items():
            np.testing.assert_array_equal(param.data, resumed.params[name].data, name)

    def test_checkpoint_mismatches(self):
        trainer = self.trainer("saved")
        trainer.distill_step()
        directory = save_checkpoint(trainer)
        with self.assertRaisesMessage(CheckpointError, "widths, activation"):
            load_checkpoint(self.trainer(widths="3,3,3,3", activation="gelu"), directory)
        with self.assertRaisesMessage(CheckpointError, "config hash"):
            load_checkpoint(self.trainer(temperature=0.3), directory)
        student = load_student(directory)
        np.testing.assert_array_equal(student.head.weight.data, trainer.student.head.weight.data)

    def test_corrupt_checkpoint(self):
        trainer = self.trainer("corrupt")
        directory = save_checkpoint(trainer)
        (directory / "checkpoint.json").write_text('{"step": 0,\n  "layouts": ')
        with self.assertRaisesMessage(CheckpointError, "checkpoint.json:2"):
            load_checkpoint(trainer, directory)
        directory = save_checkpoint(trainer)
        blob = (directory / "params.ntnsr").read_bytes()
        (directory / "params.ntnsr").write_bytes(blob[:-8])
        with self.assertRaises(CheckpointError):
            load_checkpoint(trainer, directory)
        with self.assertRaises(CheckpointError):
            load_checkpoint(trainer, self.root / "nothing")

    def test_run_writes_metrics_and_checkpoints(self):
        trainer = self.trainer("written", checkpoint_every=2)
        metrics = trainer.run(steps=3)
        self.assertEqual(len(metrics), 3)
        stored = RunMetrics.read(trainer.output_dir / METRICS_FILE)
        self.assertEqual(
            [r.without_timing() for r in stored], [r.without_timing() for r in metrics]
        )
        description = json.loads(
            (trainer.output_dir / "checkpoint" / "checkpoint.json").read_text()
        )
        self.assertEqual(description["step"], 3)

    def test_metrics_steps_must_increase(self):
        metrics = RunMetrics([StepRecord(0, 0.0, 0.0, 1.0, 1.0, 0.5, 3.0)])
        with self.assertRaises(ValueError):
            metrics.append(StepRecord(0, 0.1, 0.0, 0.9, 0.9, 1.0, 3.0))
        metrics.append(StepRecord(4, 0.1, -0.2, 0.9, 0.7, 1.0, 3.0))
        metrics.truncate(4)
        self.assertEqual([record.step for record in metrics], [0])

    def test_file_teacher(self):
        config = tiny_run_config(self.root / "file")
        export_teacher_embeddings(
            ToyTeacher(config.teacher_config()),
            self.dataset.images,
            self.root / "tokens",
            self.dataset.checksum,
        )
        trainer = self.trainer(
            "file", teacher_kind="file", teacher_path=str(self.root / "tokens")
        )
        for _ in range(3):
            self.assertTrue(np.isfinite(trainer.distill_step().total))
        with self.assertRaises(TeacherError):
            self.trainer("file", teacher_kind="file", teacher_path=str(self.root / "none"))

    def test_total_loss_gradients(self):
        trainer = self.trainer(activation="gelu", queue_size=6)
        student = trainer.student
        rng = np.random.default_rng(14)
        images = trainer.dataset.train_images[:2]
        hierarchy = student.full_hierarchy(2)
        target = trainer.teacher(images, full_mask(2, 2, 2))
        trainer.queue.enqueue(random_units(rng, 4, 4))
        trainer.queue.enqueue(target.instance_embedding)

        def loss():
            tokens = student(images, hierarchy)
            embedding = ops.l2_normalize(tokens.mean(axis=1), axis=-1)
            p_t = teacher_similarity(target.instance_embedding, trainer.queue, 0.2)
            p_s = student_similarity(embedding, target.instance_embedding, trainer.queue, 0.2)
            return total_loss(p_t, p_s, target.tokens, tokens).loss

        params = {
            name: param
            for name, param in student.named_parameters().items()
            if name in ("stem.0.conv.weight", "projections.3.weight", "head.weight", "head.bias")
        }
        self.assertEqual(len(params), 4)
        # gradiente pod 1e-3 preverimo absolutno, z napako največ 1e-7
        report = grad_check(loss, params, sample=8, floor=1e-3)
        self.assertLess(report.max_rel_error, 1e-4, report.per_param)


def constant_dataset(classes, per_class_train=10, per_class_val=2):
    count = classes * (per_class_train + per_class_val)
    labels = np.arange(count) % classes
    images = np.broadcast_to(
        (labels / classes)[:, None, None, None], (count, 3, 32, 32)
    ).copy()
    return Dataset(images, labels, classes, train_count=classes * per_class_train)


def one_hot_features(classes):
    def featurize(images):
        labels = np.rint(np.asarray(images)[:, 0, 0, 0] * classes).astype(int)
        return Tensor(np.eye(classes)[labels])

    return featurize


class ProbeTest(SimpleTestCase):
    def test_one_hot_features_are_separable(self):
        dataset = constant_dataset(4)
        report = linear_probe(one_hot_features(4), dataset, ProbeConfig(epochs=40, batch_size=8))
        self.assertEqual(report.top1, 1.0)
        self.assertIsNone(report.top5)
        self.assertEqual((report.train_count, report.val_count), (40, 8))

    def test_top5_with_many_classes(self):
        dataset = constant_dataset(7)
        report = linear_probe(one_hot_features(7), dataset, ProbeConfig(epochs=40, batch_size=7))
        self.assertEqual(report.top1, 1.0)
        self.assertEqual(report.top5, 1.0)

    def test_labels_out_of_range(self):
        dataset = constant_dataset(3)
        broken = Dataset(dataset.images, dataset.labels + 1, 3, dataset.train_count)
        with self.assertRaises(ProbeError):
            linear_probe(one_hot_features(4), broken)

    def test_backbone_probe_is_deterministic(self):
        directory = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, directory)
        dataset = write_dataset(directory, 16, 2, image_size=32, seed=2)
        student = StudentModel(
            StudentConfig(widths=(2, 2, 2, 2), blocks=1, image_size=32, embed_dim=4, patch_size=8)
        )
        cfg = ProbeConfig(epochs=3, batch_size=4, hidden=8)
        first = linear_probe(BackboneFeatures(student), dataset, cfg)
        second = linear_probe(BackboneFeatures(student), dataset, cfg)
        self.assertEqual(first, second)
        finetune = ProbeConfig(epochs=1, batch_size=4, features="encoder", full_finetune=True)
        encoder = linear_probe(BackboneFeatures(student, "encoder"), dataset, finetune)
        self.assertTrue(0.0 <= encoder.top1 <= 1.0)

    def test_unknown_features(self):
        with self.assertRaises(ProbeError):
            ProbeConfig(features="head")


class AblationTest(SimpleTestCase):
    def test_ocena_po_semenih(self):
        """Polna različica mora prehiteti naključno hrbtenico in vse ostale različice"""
        results = [
            ArmResult(0, "full", 0.80, None, 10),
            ArmResult(0, "only_unet", 0.70, None, 10),
            ArmResult(0, "random", 0.50, None, 0),
            ArmResult(1, "full", 0.60, None, 10),
            ArmResult(1, "without_sparse", 0.65, None, 10),
            ArmResult(1, "random", 0.58, None, 0),
        ]
        first, second = verdicts(results)
        self.assertEqual(first.seed, 0)
        self.assertAlmostEqual(first.gain, 0.30)
        self.assertTrue(first.passed)
        self.assertEqual(second.beaten_by, ("without_sparse",))
        self.assertFalse(second.passed)

    def test_missing_full_arm(self):
        (verdict,) = verdicts([ArmResult(3, "only_sparse", 0.4, None, 5)])
        self.assertIsNone(verdict.gain)
        self.assertFalse(verdict.passed)

    def test_rows_leave_missing_top5_empty(self):
        self.assertEqual(ArmResult(0, "random", 0.5, None, 0).as_row(), (0, "random", 0.5, "", 0))


class ExitCodeTest(SimpleTestCase):
    def test_izhodne_kode_napak(self):
        """Napake izgub, vrste in redkih operacij dobijo izhodno kodo namesto sledi sklada"""
        cases = [
            (QueueError("queue"), 3),
            (SparseError("sparse"), 3),
            (LossError("constant"), 4),
            (SimilarityError("temperature"), 4),
        ]
        for error, code in cases:
            with self.assertRaises(CommandError) as context:
                with exit_codes():
                    raise error
            self.assertEqual(context.exception.returncode, code, type(error).__name__)

    def test_programming_errors_pass_through(self):
        with self.assertRaises(ProtocolViolation):
            with exit_codes():
                raise ProtocolViolation("phase")


class CommandTest(TestCase):
    def setUp(self):
        self.root = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.root)
        self.out = io.StringIO()

    def write_config(self, dataset, **extra):
        lines = [
            "[data]",
            f"dataset = {dataset}",
            "[student]",
            "widths = 2,2,2,2",
            "blocks = 1",
            "[teacher]",
            "embed_dim = 4",
            "teacher_depth = 1",
            "[train]",
            "epochs = 2",
            "warmup_epochs = 1",
            "batch_size = 2",
            "[distill]",
            "queue_size = 4",
            "temperature = 0.2",
            "[run]",
            f"output_dir = {self.root / 'run'}",
            "checkpoint_every = 2",
        ]
        lines += [f"{key} = {value}" for key, value in extra.items()]
        path = self.root / "run.ini"
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_gen_data(self):
        call_command("gen_data", str(self.root / "data"), "--n", "10", "--classes", "2", stdout=self.out)
        self.assertEqual(load_dataset(self.root / "data").images.shape, (10, 3, 64, 64))
        with self.assertRaises(CommandError) as context:
            call_command("gen_data", str(self.root / "data"), "--n", "10", stdout=self.out)
        self.assertEqual(context.exception.returncode, 3)
        with self.assertRaises(CommandError) as context:
            call_command("gen_data", str(self.root / "x"), "--classes", "0", stdout=self.out)
        self.assertEqual(context.exception.returncode, 3)

    def test_distill_resume_and_probe(self):
        write_dataset(self.root / "data", 12, 2, image_size=64, seed=0)
        config = self.write_config(self.root / "data")
        call_command("distill", str(config), "--steps", "3", stdout=self.out)
        run = self.root / "run"
        self.assertEqual(len(RunMetrics.read(run / METRICS_FILE)), 3)
        self.assertTrue((run / "manifest.json").exists())
        self.assertEqual(RunManifest.objects.count(), 1)

        call_command("distill", str(config), "--resume", "--steps", "5", stdout=self.out)
        self.assertEqual([r.step for r in RunMetrics.read(run / METRICS_FILE)], list(range(5)))
        self.assertEqual(RunManifest.objects.count(), 1)

        call_command(
            "probe", str(run / "checkpoint"), str(self.root / "data"), "--epochs", "2", stdout=self.out
        )
        report = (run / "checkpoint" / "probe.csv").read_text().splitlines()
        self.assertEqual(report[0], "arm,top1,top5")
        self.assertEqual([line.split(",")[0] for line in report[1:]], ["distilled", "random"])

    def test_tabela_ablacij(self):
        """Ukaz ablate za vsako seme nauči izbrane različice in doda naključno hrbtenico"""
        write_dataset(self.root / "data", 12, 2, image_size=64, seed=0)
        config = self.write_config(self.root / "data")
        call_command(
            "ablate",
            str(config),
            "--seeds", "0",
            "--arms", "full,only_unet",
            "--steps", "2",
            "--probe-epochs", "2",
            stdout=self.out,
        )
        rows = (self.root / "run" / "ablation.csv").read_text().splitlines()
        self.assertEqual(rows[0], ",".join(ABLATION_HEADER))
        self.assertEqual([row.split(",")[1] for row in rows[1:]], ["full", "only_unet", "random"])
        self.assertTrue((self.root / "run" / "seed0" / "full" / "manifest.json").exists())
        self.assertEqual(RunManifest.objects.count(), 2)
        self.assertIn("seed=0", self.out.getvalue())

    def test_ablate_usage_errors(self):
        config = self.write_config(self.root / "data")
        with self.assertRaises(CommandError) as context:
            call_command("ablate", str(config), "--seeds", "a,b", stdout=self.out)
        self.assertEqual(context.exception.returncode, 1)
        with self.assertRaises(CommandError) as context:
            call_command("ablate", str(config), "--arms", "full,teacher", stdout=self.out)
        self.assertEqual(context.exception.returncode, 1)
        self.assertIn("teacher", str(context.exception))

    def test_distill_errors(self):
        config = self.write_config(self.root / "absent")
        with self.assertRaises(CommandError) as context:
            call_command("distill", str(config), stdout=self.out)
        self.assertEqual(context.exception.returncode, 3)
        self.assertIn("absent", str(context.exception))

        config = self.write_config(self.root / "absent", seed=-1)
        with self.assertRaises(CommandError) as context:
            call_command("distill", str(config), stdout=self.out)
        self.assertEqual(context.exception.returncode, 2)
        self.assertIn("seed", str(context.exception))

    def test_probe_missing_checkpoint(self):
        write_dataset(self.root / "data", 4, 2, image_size=32)
        with self.assertRaises(CommandError) as context:
            call_command("probe", str(self.root / "nothing"), str(self.root / "data"), stdout=self.out)
        self.assertEqual(context.exception.returncode, 3)

    def test_export_teacher(self):
        write_dataset(self.root / "data", 4, 2, image_size=64)
        call_command("export_teacher", str(self.root / "data"), str(self.root / "tokens"), stdout=self.out)
        self.assertEqual(ntnsr.read_tensor(self.root / "tokens" / "tokens.ntnsr").shape, (4, 16, 64))

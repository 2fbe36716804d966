import struct
import tempfile
from pathlib import Path

import numpy as np
import sympy
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st

from . import ntnsr, ops
from .autodiff import (
    EmptyTape,
    NonScalarLoss,
    ShapeError,
    Tensor,
    backward,
    current_tape,
    no_grad,
    recording,
)
from .gradcheck import NonDeterministicFunction, grad_check
from .layers import parameter
from .optim import MissingGradient, OptimizerState, optimizer_step


def conv2d_oracle(x, w, stride=1, padding=0):
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out_h, out_w = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, o, out_h, out_w))
    for b in range(n):
        for k in range(o):
            for i in range(out_h):
                for j in range(out_w):
                    patch = x[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, k, i, j] = np.sum(patch * w[k])
    return out


class ForwardOpTest(SimpleTestCase):
    def test_relu_odreze_negativne(self):
        """ReLU negativne vrednosti postavi na nič"""
        out = ops.forward_op("relu", [Tensor([-1.0, 0.0, 2.0])])
        self.assertEqual(out.data.tolist(), [0.0, 0.0, 2.0])

    def test_matmul_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        out = ops.forward_op("matmul", [Tensor(np.eye(3)), Tensor(a)])
        np.testing.assert_array_equal(out.data, a)

    def test_conv2d_of_ones(self):
        out = ops.forward_op(
            "conv2d",
            [Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2)))],
            {"stride": 1, "padding": 0},
        )
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_conv2d_matches_nested_loops(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        for stride, padding in [(1, 0), (1, 1), (2, 1)]:
            out = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
            np.testing.assert_allclose(
                out.data, conv2d_oracle(x, w, stride, padding), atol=1e-12
            )

    def test_shape_error_names_op_and_dims(self):
        with self.assertRaisesMessage(ShapeError, "conv2d: input has 2 channels"):
            ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        with self.assertRaisesMessage(ShapeError, "matmul"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_unknown_op_kind(self):
        with self.assertRaises(ValueError):
            ops.forward_op("dilated_conv", [Tensor(1.0)])

    def test_no_recording_without_grad(self):
        with recording() as tape:
            ops.relu(Tensor([1.0, -2.0]))
            x = parameter([1.0, 2.0])
            with no_grad():
                ops.relu(x)
            self.assertEqual(len(tape), 0)
            ops.relu(x)
            self.assertEqual(len(tape), 1)

    def test_gelu_matches_symbolic_derivative(self):
        z = sympy.symbols("z")
        c = sympy.sqrt(2 / sympy.pi)
        expression = z / 2 * (1 + sympy.tanh(c * (z + sympy.Rational(44715, 10**6) * z**3)))
        derivative = sympy.lambdify(z, sympy.diff(expression, z))
        points = np.array([-2.5, -0.3, 0.0, 0.7, 3.1])
        x = parameter(points)
        with recording() as tape:
            tape.backward(ops.gelu(x).sum())
        np.testing.assert_allclose(x.grad, [derivative(p) for p in points], rtol=1e-12)


class BackwardTest(SimpleTestCase):
    def test_sum(self):
        x = parameter(np.arange(4.0))
        with recording() as tape:
            tape.backward(x.sum())
        self.assertEqual(x.grad.tolist(), [1.0, 1.0, 1.0, 1.0])

    def test_square(self):
        x = parameter([1.0, 2.0])
        with recording() as tape:
            tape.backward((x * x).sum())
        self.assertEqual(x.grad.tolist(), [2.0, 4.0])

    def test_gradienti_se_sestevajo(self):
        """Gradient tenzorja, ki je uporabljen večkrat, je vsota vseh prispevkov"""
        x = parameter([3.0])
        with recording() as tape:
            tape.backward((x + x * 2.0 + x).sum())
        self.assertEqual(x.grad.tolist(), [4.0])

    def test_non_scalar_loss(self):
        x = parameter([1.0, 2.0])
        with recording() as tape:
            y = x * 2.0
            with self.assertRaises(NonScalarLoss):
                tape.backward(y)

    def test_operacije_na_novem_traku(self):
        """Operacije znotraj recording() se zapišejo na nov trak, ne na privzetega"""
        x = parameter([1.0, 2.0])
        default = len(current_tape())
        with recording() as tape:
            self.assertIs(current_tape(), tape)
            (x * x).sum()
            self.assertGreater(len(tape), 0)
        self.assertEqual(len(current_tape()), default)

    def test_empty_tape(self):
        with recording() as tape:
            with self.assertRaises(EmptyTape):
                tape.backward(Tensor(1.0))

    def test_module_backward_clears_tape(self):
        x = parameter([1.0, 2.0])
        with recording() as tape:
            backward((x * x).sum())
            self.assertEqual(len(tape), 0)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x = parameter(rng.normal(size=(3, 4)))
        w = Tensor(rng.normal(size=(4, 2)))

        def first():
            return (ops.gelu(x) ** 2).mean()

        def second():
            return ops.l2_normalize(x @ w).sum()

        grads = []
        for losses in ([first], [second], [first, second]):
            x.grad = None
            with recording() as tape:
                total = losses[0]()
                for loss in losses[1:]:
                    total = total + loss()
                tape.backward(total)
            grads.append(x.grad)
        np.testing.assert_allclose(grads[0] + grads[1], grads[2], atol=1e-12)

    def test_random_graph_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = parameter(rng.normal(size=(4, 5)), name="x")
        w = parameter(rng.normal(size=(5, 3)), name="w")
        target = rng.normal(size=(4, 3))

        def loss():
            hidden = ops.gelu(x @ w)
            probabilities = ops.softmax(hidden * 1.5, axis=1)
            return ((probabilities - target) ** 2).mean()

        report = grad_check(loss, [x, w], epsilon=1e-5)
        self.assertLess(report.max_rel_error, 1e-4)

    def test_determinism(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(5, 3, 3, 3))
        first = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
        second = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
        np.testing.assert_array_equal(first, second)


class GradCheckTest(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(5)

    def weighted(self, out):
        weights = Tensor(self.rng.normal(size=out.shape))
        return lambda tensor: (tensor * weights).sum()

    def check(self, build, params, tolerance=1e-4):
        with no_grad():
            reduce = self.weighted(build())
        report = grad_check(lambda: reduce(build()), params)
        self.assertLess(report.max_rel_error, tolerance, report.per_param)

    def test_quadratic(self):
        x = parameter(self.rng.normal(size=8))
        report = grad_check(lambda: (x * x).sum(), [x])
        self.assertLess(report.max_rel_error, 1e-6)

    def test_napacen_odvod_se_zazna(self):
        """Preverjanje gradientov zazna napačno pravilo za odvod"""
        x = parameter(self.rng.normal(size=8))

        def broken_square(a):
            return ops.result("broken", a.data**2, (a,), lambda g: (g * a.data,))

        report = grad_check(lambda: broken_square(x).sum(), [x])
        self.assertGreater(report.max_rel_error, 1e-2)

    def test_non_deterministic_function(self):
        x = parameter([1.0, 2.0])
        counter = iter(range(100))
        with self.assertRaises(NonDeterministicFunction):
            grad_check(lambda: x.sum() + float(next(counter)), [x])

    def test_epsilon_range(self):
        x = parameter([1.0])
        with self.assertRaises(ValueError):
            grad_check(lambda: x.sum(), [x], epsilon=1e-2)

    def test_conv2d(self):
        x = parameter(self.rng.normal(size=(2, 3, 6, 6)))
        w = parameter(self.rng.normal(size=(4, 3, 3, 3)))
        b = parameter(self.rng.normal(size=4))
        self.check(lambda: ops.conv2d(x, w, b, stride=2, padding=1), [x, w, b])

    def test_matmul_softmax_log_softmax(self):
        a = parameter(self.rng.normal(size=(3, 4)))
        b = parameter(self.rng.normal(size=(4, 5)))
        self.check(lambda: ops.softmax(a @ b, axis=1), [a, b])
        self.check(lambda: ops.log_softmax(a @ b, axis=0), [a, b])

    def test_pooling_and_upsampling(self):
        x = parameter(self.rng.normal(size=(2, 2, 4, 4)))
        self.check(lambda: ops.mean_pool(x, 2), [x])
        self.check(lambda: ops.upsample_nearest(x, 2), [x])

    def test_normalizations(self):
        x = parameter(self.rng.normal(size=(3, 4, 3, 3)))
        gamma = parameter(self.rng.normal(size=4))
        beta = parameter(self.rng.normal(size=4))
        state = ops.BatchNormState(4)
        self.check(lambda: ops.batch_norm(x, gamma, beta, state), [x, gamma, beta])
        mask = self.rng.random((3, 3, 3)) < 0.6
        self.check(
            lambda: ops.batch_norm(x, gamma, beta, state, mask=mask), [x, gamma, beta]
        )
        tokens = parameter(self.rng.normal(size=(5, 4)))
        self.check(lambda: ops.layer_norm(tokens, gamma, beta), [tokens, gamma, beta])
        self.check(lambda: ops.l2_normalize(tokens), [tokens])

    def test_cross_entropy_and_gelu(self):
        logits = parameter(self.rng.normal(size=(6, 3)))
        labels = np.array([0, 1, 2, 2, 1, 0])
        report = grad_check(lambda: ops.cross_entropy(logits, labels), [logits])
        self.assertLess(report.max_rel_error, 1e-4)
        self.check(lambda: ops.gelu(logits), [logits])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_elementwise_ops(self, seed):
        rng = np.random.default_rng(seed)
        a = parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
        b = parameter(rng.uniform(0.5, 2.0, size=(1, 4)))
        weights = Tensor(rng.normal(size=(3, 4)))

        def loss():
            mixed = (a + b) * a / b - ops.sqrt(a) + ops.exp(b * 0.3) - ops.log(a)
            return (mixed * weights).sum()

        self.assertLess(grad_check(loss, [a, b]).max_rel_error, 1e-4)


class OptimizerTest(SimpleTestCase):
    def test_plain_sgd(self):
        p = parameter([1.0])
        p.grad = np.array([0.5])
        optimizer_step(OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0), {"p": p})
        self.assertAlmostEqual(p.data[0], 0.95, places=12)

    def test_rezanje_gradientov(self):
        """Gradient z normo 10 se pri meji 5 razpolovi"""
        p = parameter([0.0, 0.0])
        p.grad = np.array([6.0, 8.0])
        state = OptimizerState(lr=1.0, momentum=0.0, weight_decay=0.0, max_grad_norm=5.0)
        norm = optimizer_step(state, {"p": p})
        self.assertEqual(norm, 10.0)
        np.testing.assert_allclose(p.data, [-3.0, -4.0])

    def test_momentum_two_steps(self):
        p = parameter([0.0])
        state = OptimizerState(lr=1.0, momentum=0.9, weight_decay=0.0)
        for _ in range(2):
            p.grad = np.array([1.0])
            optimizer_step(state, {"p": p})
        self.assertAlmostEqual(p.data[0], -2.9, places=12)
        self.assertEqual(state.step, 2)

    def test_missing_gradient(self):
        with self.assertRaisesMessage(MissingGradient, "'w'"):
            optimizer_step(OptimizerState(), {"w": parameter([1.0])})

    def test_trust_ratio_scales_to_weight_norm(self):
        p = parameter([3.0, 4.0])
        p.grad = np.array([0.0, 0.1])
        state = OptimizerState(
            lr=0.1, momentum=0.0, weight_decay=0.0, max_grad_norm=None, trust_ratio=True
        )
        optimizer_step(state, {"p": p})
        np.testing.assert_allclose(p.data, [3.0, 3.5])


class NTNSRTest(SimpleTestCase):
    def test_header_layout(self):
        blob = ntnsr.dumps(np.zeros((2, 3)))
        self.assertEqual(blob[:5], b"NTSR1")
        self.assertEqual(struct.unpack_from("<3I", blob, 5), (2, 2, 3))
        self.assertEqual(len(blob), 5 + 12 + 6 * 4)

    def test_file_round_trip(self):
        array = np.random.default_rng(6).normal(size=(4, 2, 3)).astype(np.float32)
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "x.ntnsr"
            ntnsr.write_tensor(path, array)
            np.testing.assert_array_equal(ntnsr.read_tensor(path), array)
            double = np.random.default_rng(7).normal(size=5)
            ntnsr.write_tensor(path, double, double=True)
            np.testing.assert_array_equal(ntnsr.read_tensor(path), double)

    def test_pokvarjen_zapis(self):
        """Okrnjen ali tuj zapis sproži napako formata"""
        blob = ntnsr.dumps(np.ones(4))
        with self.assertRaises(ntnsr.NTNSRFormatError):
            ntnsr.loads(blob[:-1])
        with self.assertRaises(ntnsr.NTNSRFormatError):
            ntnsr.loads(b"XXXX1" + blob[5:])
        with self.assertRaises(ntnsr.NTNSRFormatError):
            ntnsr.loads(b"NTS")

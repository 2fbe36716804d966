import numpy as np
from django.test import SimpleTestCase
from masking.masks import expand_hierarchy, generate_masks, hierarchy_for_images
from sparse.kernels import SparseFeatureMap
from tensors.autodiff import Tensor, backward, no_grad, recording
from tensors.gradcheck import grad_check
from tensors.optim import OptimizerState, optimizer_step, zero_grad

from .network import StudentConfig, StudentConfigError, StudentModel, to_dense_model


def tiny_config(**overrides):
    options = dict(widths=(2, 2, 2, 2), blocks=1, image_size=32, embed_dim=4)
    options.update(overrides)
    return StudentConfig(**options)


def conv_same(x, weight, bias=None):
    kernel = weight.shape[-1]
    pad = kernel // 2
    height, width = x.shape[-2:]
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((x.shape[0], weight.shape[0], height, width))
    for i in range(kernel):
        for j in range(kernel):
            window = padded[:, :, i : i + height, j : j + width]
            out += np.einsum("nchw,oc->nohw", window, weight[:, :, i, j])
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def batch_norm_oracle(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma[None, :, None, None] + beta[
        None, :, None, None
    ]


def decode_oracle(model, features):
    """Rekurzija dekodirnika, zapisana naravnost z numpy."""

    def filled(i):
        holes = ~features[i].mask[:, None]
        embedding = model.mask_embeddings[i].data[None, :, None, None]
        return features[i].features.data + embedding * holes

    def project(i):
        projection = model.projections[i]
        return conv_same(filled(i), projection.weight.data, projection.bias.data)

    s = project(3)
    for i in (2, 1, 0):
        block = model.decoder[i].conv
        up = np.repeat(np.repeat(s, 2, axis=2), 2, axis=3)
        normed = batch_norm_oracle(
            conv_same(up, block.conv.weight.data),
            block.norm.gamma.data,
            block.norm.beta.data,
        )
        s = np.maximum(normed, 0.0) + project(i)
    return s


def random_features(rng, config, batch=2, ratio=0.5):
    features = []
    for i, width in enumerate(config.widths):
        size = config.image_size // 4 >> i
        visible = rng.random((batch, size, size)) >= ratio
        data = rng.normal(size=(batch, width, size, size)) * visible[:, None]
        features.append(SparseFeatureMap(Tensor(data), visible))
    return features


class StudentConfigTest(SimpleTestCase):
    def test_image_size_must_divide_by_32(self):
        with self.assertRaisesMessage(StudentConfigError, "multiple of 32"):
            StudentConfig(image_size=48)

    def test_four_positive_widths(self):
        with self.assertRaises(StudentConfigError):
            StudentConfig(widths=(8, 8, 8))
        with self.assertRaises(StudentConfigError):
            StudentConfig(widths=(8, 0, 8, 8))

    def test_unknown_activation(self):
        with self.assertRaises(StudentConfigError):
            StudentConfig(activation="tanh")

    def test_token_grid_must_divide(self):
        with self.assertRaises(StudentConfigError):
            StudentConfig(image_size=64, patch_size=6)

    def test_teacher_dim_mismatch_names_both(self):
        with self.assertRaisesMessage(StudentConfigError, "64 does not match teacher dim 32"):
            StudentConfig(embed_dim=64).check_teacher_dim(32)


class DecodeTest(SimpleTestCase):
    def test_matches_straight_line_recurrence(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            model = StudentModel(tiny_config(seed=seed))
            features = random_features(rng, model.config)
            with no_grad():
                s1 = model.decode(features)
            self.assertEqual(s1.shape, (2, 2, 8, 8))
            np.testing.assert_allclose(s1.data, decode_oracle(model, features), atol=1e-10)

    def test_nicelne_utezi(self):
        """Z ničelnimi utežmi je izhod dekoderja ničeln"""
        model = StudentModel(tiny_config())
        for name, param in model.named_parameters().items():
            if name.startswith(("decoder", "projections", "mask_embeddings")):
                param.data = np.zeros_like(param.data)
        for block in model.decoder:
            block.conv.norm.gamma.data = np.ones(2)
        features = random_features(np.random.default_rng(0), model.config)
        with no_grad():
            s1 = model.decode(features)
        np.testing.assert_array_equal(s1.data, 0.0)

    def test_embeddings_unused_when_all_visible(self):
        model = StudentModel(tiny_config()).init_identity_projections()
        features = random_features(np.random.default_rng(1), model.config, ratio=0.0)
        with recording():
            backward(model.decode(features).sum())
        for embedding in model.mask_embeddings:
            np.testing.assert_array_equal(embedding.grad, 0.0)

    def test_gradient_vlozitve_le_pod_masko(self):
        """Vložitev maske dobi gradient le na ravni, kjer je položaj zakrit"""
        model = StudentModel(tiny_config())
        rng = np.random.default_rng(2)
        features = random_features(rng, model.config, ratio=0.0)
        features[1].mask[0, 0, 0] = False
        features[1].features.data[0, :, 0, 0] = 0.0
        weights = Tensor(rng.normal(size=(2, 2, 8, 8)))
        with recording():
            backward((model.decode(features) * weights).sum())
        self.assertTrue(np.any(model.mask_embeddings[1].grad != 0))
        for i in (0, 2, 3):
            np.testing.assert_array_equal(model.mask_embeddings[i].grad, 0.0)

    def test_without_unet_only_bottleneck_projection(self):
        model = StudentModel(tiny_config(unet=False))
        names = model.named_parameters()
        self.assertIn("projections.3.weight", names)
        self.assertNotIn("projections.0.weight", names)
        self.assertNotIn("mask_embeddings.0", names)
        features = random_features(np.random.default_rng(3), model.config)
        with no_grad():
            self.assertEqual(model.decode(features).shape, (2, 2, 8, 8))


class EncodeTest(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(4)
        self.config = StudentConfig(widths=(4, 4, 4, 4), blocks=1, image_size=64, embed_dim=8)
        self.images = self.rng.normal(size=(2, 3, 64, 64))

    def test_locljivosti_stopenj(self):
        """Stopnje kodirnika imajo ločljivosti H/4 do H/32"""
        model = StudentModel(self.config)
        with no_grad():
            features = model.encode(self.images, model.full_hierarchy(2))
        self.assertEqual([f.features.shape[-1] for f in features], [16, 8, 4, 2])

    def test_support_within_visible_maps(self):
        model = StudentModel(self.config)
        hierarchy = hierarchy_for_images(generate_masks(2, 2, 2, 0.5, 9), 64)
        with no_grad():
            features = model.encode(self.images, hierarchy)
        for feature_map in features:
            visible = hierarchy.at(feature_map.features.shape[-1])
            support = np.any(feature_map.features.data != 0, axis=1)
            self.assertFalse(np.any(support & ~visible))

    def test_all_visible_matches_dense_twin(self):
        model = StudentModel(self.config)
        twin = to_dense_model(model)
        hierarchy = model.full_hierarchy(2)
        with no_grad():
            sparse = model.encode(self.images, hierarchy)
            dense = twin.encode(self.images, hierarchy)
        for a, b in zip(sparse, dense):
            np.testing.assert_allclose(a.features.data, b.features.data, atol=1e-5)

    def test_wrong_image_size(self):
        model = StudentModel(self.config)
        with self.assertRaises(StudentConfigError):
            model.encode(np.zeros((1, 3, 32, 32)), model.full_hierarchy(1))

    def test_hierarchy_mismatch(self):
        model = StudentModel(self.config)
        hierarchy = expand_hierarchy(generate_masks(2, 2, 2, 0.5, 0), [64, 32, 16])
        with self.assertRaises(StudentConfigError):
            model.encode(self.images, hierarchy)


class HeadTest(SimpleTestCase):
    def test_token_count_and_norm(self):
        model = StudentModel(StudentConfig(widths=(4, 4, 4, 4), blocks=1, embed_dim=8))
        images = np.random.default_rng(5).normal(size=(2, 3, 64, 64))
        with no_grad():
            tokens = model(images, model.full_hierarchy(2))
        self.assertEqual(tokens.shape, (2, 16, 8))
        np.testing.assert_allclose(np.linalg.norm(tokens.data, axis=-1), 1.0, atol=1e-6)

    def test_full_size_token_geometry(self):
        config = StudentConfig(widths=(2, 2, 2, 2), blocks=0, image_size=224, embed_dim=1024)
        model = StudentModel(config)
        images = np.random.default_rng(6).normal(size=(1, 3, 224, 224))
        with no_grad():
            tokens = model(images, model.full_hierarchy(1))
        self.assertEqual(config.num_tokens, 196)
        self.assertEqual(tokens.shape, (1, 196, 1024))


class DenseTwinTest(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)
        self.images = self.rng.normal(size=(2, 3, 32, 32))

    def assert_agrees(self, model):
        twin = to_dense_model(model)
        hierarchy = model.full_hierarchy(2)
        with no_grad():
            np.testing.assert_allclose(
                model(self.images, hierarchy).data,
                twin(self.images, hierarchy).data,
                atol=1e-5,
            )

    def test_random_weights(self):
        self.assert_agrees(StudentModel(tiny_config()))

    def test_after_training(self):
        model = StudentModel(tiny_config())
        params = model.named_parameters()
        state = OptimizerState(lr=0.01)
        target = Tensor(self.rng.normal(size=(2, 4, 4)))
        for step in range(100):
            zero_grad(params)
            hierarchy = hierarchy_for_images(generate_masks(2, 1, 1, 0.0, step), 32)
            with recording():
                backward(((model(self.images, hierarchy) - target) ** 2).mean())
            optimizer_step(state, params)
        self.assert_agrees(model)
        model.eval()
        self.assert_agrees(model)

    def test_gosti_dvojcek_se_razlikuje(self):
        """Gosti dvojček da na zakritem vhodu drugačne žetone kot redki model"""
        model = StudentModel(tiny_config(image_size=64))
        twin = to_dense_model(model)
        images = self.rng.normal(size=(2, 3, 64, 64))
        hierarchy = hierarchy_for_images(generate_masks(2, 2, 2, 0.5, 1), 64)
        with no_grad():
            self.assertFalse(
                np.allclose(model(images, hierarchy).data, twin(images, hierarchy).data)
            )


class StudentGradientTest(SimpleTestCase):
    def test_end_to_end_gradients(self):
        model = StudentModel(tiny_config(image_size=64, activation="gelu"))
        rng = np.random.default_rng(8)
        images = rng.normal(size=(2, 3, 64, 64))
        hierarchy = hierarchy_for_images(generate_masks(2, 2, 2, 0.25, 3), 64)
        weights = Tensor(rng.normal(size=(2, 16, 4)))
        params = {
            name: param
            for name, param in model.named_parameters().items()
            if name
            in (
                "stem.0.conv.weight",
                "stages.3.down.conv.weight",
                "decoder.0.conv.norm.gamma",
                "mask_embeddings.2",
                "projections.3.weight",
                "head.weight",
            )
        }
        self.assertEqual(len(params), 6)
        # gradiente pod 1e-3 preverimo absolutno, z napako največ 1e-7
        report = grad_check(
            lambda: (model(images, hierarchy) * weights).sum(), params, sample=8, floor=1e-3
        )
        self.assertLess(report.max_rel_error, 1e-4, report.per_param)

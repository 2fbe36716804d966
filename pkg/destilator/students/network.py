"""
Študent: redek konvolucijski kodirnik s štirimi stopnjami, gost dekodirnik
v obliki UNet z vektorji mask in projekcijami ter glava, ki izhod preslika na
mrežo žetonov učitelja.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np
from masking.masks import MaskError, MaskHierarchy, full_mask, hierarchy_for_images
from sparse.kernels import (
    SparseFeatureMap,
    densify,
    from_dense,
    sparse_add,
    sparse_batchnorm,
    sparse_conv2d,
    sparse_map,
)
from tensors import ops
from tensors.autodiff import Tensor
from tensors.layers import BatchNorm, Conv2d, Module, parameter

logger = logging.getLogger(__name__)

ACTIVATIONS = {"relu": ops.relu, "gelu": ops.gelu}


class StudentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StudentConfig:
    widths: tuple = (32, 64, 128, 256)
    blocks: int = 2
    image_size: int = 64
    in_channels: int = 3
    embed_dim: int = 64
    patch_size: int = 16
    sparse: bool = True
    unet: bool = True
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 32:
            raise StudentConfigError(
                f"image size must be a positive multiple of 32, got {self.image_size}"
            )
        if len(self.widths) != 4 or min(self.widths) <= 0:
            raise StudentConfigError(
                f"expected four positive stage widths, got {self.widths}"
            )
        if self.blocks < 0:
            raise StudentConfigError(f"blocks per stage must be >= 0, got {self.blocks}")
        if self.embed_dim <= 0:
            raise StudentConfigError(f"head dim must be positive, got {self.embed_dim}")
        if self.activation not in ACTIVATIONS:
            raise StudentConfigError(f"unknown activation {self.activation!r}")
        if self.patch_size % 4 or (self.image_size // 4) % self.head_stride:
            raise StudentConfigError(
                f"teacher token grid (patch {self.patch_size}) does not divide the"
                f" {self.image_size // 4}x{self.image_size // 4} decoder grid"
            )

    @property
    def head_stride(self):
        return max(self.patch_size // 4, 1)

    @property
    def token_grid(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.token_grid**2

    def check_teacher_dim(self, teacher_dim):
        if teacher_dim != self.embed_dim:
            raise StudentConfigError(
                f"student head dim {self.embed_dim} does not match teacher dim {teacher_dim}"
            )


class ConvNorm(Module):
    """Konvolucija brez premika, paketna normalizacija in aktivacija."""

    def __init__(self, in_channels, out_channels, rng, stride=1, kernel=3):
        self.conv = Conv2d(
            in_channels, out_channels, kernel, rng, stride, kernel // 2, bias=False
        )
        self.norm = BatchNorm(out_channels)

    def sparse(self, inp: SparseFeatureMap, out_mask=None, activation=None):
        out = sparse_conv2d(
            inp,
            self.conv.weight,
            stride=self.conv.stride,
            padding=self.conv.padding,
            out_mask=out_mask,
        )
        out = sparse_batchnorm(out, self.norm.gamma, self.norm.beta, self.norm.state)
        return sparse_map(out, activation) if activation else out

    def dense(self, x: Tensor, activation=None):
        out = self.norm(self.conv(x))
        return activation(out) if activation else out


class ResidualBlock(Module):
    def __init__(self, channels, rng):
        self.first = ConvNorm(channels, channels, rng)
        self.second = ConvNorm(channels, channels, rng)

    def sparse(self, inp, activation):
        out = self.second.sparse(self.first.sparse(inp, activation=activation))
        return sparse_map(sparse_add(out, inp), activation)

    def dense(self, x, activation):
        out = self.second.dense(self.first.dense(x, activation))
        return activation(out + x)


class EncoderStage(Module):
    """Stopnja kodirnika: neobvezen korak s korakom 2, nato preostali bloki."""

    def __init__(self, in_channels, out_channels, blocks, rng, downsample=True):
        self.down = (
            ConvNorm(in_channels, out_channels, rng, stride=2) if downsample else None
        )
        self.blocks = [ResidualBlock(out_channels, rng) for _ in range(blocks)]

    def sparse(self, inp, hierarchy: MaskHierarchy, activation):
        if self.down is not None:
            height, width = inp.features.shape[-2:]
            out_mask = hierarchy.at(height // 2, width // 2)
            inp = self.down.sparse(inp, out_mask, activation)
        for block in self.blocks:
            inp = block.sparse(inp, activation)
        return inp

    def dense(self, x, activation):
        if self.down is not None:
            x = self.down.dense(x, activation)
        for block in self.blocks:
            x = block.dense(x, activation)
        return x


class DecoderBlock(Module):
    """Lahek blok dekodirnika: povečava x2, konvolucija 3x3, normalizacija."""

    def __init__(self, in_channels, out_channels, rng):
        self.conv = ConvNorm(in_channels, out_channels, rng)

    def __call__(self, x, activation):
        return self.conv.dense(ops.upsample_nearest(x, 2), activation)


class StudentModel(Module):
    def __init__(self, config: StudentConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        widths = config.widths
        self.stem = [
            ConvNorm(config.in_channels, widths[0], rng, stride=2),
            ConvNorm(widths[0], widths[0], rng, stride=2),
        ]
        self.stages = [
            EncoderStage(
                widths[i - 1] if i else widths[0],
                widths[i],
                config.blocks,
                rng,
                downsample=i > 0,
            )
            for i in range(4)
        ]
        self.decoder = [DecoderBlock(widths[i + 1], widths[i], rng) for i in range(3)]
        # brez UNet ostaneta le M4 in phi4 na najgrobejši skali
        lateral = [config.unet, config.unet, config.unet, True]
        self.mask_embeddings = [
            parameter(rng.normal(0.0, 0.02, width)) if used else None
            for width, used in zip(widths, lateral)
        ]
        self.projections = [
            Conv2d(width, width, 1, rng) if used else None
            for width, used in zip(widths, lateral)
        ]
        self.head = Conv2d(
            widths[0], config.embed_dim, config.head_stride, rng, stride=config.head_stride
        )

    @property
    def activation(self):
        return ACTIVATIONS[self.config.activation]

    def full_hierarchy(self, batch):
        grid = self.config.image_size // 32
        return hierarchy_for_images(full_mask(batch, grid, grid), self.config.image_size)

    def _check_input(self, image, hierarchy):
        if image.ndim != 4 or image.shape[-2:] != (self.config.image_size,) * 2:
            raise StudentConfigError(
                f"expected images of shape (N, C, {self.config.image_size},"
                f" {self.config.image_size}), got {image.shape}"
            )
        try:
            for size in (self.config.image_size >> shift for shift in range(6)):
                hierarchy.at(size)
        except MaskError as error:
            raise StudentConfigError(
                f"mask hierarchy does not match the encoder: {error}"
            ) from error

    def encode(self, image, hierarchy: MaskHierarchy):
        """Vrne zemljevide F1..F4 na skalah H/4, H/8, H/16 in H/32."""
        image = image if isinstance(image, Tensor) else Tensor(image)
        self._check_input(image, hierarchy)
        activation = self.activation
        if not self.config.sparse:
            return self._encode_dense(image, hierarchy)
        size = self.config.image_size
        out = from_dense(image, hierarchy.at(size))
        for i, block in enumerate(self.stem, start=1):
            out = block.sparse(out, hierarchy.at(size >> i), activation)
        features = []
        for stage in self.stages:
            out = stage.sparse(out, hierarchy, activation)
            features.append(out)
        return features

    def _encode_dense(self, image, hierarchy):
        # gosta različica: zakrite slikovne točke so 0, konvolucije povsod
        activation = self.activation
        out = image * hierarchy.at(self.config.image_size)[:, None].astype(np.float64)
        for block in self.stem:
            out = block.dense(out, activation)
        features = []
        for stage in self.stages:
            out = stage.dense(out, activation)
            visible = np.ones((out.shape[0],) + out.shape[2:], dtype=bool)
            features.append(SparseFeatureMap(out, visible))
        return features

    def decode(self, features):
        """S4 = phi4(F4 + M4), S_i = D_i(S_{i+1}) + phi_i(F_i + M_i)."""
        activation = self.activation
        out = self.projections[3](densify(features[3], self.mask_embeddings[3]))
        for i in (2, 1, 0):
            out = self.decoder[i](out, activation)
            if self.config.unet:
                out = out + self.projections[i](
                    densify(features[i], self.mask_embeddings[i])
                )
        return out

    def head_tokens(self, s1):
        """Žetoni (N, T, D) v vrstnem redu mreže učitelja, vrstice z normo 1."""
        if s1.shape[-1] % self.config.head_stride:
            raise StudentConfigError(
                f"decoder grid {s1.shape[-2:]} is not divisible by {self.config.head_stride}"
            )
        out = self.head(s1)
        batch, dim = out.shape[:2]
        tokens = out.reshape(batch, dim, -1).transpose(0, 2, 1)
        return ops.l2_normalize(tokens, axis=-1)

    def __call__(self, image, hierarchy):
        return self.head_tokens(self.decode(self.encode(image, hierarchy)))

    def init_identity_projections(self):
        for projection in self.projections:
            if projection is not None:
                width = projection.weight.shape[0]
                projection.weight.data = np.eye(width).reshape(width, width, 1, 1)
                projection.bias.data = np.zeros(width)
        return self


def copy_state(source: Module, target: Module):
    target_params = target.named_parameters()
    for name, param in source.named_parameters().items():
        target_params[name].data = param.data.copy()
    target.load_buffers(source.named_buffers())
    for name, state in source.named_norm_states().items():
        target.named_norm_states()[name].training = state.training
    return target


def to_dense_model(student: StudentModel):
    """Gosta dvojčica z enakimi utežmi za vrednotenje na nezakritih slikah."""
    twin = StudentModel(replace(student.config, sparse=False))
    logger.debug("built dense twin with %d parameters", len(twin.named_parameters()))
    return copy_state(student, twin)

"""
Zamrznjen učitelj: majhen transformer, ki obdela le vidne zaplate slike in
vrne vrstično normirane žetone na celotni mreži zaplat.
"""
from dataclasses import dataclass

import numpy as np
from masking.masks import MaskError, MaskGrid, upsample_map
from tensors import ops
from tensors.autodiff import Tensor, no_grad
from tensors.layers import LayerNorm, Linear, Module, parameter


class TeacherError(ValueError):
    pass


@dataclass(frozen=True)
class TeacherConfig:
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 2
    heads: int = 1
    mlp_ratio: int = 2
    image_size: int = 64
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise TeacherError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )
        if self.heads <= 0 or self.embed_dim % self.heads:
            raise TeacherError(
                f"embed dim {self.embed_dim} is not divisible by {self.heads} heads"
            )

    @property
    def token_grid(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.token_grid**2


@dataclass(eq=False)
class TeacherOutput:
    tokens: np.ndarray
    instance_embedding: np.ndarray

    def __len__(self):
        return self.tokens.shape[0] if self.tokens.ndim == 3 else 1


def instance_embedding(tokens):
    """Povprečje vrstic žetonov, normirano na dolžino 1."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[-2] == 0:
        raise TeacherError("cannot embed an empty token set")
    mean = tokens.mean(axis=-2)
    norm = np.linalg.norm(mean, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise TeacherError("mean token is the zero vector")
    return mean / norm


class Attention(Module):
    def __init__(self, dim, heads, rng):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x):
        count, dim = x.shape
        head_dim = dim // self.heads
        qkv = self.qkv(x).reshape(count, 3, self.heads, head_dim).transpose(1, 2, 0, 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(head_dim)
        out = ops.softmax(scores, axis=-1) @ v
        return self.proj(out.transpose(1, 0, 2).reshape(count, dim))


class TransformerBlock(Module):
    def __init__(self, dim, heads, mlp_ratio, rng):
        self.norm1 = LayerNorm(dim)
        self.attention = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def __call__(self, x):
        x = x + self.attention(self.norm1(x))
        return x + self.fc2(ops.gelu(self.fc1(self.norm2(x))))


class ToyTeacher(Module):
    """Naključno inicializiran in zamrznjen; parametri nikoli ne dobijo gradienta."""

    def __init__(self, config: TeacherConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        dim = config.embed_dim
        patch_dim = config.in_channels * config.patch_size**2
        self.patch_embed = Linear(patch_dim, dim, rng)
        self.position = parameter(rng.normal(0.0, 0.02, (config.num_tokens, dim)))
        self.blocks = [
            TransformerBlock(dim, config.heads, config.mlp_ratio, rng)
            for _ in range(config.depth)
        ]
        self.norm = LayerNorm(dim)
        self.mask_token = parameter(rng.normal(0.0, 0.02, dim))
        self.freeze()

    @property
    def embed_dim(self):
        return self.config.embed_dim

    def patchify(self, images):
        batch, channels, height, width = images.shape
        grid, patch = self.config.token_grid, self.config.patch_size
        if (height, width) != (self.config.image_size,) * 2:
            raise TeacherError(
                f"teacher expects {self.config.image_size}x{self.config.image_size}"
                f" images, got {height}x{width}"
            )
        patches = images.reshape(batch, channels, grid, patch, grid, patch)
        return patches.transpose(0, 2, 4, 1, 3, 5).reshape(batch, grid * grid, -1)

    def visible_tokens(self, mask: MaskGrid, batch):
        grid = self.config.token_grid
        try:
            visible = upsample_map(mask.visible, grid, grid)
        except MaskError as error:
            raise TeacherError(
                f"mask grid {mask.grid_h}x{mask.grid_w} does not fit the"
                f" {grid}x{grid} patch grid"
            ) from error
        visible = np.broadcast_to(visible, (batch, grid, grid))
        return visible.reshape(batch, -1)

    def __call__(self, images, mask: MaskGrid):
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        patches = self.patchify(images)
        visible = self.visible_tokens(mask, len(images))
        tokens = np.empty(patches.shape[:2] + (self.embed_dim,))
        with no_grad():
            for n in range(len(images)):
                keep = np.flatnonzero(visible[n])
                tokens[n] = self.mask_token.data
                if not len(keep):
                    continue
                x = self.patch_embed(Tensor(patches[n, keep])) + self.position[keep]
                for block in self.blocks:
                    x = block(x)
                tokens[n, keep] = self.norm(x).data
        tokens /= np.linalg.norm(tokens, axis=-1, keepdims=True)
        return TeacherOutput(tokens, instance_embedding(tokens))


def teacher_encode(images, mask: MaskGrid, teacher):
    return teacher(images, mask)

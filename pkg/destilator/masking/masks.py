"""Maske zaplat na najgrobejši mreži in njihova razširitev na vse skale."""
import hashlib
import math
from dataclasses import dataclass

import numpy as np
from tensors import ntnsr
from tensors.autodiff import Tensor

# najgrobejša mreža je H/32 x W/32
GRID_FACTOR = 32


class MaskError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MaskGrid:
    visible: np.ndarray
    ratio: float

    @property
    def grid_h(self):
        return self.visible.shape[-2]

    @property
    def grid_w(self):
        return self.visible.shape[-1]

    @property
    def masked_count(self):
        return int(np.count_nonzero(~self.visible))

    def __len__(self):
        return self.visible.shape[0] if self.visible.ndim == 3 else 1


def masked_cells(cells, ratio):
    count = math.floor(ratio * cells + 0.5)
    if ratio < 1:
        count = min(count, cells - 1)
    return count


def generate_mask(grid_h, grid_w, ratio, rng_seed):
    """Zakrije natanko round(ratio * celice) celic, izbranih brez ponavljanja."""
    if not 0 <= ratio <= 1:
        raise MaskError(f"mask ratio must be in [0, 1], got {ratio}")
    if grid_h < 1 or grid_w < 1:
        raise MaskError(f"grid dims must be positive, got {grid_h}x{grid_w}")
    cells = grid_h * grid_w
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(cells, size=masked_cells(cells, ratio), replace=False)
    visible = np.ones(cells, dtype=bool)
    visible[chosen] = False
    return MaskGrid(visible.reshape(grid_h, grid_w), ratio)


def generate_masks(n, grid_h, grid_w, ratio, seed):
    """Ena maska na sliko; seme i-te slike je (*seed, i)."""
    prefix = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    visible = [
        generate_mask(grid_h, grid_w, ratio, (*prefix, i)).visible for i in range(n)
    ]
    return MaskGrid(np.stack(visible), ratio)


def full_mask(n, grid_h, grid_w):
    return MaskGrid(np.ones((n, grid_h, grid_w), dtype=bool), 0.0)


def _size(scale):
    return (scale, scale) if isinstance(scale, int) else tuple(scale)


def image_scales(image_size):
    """Velikosti zemljevidov od polne slike do H/32: 64 -> 64, 32, 16, 8, 4, 2."""
    if image_size % GRID_FACTOR:
        raise MaskError(f"image size {image_size} is not divisible by {GRID_FACTOR}")
    sizes = []
    size = image_size
    while size >= image_size // GRID_FACTOR:
        sizes.append(size)
        size //= 2
    return sizes


@dataclass(frozen=True, eq=False)
class MaskHierarchy:
    grid: MaskGrid
    maps: tuple

    def at(self, height, width=None):
        width = height if width is None else width
        for visibility in self.maps:
            if visibility.shape[-2:] == (height, width):
                return visibility
        raise MaskError(f"no mask map at resolution {height}x{width}")

    def checksum(self):
        digest = hashlib.sha256()
        for visibility in self.maps:
            digest.update(str(visibility.shape).encode())
            digest.update(np.packbits(visibility).tobytes())
        return digest.hexdigest()


def upsample_map(visible, height, width):
    grid_h, grid_w = visible.shape[-2:]
    if height % grid_h or width % grid_w:
        raise MaskError(
            f"scale {height}x{width} is not a multiple of the mask grid {grid_h}x{grid_w}"
        )
    return np.repeat(
        np.repeat(visible, height // grid_h, axis=-2), width // grid_w, axis=-1
    )


def expand_hierarchy(mask: MaskGrid, scales):
    maps = tuple(upsample_map(mask.visible, *_size(scale)) for scale in scales)
    return MaskHierarchy(mask, maps)


def hierarchy_for_images(mask: MaskGrid, image_size):
    return expand_hierarchy(mask, image_scales(image_size))


def apply_mask_dense(image, visible):
    """Postavi zakrite slikovne točke na 0, vidne pusti nespremenjene."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    height, width = image.shape[-2:]
    try:
        expanded = upsample_map(np.asarray(visible, dtype=bool), height, width)
    except MaskError as error:
        raise MaskError(f"mask does not fit image {image.shape}: {error}") from None
    if image.ndim == 4 and expanded.ndim == 3:
        expanded = expanded[:, None]
    return image * expanded.astype(np.float64)


def save_mask(path, mask: MaskGrid):
    ntnsr.write_tensor(path, mask.visible.astype(np.float32))


def load_mask(path, ratio):
    return MaskGrid(ntnsr.read_tensor(path) > 0.5, ratio)

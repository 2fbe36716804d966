"""
Erozija zakritih območij: indikatorska slika (1 vidno, 0 zakrito) gre skozi
zaporedje konvolucij 3x3 z enicami. Gosta konvolucija širi vidno območje,
redka ohrani vzorec maske.
"""
import logging

import numpy as np
from masking.masks import MaskGrid
from sparse.kernels import from_dense, sparse_conv2d
from tensors import ops
from tensors.autodiff import Tensor, no_grad

from .shift import DiagnosticError

logger = logging.getLogger(__name__)

CONV_KINDS = ("dense", "sparse")
EROSION_HEADER = ("layer", "dense", "sparse")


def _visibility(mask):
    visible = mask.visible if isinstance(mask, MaskGrid) else np.asarray(mask, dtype=bool)
    if visible.ndim == 2:
        visible = visible[None]
    if visible.ndim != 3:
        raise DiagnosticError(f"expected an (H, W) or (N, H, W) mask, got shape {visible.shape}")
    return visible


def erosion_profile(kind, mask, depth):
    """Delež neničelnih izhodov po vsaki od `depth` plasti."""
    if kind not in CONV_KINDS:
        raise DiagnosticError(f"unknown convolution kind {kind!r}")
    if depth < 1:
        raise DiagnosticError(f"depth must be at least 1, got {depth}")
    visible = _visibility(mask)
    ones = Tensor(np.ones((1, 1, 3, 3)))
    indicator = Tensor(visible[:, None].astype(np.float64))
    profile = []
    with no_grad():
        if kind == "dense":
            out = indicator
            for _ in range(depth):
                out = ops.conv2d(out, ones, padding=1)
                profile.append(float(np.mean(out.data != 0)))
        else:
            out = from_dense(indicator, visible)
            for _ in range(depth):
                out = sparse_conv2d(out, ones, padding=1)
                profile.append(float(np.mean(out.features.data != 0)))
    return profile


def erosion_table(mask, depth):
    """Vrstice (plast, gosta, redka) za izpis v CSV."""
    dense = erosion_profile("dense", mask, depth)
    sparse = erosion_profile("sparse", mask, depth)
    logger.info(
        "depth=%d visible=%.4f dense_final=%.4f sparse_final=%.4f",
        depth,
        float(_visibility(mask).mean()),
        dense[-1],
        sparse[-1],
    )
    return [(layer, d, s) for layer, (d, s) in enumerate(zip(dense, sparse), start=1)]

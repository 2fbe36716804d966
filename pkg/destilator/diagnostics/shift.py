"""
Premik porazdelitve: histogrami aktivacij zadnje stopnje kodirnika na zakritih
in nezakritih slikah ter razdalja totalne variacije med njima.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np
from django.conf import settings
from masking.masks import (
    GRID_FACTOR,
    MaskGrid,
    apply_mask_dense,
    generate_masks,
    hierarchy_for_images,
)
from sparse.kernels import SparseError
from students.network import StudentModel, copy_state
from tensors.autodiff import no_grad

logger = logging.getLogger(__name__)


class DiagnosticError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if len(self.edges) != len(self.counts) + 1:
            raise DiagnosticError(
                f"{len(self.counts)} bins need {len(self.counts) + 1} edges, got {len(self.edges)}"
            )
        if np.any(np.diff(self.edges) <= 0):
            raise DiagnosticError("histogram edges must be strictly increasing")
        if abs(self.counts.sum() - 1.0) > 1e-9:
            raise DiagnosticError(f"histogram counts sum to {self.counts.sum()}, not 1")

    def __len__(self):
        return len(self.counts)

    @property
    def centers(self):
        return (self.edges[:-1] + self.edges[1:]) / 2


def histogram(values, bins=None, value_range=None):
    """Normirani histogram; pri enaki najmanjši in največji vrednosti en sam razred."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DiagnosticError("cannot build a histogram of an empty activation set")
    if not np.isfinite(values).all():
        raise DiagnosticError("activations contain non-finite values")
    bins = bins or settings.DESTILATOR["HISTOGRAM_BINS"]
    low, high = value_range if value_range is not None else (values.min(), values.max())
    if low == high:
        edges = np.array([low - 0.5, high + 0.5])
    else:
        edges = np.linspace(low, high, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    if counts.sum() == 0:
        raise DiagnosticError(f"no activations fall inside [{low}, {high}]")
    return Histogram(edges, counts / counts.sum())


def _twin(student: StudentModel, sparse):
    # diagnostika ne sme spremeniti tekočih statistik izvirnega modela
    return copy_state(student, StudentModel(replace(student.config, sparse=sparse)))


def frozen_twins(student: StudentModel, images):
    """
    Redka in gosta dvojčica z zamrznjeno normalizacijo. Tekoče statistike so
    natanko statistike nezakritih slik, zato obe dvojčici zakrite slike
    normirata enako kot nezakrite.
    """
    dense = _twin(student, sparse=False)
    for state in dense.named_norm_states().values():
        state.momentum = 1.0
    dense.train()
    with no_grad():
        dense.encode(images, dense.full_hierarchy(len(images)))
    dense.eval()
    sparse = copy_state(dense, StudentModel(replace(student.config, sparse=True)))
    return sparse, dense


def final_stage_activations(model: StudentModel, images, mask: MaskGrid = None):
    """Vrednosti F4 na vidnih položajih (redki model) oziroma povsod (gosti)."""
    images = np.asarray(images, dtype=np.float64)
    size = model.config.image_size
    if mask is None:
        hierarchy = model.full_hierarchy(len(images))
    else:
        if model.config.sparse and not mask.visible.any():
            raise DiagnosticError("every patch is masked; there are no visible activations")
        hierarchy = hierarchy_for_images(mask, size)
    try:
        with no_grad():
            final = model.encode(images, hierarchy)[-1]
    except SparseError as error:
        raise DiagnosticError(str(error)) from error
    values = final.features.data.transpose(0, 2, 3, 1)[final.mask]
    if values.size == 0:
        raise DiagnosticError("the final stage holds no visible activations")
    return values.ravel()


def activation_histogram(model: StudentModel, images, mask: MaskGrid = None, bins=None):
    return histogram(final_stage_activations(model, images, mask), bins)


def shift_score(masked: Histogram, unmasked: Histogram):
    """Razdalja totalne variacije, polovica vsote |p_i - q_i|."""
    if not np.array_equal(masked.edges, unmasked.edges):
        raise DiagnosticError("histograms must share their bin edges")
    return float(min(0.5 * np.abs(masked.counts - unmasked.counts).sum(), 1.0))


@dataclass(frozen=True)
class ArmShift:
    score: float
    masked: Histogram
    unmasked: Histogram


@dataclass(frozen=True)
class ShiftReport:
    sparse: ArmShift
    dense: ArmShift
    ratio: float
    images: int

    @property
    def reduced(self):
        return self.sparse.score < 0.1 and self.dense.score > 2 * self.sparse.score

    @property
    def verdict(self):
        if self.reduced:
            return "sparse encoder keeps the activation distribution under masking"
        return "no clear reduction of the distribution shift"


def _compare(masked_values, unmasked_values, bins):
    both = np.concatenate([masked_values, unmasked_values])
    value_range = (both.min(), both.max())
    masked = histogram(masked_values, bins, value_range)
    unmasked = histogram(unmasked_values, bins, value_range)
    return ArmShift(shift_score(masked, unmasked), masked, unmasked)


def distribution_shift(student: StudentModel, images, ratio=0.6, seed=0, bins=None):
    """
    Primerja redki kodirnik (zakrite zaplate izpuščene) z gostim, ki dobi sliko
    z ničlami na zakritih mestih. Oba uporabljata uteži istega študenta.
    """
    images = np.asarray(images, dtype=np.float64)
    grid = student.config.image_size // GRID_FACTOR
    mask = generate_masks(len(images), grid, grid, ratio, seed)
    if len(images) < 100:
        logger.warning("images=%d histogram estimate may be unstable below 100 images", len(images))

    sparse, dense = frozen_twins(student, images)
    sparse_arm = _compare(
        final_stage_activations(sparse, images, mask),
        final_stage_activations(sparse, images),
        bins,
    )
    visible = hierarchy_for_images(mask, student.config.image_size).at(student.config.image_size)
    zeroed = apply_mask_dense(images, visible).data
    dense_arm = _compare(
        final_stage_activations(dense, zeroed),
        final_stage_activations(dense, images),
        bins,
    )
    report = ShiftReport(sparse_arm, dense_arm, ratio, len(images))
    logger.info(
        "ratio=%.2f images=%d sparse_shift=%.4f dense_shift=%.4f",
        ratio,
        len(images),
        sparse_arm.score,
        dense_arm.score,
    )
    return report

"""Vnaprej izračunani žetoni učitelja v zapisu NTNSR s spremnim opisom."""
import logging
from pathlib import Path

import numpy as np
from masking.masks import full_mask
from tensors import ntnsr

from .encoder import TeacherError, TeacherOutput, ToyTeacher, instance_embedding

logger = logging.getLogger(__name__)

TOKENS_FILE = "tokens.ntnsr"
MANIFEST_FILE = "manifest.txt"
# odstopanja norme vrstic
RENORMALIZE_ABOVE = 1e-6
REJECT_ABOVE = 1e-3


class EmbeddingFileError(TeacherError):
    pass


class TeacherEmbeddings:
    """Ponudnik izhodov učitelja po indeksu primera v podatkovni zbirki."""

    def __init__(self, tokens, manifest):
        self.tokens = tokens
        self.manifest = manifest
        self.embeddings = instance_embedding(tokens)

    def __len__(self):
        return len(self.tokens)

    @property
    def embed_dim(self):
        return self.tokens.shape[-1]

    @property
    def num_tokens(self):
        return self.tokens.shape[1]

    def __getitem__(self, index):
        if not 0 <= index < len(self):
            raise IndexError(
                f"teacher embedding index {index} out of range for {len(self)} instances"
            )
        return TeacherOutput(self.tokens[index], self.embeddings[index])

    def batch(self, indices):
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= len(self)):
            raise IndexError(
                f"teacher embedding indices out of range for {len(self)} instances"
            )
        return TeacherOutput(self.tokens[indices], self.embeddings[indices])


def _normalized_rows(tokens, path):
    norms = np.linalg.norm(tokens, axis=-1)
    deviation = float(np.max(np.abs(norms - 1.0), initial=0.0))
    if deviation > REJECT_ABOVE:
        raise EmbeddingFileError(
            f"{path}: token rows are not unit length (max deviation {deviation:.3g})"
        )
    if deviation > RENORMALIZE_ABOVE:
        logger.warning(
            "path=%s max_deviation=%.3g re-normalizing teacher token rows", path, deviation
        )
        tokens = tokens / norms[..., None]
    return tokens


def load_teacher_embeddings(directory, expected_dim=None, expected_tokens=None):
    directory = Path(directory)
    try:
        manifest = ntnsr.read_manifest(directory / MANIFEST_FILE)
        stored = ntnsr.read_tensor(directory / TOKENS_FILE)
    except (OSError, ntnsr.NTNSRFormatError) as error:
        raise EmbeddingFileError(f"cannot read teacher embeddings: {error}") from error
    if stored.ndim != 3:
        raise EmbeddingFileError(
            f"{directory}: expected (instances, tokens, dim), got shape {stored.shape}"
        )
    count, num_tokens, dim = stored.shape
    for key, actual in (
        ("num_instances", count),
        ("num_tokens", num_tokens),
        ("embed_dim", dim),
    ):
        if key not in manifest:
            raise EmbeddingFileError(f"{directory}: manifest is missing {key!r}")
        if int(manifest[key]) != actual:
            raise EmbeddingFileError(
                f"{directory}: manifest {key}={manifest[key]} but tokens have {actual}"
            )
    if expected_dim is not None and dim != expected_dim:
        raise EmbeddingFileError(
            f"teacher embeddings have dim {dim} but the student head dim is {expected_dim}"
        )
    if expected_tokens is not None and num_tokens != expected_tokens:
        raise EmbeddingFileError(
            f"teacher embeddings have {num_tokens} tokens, the student produces"
            f" {expected_tokens}"
        )
    tokens = _normalized_rows(stored.astype(np.float64), directory)
    logger.info("path=%s instances=%d tokens=%d dim=%d", directory, count, num_tokens, dim)
    return TeacherEmbeddings(tokens, manifest)


def export_teacher_embeddings(
    teacher: ToyTeacher, images, directory, dataset_checksum, batch_size=32
):
    """Zapiše žetone učitelja za nezakrite slike, v istem vrstnem redu."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = teacher.config
    grid = config.token_grid
    chunks = []
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        output = teacher(batch, full_mask(len(batch), grid, grid))
        chunks.append(output.tokens)
    tokens = np.concatenate(chunks).astype(np.float32)
    ntnsr.write_tensor(directory / TOKENS_FILE, tokens)
    ntnsr.write_manifest(
        directory / MANIFEST_FILE,
        {
            "num_instances": tokens.shape[0],
            "num_tokens": tokens.shape[1],
            "embed_dim": tokens.shape[2],
            "patch_size": config.patch_size,
            "normalized": "true",
            "teacher_seed": config.seed,
            "dataset_checksum": dataset_checksum,
        },
    )
    logger.info("path=%s instances=%d exported teacher tokens", directory, len(tokens))
    return tokens

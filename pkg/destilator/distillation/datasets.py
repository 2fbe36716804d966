"""
Sintetična zbirka slik: vsak razred ima svojo usmerjeno sinusno teksturo in
barvni odtenek, vsak primer pa lastno fazo, rahlo odstopanje in šum.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from masking.masks import GRID_FACTOR
from tensors import ntnsr

logger = logging.getLogger(__name__)

IMAGES_FILE = "images.ntnsr"
LABELS_FILE = "labels.ntnsr"
MANIFEST_FILE = "manifest.txt"

LABEL_STREAM = 0
SHUFFLE_STREAM = 2
CROP_PADDING = 4
BRIGHTNESS = 0.2


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    classes: int
    train_count: int
    checksum: str = ""
    path: Path = None

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self):
        return self.images.shape[-1]

    @property
    def val_count(self):
        return len(self) - self.train_count

    @property
    def train_images(self):
        return self.images[: self.train_count]

    @property
    def train_labels(self):
        return self.labels[: self.train_count]

    @property
    def val_images(self):
        return self.images[self.train_count :]

    @property
    def val_labels(self):
        return self.labels[self.train_count :]


def texture(label, classes, image_size, rng):
    angle = np.pi * label / classes + rng.normal(0.0, 0.05)
    frequency = (2 + 2 * (label % 3)) * (1.0 + rng.normal(0.0, 0.05))
    phase = rng.uniform(0.0, 2 * np.pi)
    y, x = np.mgrid[0:image_size, 0:image_size] / image_size
    wave = np.sin(2 * np.pi * frequency * (x * np.cos(angle) + y * np.sin(angle)) + phase)
    tint = 0.6 + 0.4 * np.cos(2 * np.pi * (label / classes + np.arange(3) / 3))
    image = 0.5 + 0.35 * tint[:, None, None] * wave[None]
    image += rng.normal(0.0, 0.05, image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_dataset(n, classes, image_size=64, seed=0):
    """Vrne slike (n, 3, H, W) z vrednostmi v [0, 1] in uravnotežene oznake."""
    if classes < 1:
        raise DatasetError(f"need at least one class, got {classes}")
    if n < classes:
        raise DatasetError(f"need at least one image per class: n={n} < classes={classes}")
    if image_size <= 0 or image_size % GRID_FACTOR:
        raise DatasetError(f"image size must be a positive multiple of 32, got {image_size}")
    labels = np.random.default_rng((seed, LABEL_STREAM)).permutation(np.arange(n) % classes)
    images = np.stack(
        [
            texture(label, classes, image_size, np.random.default_rng((seed, 1, i)))
            for i, label in enumerate(labels)
        ]
    )
    return images, labels


def write_dataset(
    out_dir, n, classes, image_size=64, seed=0, force=False, val_fraction=0.2
):
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DatasetError(f"{out_dir} is not empty; use --force to overwrite")
    images, labels = generate_dataset(n, classes, image_size, seed)
    val_count = int(round(n * val_fraction))
    if not 0 <= val_count < n:
        raise DatasetError(f"validation fraction {val_fraction} leaves no training images")
    out_dir.mkdir(parents=True, exist_ok=True)
    ntnsr.write_tensor(out_dir / IMAGES_FILE, images)
    ntnsr.write_tensor(out_dir / LABELS_FILE, labels)
    ntnsr.write_manifest(
        out_dir / MANIFEST_FILE,
        {
            "n": n,
            "classes": classes,
            "image_size": image_size,
            "train_count": n - val_count,
            "val_count": val_count,
            "seed": seed,
        },
    )
    logger.info("path=%s n=%d classes=%d wrote dataset", out_dir, n, classes)
    return load_dataset(out_dir)


def load_dataset(path):
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"dataset not found: {path}")
    try:
        manifest = ntnsr.read_manifest(path / MANIFEST_FILE)
        images = ntnsr.read_tensor(path / IMAGES_FILE).astype(np.float64)
        labels = np.rint(ntnsr.read_tensor(path / LABELS_FILE)).astype(np.int64)
        n, classes = int(manifest["n"]), int(manifest["classes"])
        train_count = int(manifest["train_count"])
    except (OSError, ntnsr.NTNSRFormatError) as error:
        raise DatasetError(f"cannot read dataset {path}: {error}") from error
    except (KeyError, ValueError) as error:
        raise DatasetError(f"{path / MANIFEST_FILE}: bad or missing entry {error}") from error
    if images.ndim != 4 or len(images) != n or labels.shape != (n,):
        raise DatasetError(
            f"{path}: images {images.shape} and labels {labels.shape} do not match n={n}"
        )
    return Dataset(
        images=images,
        labels=labels,
        classes=classes,
        train_count=train_count,
        checksum=ntnsr.checksum(path / IMAGES_FILE, path / LABELS_FILE),
        path=path,
    )


def steps_per_epoch(count, batch_size):
    steps = count // batch_size
    if steps == 0:
        raise DatasetError(f"{count} training images do not fill a batch of {batch_size}")
    return steps


def epoch_order(count, batch_size, seed, epoch):
    """Premešani indeksi po paketih; nepopoln zadnji paket se izpusti."""
    order = np.random.default_rng((seed, epoch, SHUFFLE_STREAM)).permutation(count)
    return [
        order[start : start + batch_size]
        for start in range(0, steps_per_epoch(count, batch_size) * batch_size, batch_size)
    ]


def batch_indices(step, count, batch_size, seed):
    epoch, offset = divmod(step, steps_per_epoch(count, batch_size))
    return epoch_order(count, batch_size, seed, epoch)[offset]


def augment(images, rng, crop=True, flip=True, jitter=True):
    """Naključni izrez z robom 4, vodoravno zrcaljenje in sprememba svetlosti."""
    images = np.asarray(images, dtype=np.float64)
    out = np.empty_like(images)
    height, width = images.shape[-2:]
    pad = CROP_PADDING
    for n, image in enumerate(images):
        if crop:
            padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
            dy, dx = rng.integers(0, 2 * pad + 1, size=2)
            image = padded[:, dy : dy + height, dx : dx + width]
        if flip and rng.random() < 0.5:
            image = image[:, :, ::-1]
        if jitter:
            image = np.clip(image + rng.uniform(-BRIGHTNESS, BRIGHTNESS), 0.0, 1.0)
        out[n] = image
    return out

"""
Sonda za vrednotenje: dvoslojni perceptron (linearni sloj, ReLU, linearni sloj)
nad povprečeno zbranimi značilkami goste dvojčice študenta.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from students.network import StudentModel, to_dense_model
from tensors import ops
from tensors.autodiff import Tensor, backward, no_grad, recording
from tensors.layers import Linear, Module
from tensors.optim import OptimizerState, optimizer_step, zero_grad

from .datasets import Dataset, epoch_order

logger = logging.getLogger(__name__)

PROBE_STREAM = 5
FEATURES = ("decoder", "encoder")


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    hidden: int = 64
    seed: int = 0
    features: str = "decoder"
    full_finetune: bool = False

    def __post_init__(self):
        if self.features not in FEATURES:
            raise ProbeError(f"unknown probe features {self.features!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ProbeError("probe epochs, batch size and hidden width must be positive")


@dataclass(frozen=True)
class ProbeReport:
    top1: float
    top5: Optional[float]
    classes: int
    train_count: int
    val_count: int


class BackboneFeatures:
    """Gosta dvojčica v načinu vrednotenja; GAP čez S1 ali čez F4."""

    def __init__(self, student: StudentModel, features="decoder"):
        self.model = to_dense_model(student).eval()
        self.features = features

    def parameters(self):
        # glava študenta in pri F4 tudi dekodirnik ne dobita gradienta
        used = ("stem", "stages")
        if self.features == "decoder":
            used += ("decoder", "projections", "mask_embeddings")
        return {
            f"backbone.{name}": param
            for name, param in self.model.named_parameters().items()
            if name.startswith(used)
        }

    def __call__(self, images):
        hierarchy = self.model.full_hierarchy(len(images))
        encoded = self.model.encode(images, hierarchy)
        if self.features == "encoder":
            out = encoded[-1].features
        else:
            out = self.model.decode(encoded)
        return out.mean(axis=(2, 3))


class ProbeHead(Module):
    def __init__(self, in_features, hidden, classes, rng):
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, classes, rng)

    def __call__(self, x):
        return self.fc2(ops.relu(self.fc1(x)))


def extract_features(featurizer, images, batch_size):
    with no_grad():
        chunks = [
            np.asarray(featurizer(images[start : start + batch_size]).data)
            for start in range(0, len(images), batch_size)
        ]
    return np.concatenate(chunks)


def accuracy(logits, labels, k=1):
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def _check_labels(dataset: Dataset):
    if dataset.val_count == 0:
        raise ProbeError("the dataset has no held-out images to evaluate on")
    labels = dataset.labels
    if labels.min() < 0 or labels.max() >= dataset.classes:
        raise ProbeError(
            f"labels span {labels.min()}..{labels.max()} but the dataset declares"
            f" {dataset.classes} classes"
        )


def linear_probe(featurizer, dataset: Dataset, cfg: ProbeConfig = ProbeConfig()):
    """
    Nauči glavo sonde z navzkrižno entropijo na učnem delu in vrne točnost na
    zadržanem delu. Brez `full_finetune` je hrbtenica zamrznjena in značilke
    se izračunajo enkrat.
    """
    _check_labels(dataset)
    train = extract_features(featurizer, dataset.train_images, cfg.batch_size)
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std[std == 0] = 1.0

    rng = np.random.default_rng((cfg.seed, PROBE_STREAM))
    head = ProbeHead(train.shape[1], cfg.hidden, dataset.classes, rng)
    params = head.named_parameters("head.")
    if cfg.full_finetune:
        params.update(featurizer.parameters())
    state = OptimizerState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=0.0, max_grad_norm=None)

    batch_size = min(cfg.batch_size, dataset.train_count)
    for epoch in range(cfg.epochs):
        for indices in epoch_order(dataset.train_count, batch_size, cfg.seed, epoch):
            zero_grad(params)
            with recording():
                if cfg.full_finetune:
                    x = (featurizer(dataset.train_images[indices]) - mean) / std
                else:
                    x = Tensor((train[indices] - mean) / std)
                loss = ops.cross_entropy(head(x), dataset.train_labels[indices])
                backward(loss)
            optimizer_step(state, params)
        logger.debug("epoch=%d probe_loss=%.6g", epoch, loss.item())

    val = extract_features(featurizer, dataset.val_images, cfg.batch_size)
    with no_grad():
        logits = head(Tensor((val - mean) / std)).data
    labels = dataset.val_labels
    report = ProbeReport(
        top1=accuracy(logits, labels),
        top5=accuracy(logits, labels, 5) if dataset.classes > 5 else None,
        classes=dataset.classes,
        train_count=dataset.train_count,
        val_count=dataset.val_count,
    )
    logger.info("top1=%.4f top5=%s val=%d probe finished", report.top1, report.top5, report.val_count)
    return report

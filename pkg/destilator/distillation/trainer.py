"""
Zanka destilacije. En korak sledi fazam v StepProtocol: povečava podatkov,
učitelj, študent, izguba značilk, vstavljanje v vrsto, podobnost učitelja,
podobnost študenta, Pearsonova izguba in posodobitev parametrov.
"""
import csv
import logging
import time
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np
from masking.masks import GRID_FACTOR, generate_masks, hierarchy_for_images
from students.network import StudentModel
from teachers.embeddings import TeacherEmbeddings, load_teacher_embeddings
from teachers.encoder import TeacherError, ToyTeacher
from tensors import ops
from tensors.autodiff import NonFiniteValue, backward, no_grad, recording
from tensors.optim import OptimizerState, optimizer_step, zero_grad

from .checkpoints import save_checkpoint
from .datasets import Dataset, DatasetError, augment, batch_indices, steps_per_epoch
from .losses import LossBreakdown, feature_mse, pearson_loss
from .models import DistillConfig
from .queue import (
    MemoryQueue,
    StepProtocol,
    enqueue_batch,
    student_similarity,
    teacher_similarity,
)
from .schedule import LRSchedule, lr_at

logger = logging.getLogger(__name__)

MASK_STREAM = 0
AUGMENT_STREAM = 1
METRICS_FILE = "metrics.csv"


class NumericFailure(FloatingPointError):
    def __init__(self, step, message):
        self.step = step
        super().__init__(f"step {step}: {message}")


@dataclass(frozen=True)
class StepRecord:
    step: int
    lr: float
    l_sim: float
    l_feat: float
    total: float
    queue_fill: float
    ms: float

    def without_timing(self):
        return astuple(self)[:-1]


class RunMetrics:
    HEADER = tuple(field.name for field in fields(StepRecord))

    def __init__(self, records=()):
        self.records = []
        for record in records:
            self.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, index):
        return self.records[index]

    def append(self, record: StepRecord):
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(
                f"metrics step {record.step} after step {self.records[-1].step}"
            )
        self.records.append(record)

    def truncate(self, steps):
        """Obdrži zapise korakov pod `steps`, npr. ob nadaljevanju s kontrolne točke."""
        self.records = [record for record in self.records if record.step < steps]

    def write(self, path):
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(self.HEADER)
            for record in self.records:
                writer.writerow(
                    [record.step] + [repr(value) for value in astuple(record)[1:]]
                )

    @classmethod
    def read(cls, path):
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            header = tuple(next(reader, ()))
            if header != cls.HEADER:
                raise ValueError(f"{path}: unexpected metrics header {header}")
            return cls(
                StepRecord(int(row[0]), *(float(value) for value in row[1:]))
                for row in reader
            )


def build_teacher(config: DistillConfig, dataset: Dataset, num_tokens):
    """Majhen transformer ali ponudnik žetonov, izvoženih v datoteko."""
    if config.teacher_kind == "toy":
        return ToyTeacher(config.teacher_config())
    provider = load_teacher_embeddings(
        config.teacher_path, expected_dim=config.embed_dim, expected_tokens=num_tokens
    )
    if len(provider) != len(dataset):
        raise TeacherError(
            f"teacher embeddings hold {len(provider)} instances, dataset has {len(dataset)}"
        )
    return provider


class Trainer:
    def __init__(self, config: DistillConfig, dataset: Dataset, output_dir=None):
        self.config = config
        self.dataset = dataset
        self.output_dir = Path(output_dir or config.output_dir)
        student_config = config.student_config()
        if dataset.image_size != student_config.image_size:
            raise DatasetError(
                f"dataset images are {dataset.image_size}px, config expects"
                f" {student_config.image_size}px"
            )
        self.student = StudentModel(student_config)
        self.params = self.student.named_parameters()
        self.teacher = build_teacher(config, dataset, student_config.num_tokens)
        student_config.check_teacher_dim(self.teacher_dim)
        self.queue = MemoryQueue(config.queue_size, config.embed_dim)
        self.optimizer = OptimizerState(
            lr=config.learning_rate,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
            max_grad_norm=config.max_grad_norm or None,
            trust_ratio=config.optimizer == "lamb",
        )
        self.steps_per_epoch = steps_per_epoch(dataset.train_count, config.batch_size)
        self.schedule = LRSchedule.from_config(config, self.steps_per_epoch)
        self.protocol = StepProtocol()
        self.metrics = RunMetrics()
        self.step = 0

    @property
    def teacher_dim(self):
        if isinstance(self.teacher, TeacherEmbeddings):
            return self.teacher.embed_dim
        return self.teacher.config.embed_dim

    @property
    def total_steps(self):
        return self.schedule.total_steps

    def batch_indices(self, step):
        return batch_indices(
            step, self.dataset.train_count, self.config.batch_size, self.config.seed
        )

    def teacher_targets(self, images, mask, indices):
        # žetoni iz datoteke so izračunani na nezakritih slikah brez povečave
        if isinstance(self.teacher, TeacherEmbeddings):
            return self.teacher.batch(indices)
        return self.teacher(images, mask)

    def distill_step(self, indices=None):
        config, step, protocol = self.config, self.step, self.protocol
        indices = self.batch_indices(step) if indices is None else np.asarray(indices)
        started = time.perf_counter()
        protocol.begin()
        try:
            protocol.enter("augment")
            rng = np.random.default_rng((config.seed, step, AUGMENT_STREAM))
            images = augment(
                self.dataset.train_images[indices], rng, config.crop, config.flip, config.jitter
            )
            grid = config.image_size // GRID_FACTOR
            mask = generate_masks(
                len(indices), grid, grid, config.mask_ratio, (config.seed, step, MASK_STREAM)
            )
            hierarchy = hierarchy_for_images(mask, config.image_size)

            protocol.enter("teacher")
            with no_grad():
                teacher_mask = protocol.teacher_mask(hierarchy)
                target = self.teacher_targets(images, teacher_mask, indices)

            with recording():
                protocol.enter("student")
                tokens = self.student(images, protocol.check_student_mask(hierarchy))
                embedding = ops.l2_normalize(tokens.mean(axis=1), axis=-1)

                protocol.enter("feature_loss")
                l_feat = feature_mse(target.tokens, tokens)

                protocol.enter("enqueue")
                enqueue_batch(self.queue, target.instance_embedding)

                protocol.enter("teacher_similarity")
                p_t = None
                if self.queue.full:
                    p_t = teacher_similarity(
                        target.instance_embedding, self.queue, config.temperature
                    )

                protocol.enter("student_similarity")
                p_s = None
                if p_t is not None:
                    p_s = student_similarity(
                        embedding,
                        target.instance_embedding,
                        self.queue,
                        config.temperature,
                        config.similarity_mode,
                    )

                protocol.enter("similarity_loss")
                l_sim = pearson_loss(p_t, p_s) if p_t is not None else None
                breakdown = LossBreakdown.combine(l_sim, l_feat, config.weights)
                if not breakdown.is_finite():
                    raise NonFiniteValue(f"non-finite loss {breakdown}")

                protocol.enter("update")
                lr = lr_at(step, self.schedule)
                self.optimizer.lr = lr
                zero_grad(self.params)
                backward(breakdown.loss)
                optimizer_step(self.optimizer, self.params)
        except NonFiniteValue as error:
            logger.error("step=%d aborting run on non-finite value: %s", step, error)
            raise NumericFailure(step, str(error)) from error

        record = StepRecord(
            step=step,
            lr=lr,
            l_sim=breakdown.l_sim,
            l_feat=breakdown.l_feat,
            total=breakdown.total,
            queue_fill=self.queue.fill,
            ms=round((time.perf_counter() - started) * 1000, 3),
        )
        self.metrics.append(record)
        self.step += 1
        logger.info(
            "step=%d lr=%.6g l_sim=%.6g l_feat=%.6g total=%.6g queue_fill=%.3f warmup=%s",
            step,
            lr,
            breakdown.l_sim,
            breakdown.l_feat,
            breakdown.total,
            self.queue.fill,
            breakdown.warmup,
        )
        return breakdown

    def run(self, steps=None, checkpoint=None):
        """
        Izvaja korake do `steps` (privzeto do konca razporeda) in sproti shranjuje
        kontrolne točke ter datoteko z metrikami.
        """
        until = self.total_steps if steps is None else steps
        every = self.config.checkpoint_every
        self.output_dir.mkdir(parents=True, exist_ok=True)
        while self.step < until:
            self.distill_step()
            if every and self.step % every == 0 and self.step < until:
                save_checkpoint(self, checkpoint)
                self.metrics.write(self.output_dir / METRICS_FILE)
        save_checkpoint(self, checkpoint)
        self.metrics.write(self.output_dir / METRICS_FILE)
        return self.metrics


def ablation_configs(base: DistillConfig):
    """Sedem različic: polna, brez posamezne sestavine in s posamezno sestavino."""
    arms = {
        "full": {},
        "without_unet": {"unet": False},
        "without_sparse": {"sparse": False},
        "without_similarity": {"weight_sim": 0.0},
        "only_similarity": {"sparse": False, "unet": False},
        "only_sparse": {"unet": False, "weight_sim": 0.0},
        "only_unet": {"sparse": False, "weight_sim": 0.0},
    }
    return {
        name: base.copy(
            name=f"{base.name or 'run'}-{name}",
            output_dir=str(Path(base.output_dir) / name),
            **changes,
        )
        for name, changes in arms.items()
    }

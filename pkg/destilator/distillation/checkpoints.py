"""
Kontrolne točke za natančno nadaljevanje: parametri, tekoče statistike,
medpomnilniki optimizatorja in vrsta v 64-bitnem zapisu NTNSR, opis v JSON.
"""
import json
import logging
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from students.network import StudentConfig, StudentConfigError, StudentModel
from tensors import ntnsr

from .queue import MemoryQueue, QueueError

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoint"
DESCRIPTION_FILE = "checkpoint.json"
CONFIG_FILE = "config.ini"
GROUPS = ("params", "buffers", "optimizer")


class CheckpointError(ValueError):
    pass


def _pack(arrays):
    names = list(arrays)
    shapes = [list(np.shape(arrays[name])) for name in names]
    flat = [np.asarray(arrays[name], dtype=np.float64).ravel() for name in names]
    return np.concatenate(flat) if flat else np.zeros(0), {"names": names, "shapes": shapes}


def _unpack(flat, layout, source):
    arrays, offset = {}, 0
    for name, shape in zip(layout["names"], layout["shapes"]):
        size = int(np.prod(shape, dtype=np.int64))
        if offset + size > flat.size:
            raise CheckpointError(f"{source}: data ends before {name!r}")
        arrays[name] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    if offset != flat.size:
        raise CheckpointError(f"{source}: {flat.size - offset} values left after unpacking")
    return arrays


def checkpoint_dir(trainer, directory=None):
    return Path(directory) if directory else trainer.output_dir / CHECKPOINT_DIR


def save_checkpoint(trainer, directory=None):
    directory = checkpoint_dir(trainer, directory)
    directory.mkdir(parents=True, exist_ok=True)
    groups = {
        "params": {name: param.data for name, param in trainer.params.items()},
        "buffers": trainer.student.named_buffers(),
        "optimizer": trainer.optimizer.buffers,
    }
    layouts = {}
    for group, arrays in groups.items():
        flat, layouts[group] = _pack(arrays)
        ntnsr.write_tensor(directory / f"{group}.ntnsr", flat, double=True)
    ntnsr.write_tensor(directory / "queue.ntnsr", trainer.queue.buffer, double=True)
    description = {
        "step": trainer.step,
        "config_hash": trainer.config.config_hash(),
        "seed": trainer.config.seed,
        "teacher_seed": trainer.config.teacher_seed,
        "student": asdict(trainer.student.config),
        "optimizer_step": trainer.optimizer.step,
        "queue": {"cursor": trainer.queue.cursor, "count": trainer.queue.count},
        "layouts": layouts,
    }
    (directory / DESCRIPTION_FILE).write_text(json.dumps(description, indent=2))
    (directory / CONFIG_FILE).write_text(trainer.config.to_text())
    logger.info("step=%d path=%s saved checkpoint", trainer.step, directory)
    return directory


def read_checkpoint(directory):
    """Prebere opis in vse tabele; vsaka nepravilnost sproži CheckpointError."""
    directory = Path(directory)
    if not (directory / DESCRIPTION_FILE).exists():
        raise CheckpointError(f"no checkpoint at {directory}")
    try:
        description = json.loads((directory / DESCRIPTION_FILE).read_text())
        arrays = {
            group: _unpack(
                ntnsr.read_tensor(directory / f"{group}.ntnsr"),
                description["layouts"][group],
                directory / f"{group}.ntnsr",
            )
            for group in GROUPS
        }
        arrays["queue"] = ntnsr.read_tensor(directory / "queue.ntnsr")
        description["student"]["widths"] = tuple(description["student"]["widths"])
        description["student_config"] = StudentConfig(**description["student"])
    except json.JSONDecodeError as error:
        raise CheckpointError(
            f"{directory / DESCRIPTION_FILE}:{error.lineno}: {error.msg}"
        ) from error
    except (OSError, ntnsr.NTNSRFormatError) as error:
        raise CheckpointError(f"cannot read checkpoint {directory}: {error}") from error
    except (KeyError, TypeError, StudentConfigError) as error:
        raise CheckpointError(
            f"{directory / DESCRIPTION_FILE}: malformed description ({error})"
        ) from error
    return description, arrays


def differing_fields(expected: StudentConfig, actual: StudentConfig):
    return [
        field.name
        for field in fields(StudentConfig)
        if getattr(expected, field.name) != getattr(actual, field.name)
    ]


def load_checkpoint(trainer, directory=None):
    """Obnovi stanje trenerja; nastavitve morajo biti enake kot ob shranjevanju."""
    directory = checkpoint_dir(trainer, directory)
    description, arrays = read_checkpoint(directory)
    differing = differing_fields(description["student_config"], trainer.student.config)
    if differing:
        raise CheckpointError(
            f"checkpoint student config differs in: {', '.join(differing)}"
        )
    config_hash = trainer.config.config_hash()
    if description["config_hash"] != config_hash:
        raise CheckpointError(
            f"checkpoint config hash {description['config_hash'][:12]} does not match"
            f" the run config {config_hash[:12]}"
        )
    params = arrays["params"]
    if set(params) != set(trainer.params):
        raise CheckpointError(f"{directory}: parameter names do not match the student")
    for name, param in trainer.params.items():
        if params[name].shape != param.shape:
            raise CheckpointError(
                f"{directory}: {name} has shape {params[name].shape}, expected {param.shape}"
            )
        param.data = params[name]
        param.grad = None
    try:
        trainer.student.load_buffers(arrays["buffers"])
    except KeyError as error:
        raise CheckpointError(f"{directory}: missing normalization buffer {error}") from error
    trainer.optimizer.buffers = arrays["optimizer"]
    trainer.optimizer.step = description["optimizer_step"]
    try:
        trainer.queue = MemoryQueue.from_state(arrays["queue"], **description["queue"])
    except QueueError as error:
        raise CheckpointError(f"{directory}: {error}") from error
    trainer.step = description["step"]
    trainer.metrics.truncate(trainer.step)
    logger.info("step=%d path=%s resumed from checkpoint", trainer.step, directory)
    return trainer


def load_student(directory):
    """Študent s parametri in statistikami iz kontrolne točke, npr. za sondo."""
    description, arrays = read_checkpoint(directory)
    student = StudentModel(description["student_config"])
    params = student.named_parameters()
    for name, param in params.items():
        if name not in arrays["params"] or arrays["params"][name].shape != param.shape:
            raise CheckpointError(f"{directory}: parameter {name!r} missing or misshapen")
        param.data = arrays["params"][name]
    student.load_buffers(arrays["buffers"])
    return student

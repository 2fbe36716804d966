import math
from dataclasses import dataclass


@dataclass(frozen=True)
class LRSchedule:
    """Linearno ogrevanje od 0 do osnovne stopnje, nato kosinusni upad do 0."""

    base_lr: float
    warmup_steps: int
    total_steps: int

    @classmethod
    def from_config(cls, config, steps_per_epoch):
        return cls(
            base_lr=config.learning_rate,
            warmup_steps=config.warmup_epochs * steps_per_epoch,
            total_steps=config.epochs * steps_per_epoch,
        )


def lr_at(step, schedule: LRSchedule):
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    decay_steps = schedule.total_steps - schedule.warmup_steps
    if decay_steps <= 0:
        return schedule.base_lr
    progress = min((step - schedule.warmup_steps) / decay_steps, 1.0)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))

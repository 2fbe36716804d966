"""
Ablacije: vsako različico destilacije naučimo z istim semenom in jo ocenimo s
sondo, za primerjavo pa še naključno inicializirano hrbtenico.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from students.network import StudentModel

from .datasets import Dataset
from .models import DistillConfig, RunManifest
from .probe import BackboneFeatures, ProbeConfig, linear_probe
from .trainer import Trainer, ablation_configs

logger = logging.getLogger(__name__)

FULL_ARM = "full"
RANDOM_ARM = "random"
# destilirana hrbtenica mora biti vsaj toliko boljša od naključne
MIN_GAIN = 0.05

ABLATION_HEADER = ("seed", "arm", "top1", "top5", "steps")


@dataclass(frozen=True)
class ArmResult:
    seed: int
    arm: str
    top1: float
    top5: Optional[float]
    steps: int

    def as_row(self):
        return (self.seed, self.arm, self.top1, "" if self.top5 is None else self.top5, self.steps)


def seed_config(base: DistillConfig, seed):
    return base.copy(
        name=f"{base.name or 'run'}-seed{seed}",
        seed=seed,
        output_dir=str(Path(base.output_dir) / f"seed{seed}"),
    )


def _probe(student, dataset, cfg: ProbeConfig):
    return linear_probe(BackboneFeatures(student, cfg.features), dataset, cfg)


def run_ablation(
    base: DistillConfig,
    dataset: Dataset,
    seeds,
    probe_cfg: ProbeConfig,
    steps=None,
    arms=None,
):
    """
    Za vsako seme nauči izbrane različice (privzeto vseh sedem), zapiše njihove
    opise zagonov in vrne točnosti sonde, vključno z naključno hrbtenico.
    """
    results = []
    for seed in seeds:
        configs = ablation_configs(seed_config(base, seed))
        if arms is not None:
            configs = {name: config for name, config in configs.items() if name in arms}
        cfg = replace(probe_cfg, seed=seed)
        baseline = None
        for name, config in configs.items():
            trainer = Trainer(config, dataset)
            RunManifest.record(config, dataset.checksum, trainer.output_dir)
            trainer.run(steps)
            report = _probe(trainer.student, dataset, cfg)
            results.append(ArmResult(seed, name, report.top1, report.top5, trainer.step))
            logger.info("seed=%d arm=%s top1=%.4f steps=%d", seed, name, report.top1, trainer.step)
            if baseline is None or name == FULL_ARM:
                baseline = trainer.student.config
        if baseline is not None:
            report = _probe(StudentModel(replace(baseline, seed=seed)), dataset, cfg)
            results.append(ArmResult(seed, RANDOM_ARM, report.top1, report.top5, 0))
            logger.info("seed=%d arm=%s top1=%.4f", seed, RANDOM_ARM, report.top1)
    return results


@dataclass(frozen=True)
class SeedVerdict:
    seed: int
    gain: Optional[float]
    beaten_by: tuple

    @property
    def passed(self):
        return self.gain is not None and self.gain >= MIN_GAIN and not self.beaten_by


def verdicts(results):
    """Po semenih: prednost polne različice pred naključno in različice, ki jo prehitijo."""
    by_seed = {}
    for result in results:
        by_seed.setdefault(result.seed, {})[result.arm] = result.top1
    out = []
    for seed, top1 in by_seed.items():
        full = top1.get(FULL_ARM)
        if full is None:
            out.append(SeedVerdict(seed, None, ()))
            continue
        gain = full - top1[RANDOM_ARM] if RANDOM_ARM in top1 else None
        beaten_by = tuple(
            arm for arm, value in top1.items() if arm not in (FULL_ARM, RANDOM_ARM) and value > full
        )
        out.append(SeedVerdict(seed, gain, beaten_by))
    return out

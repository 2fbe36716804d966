import csv
from pathlib import Path

from django.core.management import CommandError

from ...ablation import ABLATION_HEADER, RANDOM_ARM, run_ablation, verdicts
from ...datasets import load_dataset
from ...forms import read_config
from ...probe import ProbeConfig
from ...trainer import ablation_configs
from ..base import EXIT_USAGE, DistillationCommand, exit_codes


class Command(DistillationCommand):
    help = "Nauči in s sondo oceni vse različice ablacije za več semen."

    def add_arguments(self, parser):
        parser.add_argument("config_path")
        parser.add_argument("--seeds", default="0,1,2", help="semena, ločena z vejico")
        parser.add_argument("--arms", help="izbrane različice, ločene z vejico")
        parser.add_argument("--steps", type=int, help="korakov destilacije na različico")
        parser.add_argument("--probe-epochs", type=int, default=30)
        parser.add_argument("--batch-size", type=int, default=32)
        parser.add_argument("--probe-lr", type=float, default=0.1)
        parser.add_argument("--hidden", type=int, default=64)
        parser.add_argument("--features", choices=["decoder", "encoder"], default="decoder")
        parser.add_argument("--output", help="datoteka CSV s tabelo top-1 po semenih")

    def handle(self, *args, **options):
        seeds = self.integers("--seeds", options["seeds"])
        with exit_codes():
            base = read_config(options["config_path"])
            arms = None
            if options["arms"]:
                arms = [arm.strip() for arm in options["arms"].split(",")]
                unknown = set(arms) - set(ablation_configs(base))
                if unknown:
                    raise CommandError(
                        f"unknown ablation arms {sorted(unknown)}", returncode=EXIT_USAGE
                    )
            dataset = load_dataset(base.dataset)
            probe_cfg = ProbeConfig(
                epochs=options["probe_epochs"],
                batch_size=options["batch_size"],
                lr=options["probe_lr"],
                hidden=options["hidden"],
                features=options["features"],
            )
            results = run_ablation(base, dataset, seeds, probe_cfg, options["steps"], arms)

        output = Path(options["output"] or Path(base.output_dir) / "ablation.csv")
        output.parent.mkdir(parents=True, exist_ok=True)
        with open(output, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(ABLATION_HEADER)
            writer.writerows(result.as_row() for result in results)

        for seed in seeds:
            row = "  ".join(
                f"{result.arm}={100 * result.top1:.2f}" for result in results if result.seed == seed
            )
            self.stdout.write(f"seed={seed}  {row}")
        for verdict in verdicts(results):
            if verdict.gain is None:
                continue
            line = f"seed={verdict.seed} full-{RANDOM_ARM}={100 * verdict.gain:+.2f}"
            if verdict.beaten_by:
                line += f" beaten by {','.join(verdict.beaten_by)}"
            self.stdout.write(line)
        self.success(f"tabela ablacij v {output}")

    def integers(self, flag, text):
        try:
            return [int(part) for part in text.split(",")]
        except ValueError:
            raise CommandError(
                f"{flag} expects integers, got {text!r}", returncode=EXIT_USAGE
            ) from None

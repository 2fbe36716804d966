from pathlib import Path

from ...checkpoints import load_checkpoint
from ...datasets import load_dataset
from ...forms import read_config
from ...models import RunManifest
from ...trainer import METRICS_FILE, RunMetrics, Trainer
from ..base import DistillationCommand, exit_codes


class Command(DistillationCommand):
    help = "Destilira študenta po nastavitvah iz datoteke INI."

    def add_arguments(self, parser):
        parser.add_argument("config_path")
        parser.add_argument(
            "--resume", action="store_true", help="nadaljuj z zadnje kontrolne točke"
        )
        parser.add_argument(
            "--steps", type=int, help="ustavi se po tem številu korakov (skupno)"
        )
        parser.add_argument("--output", help="izhodna mapa namesto tiste iz nastavitev")

    def handle(self, *args, **options):
        with exit_codes():
            config = read_config(options["config_path"])
            dataset = load_dataset(config.dataset)
            output_dir = Path(options["output"] or config.output_dir)
            trainer = Trainer(config, dataset, output_dir)
            if options["resume"]:
                if (output_dir / METRICS_FILE).exists():
                    trainer.metrics = RunMetrics.read(output_dir / METRICS_FILE)
                load_checkpoint(trainer)
            else:
                RunManifest.record(config, dataset.checksum, output_dir)
            metrics = trainer.run(options["steps"])
        last = metrics[-1] if len(metrics) else None
        summary = f"{trainer.step} korakov, metrike v {output_dir / METRICS_FILE}"
        if last is not None:
            summary += f", zadnja izguba {last.total:.6g}"
        self.success(summary)

import csv
from dataclasses import replace
from pathlib import Path

from students.network import StudentModel

from ...checkpoints import load_student
from ...datasets import load_dataset
from ...probe import BackboneFeatures, ProbeConfig, ProbeError, linear_probe
from ..base import DistillationCommand, exit_codes


class Command(DistillationCommand):
    help = "Sonda nad destiliranim študentom in naključno inicializirano hrbtenico."

    def add_arguments(self, parser):
        parser.add_argument("checkpoint", help="mapa kontrolne točke")
        parser.add_argument("dataset")
        parser.add_argument(
            "--pretrained", help="kontrolna točka predučenja brez destilacije za primerjavo"
        )
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--epochs", type=int, default=30)
        parser.add_argument("--batch-size", type=int, default=32)
        parser.add_argument("--lr", type=float, default=0.1)
        parser.add_argument("--hidden", type=int, default=64)
        parser.add_argument("--features", choices=["decoder", "encoder"], default="decoder")
        parser.add_argument("--full-finetune", action="store_true")
        parser.add_argument("--output", help="datoteka CSV s poročilom")

    def handle(self, *args, **options):
        cfg = ProbeConfig(
            epochs=options["epochs"],
            batch_size=options["batch_size"],
            lr=options["lr"],
            hidden=options["hidden"],
            seed=options["seed"],
            features=options["features"],
            full_finetune=options["full_finetune"],
        )
        with exit_codes():
            dataset = load_dataset(options["dataset"])
            distilled = load_student(options["checkpoint"])
            arms = {
                "distilled": distilled,
                "random": StudentModel(replace(distilled.config, seed=options["seed"])),
            }
            if options["pretrained"]:
                arms["pretrained"] = load_student(options["pretrained"])
            reports = {}
            for arm, student in arms.items():
                if student.config.image_size != dataset.image_size:
                    raise ProbeError(
                        f"{arm} backbone expects {student.config.image_size}px images,"
                        f" the dataset has {dataset.image_size}px"
                    )
                reports[arm] = linear_probe(
                    BackboneFeatures(student, cfg.features), dataset, cfg
                )

        output = Path(options["output"] or Path(options["checkpoint"]) / "probe.csv")
        with open(output, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["arm", "top1", "top5"])
            for arm, report in reports.items():
                top5 = "" if report.top5 is None else repr(report.top5)
                writer.writerow([arm, repr(report.top1), top5])
        for arm, report in reports.items():
            top5 = "-" if report.top5 is None else f"{100 * report.top5:.2f}"
            self.stdout.write(f"{arm:<12} top1={100 * report.top1:.2f} top5={top5}")
        self.success(f"poročilo sonde v {output}")

from pathlib import Path

from distillation.checkpoints import load_student
from distillation.datasets import generate_dataset, load_dataset
from distillation.management.base import EXIT_USAGE, DistillationCommand, exit_codes
from django.conf import settings
from django.core.management import CommandError
from masking.masks import generate_mask, upsample_map
from students.network import StudentConfig, StudentModel

from ...erosion import EROSION_HEADER, erosion_table
from ...reports import (
    HISTOGRAM_HEADER,
    SHIFT_HEADER,
    erosion_blocks,
    histogram_blocks,
    shift_rows,
    write_csv,
    write_gnuplot,
)
from ...shift import distribution_shift


class Command(DistillationCommand):
    help = "Premik porazdelitve aktivacij (shift) ali erozija zakritih območij (erosion)."

    def add_arguments(self, parser):
        parser.add_argument("kind", choices=["shift", "erosion"])
        parser.add_argument("--ratio", type=float, default=0.6, help="delež zakritih zaplat")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--output", help="datoteka CSV s poročilom")
        parser.add_argument("--gnuplot", help="dodatna datoteka s stolpci za gnuplot")
        shift = parser.add_argument_group("shift")
        shift.add_argument("--checkpoint", help="študent iz kontrolne točke; sicer naključen")
        shift.add_argument("--dataset", help="slike iz zbirke; sicer sintetične")
        shift.add_argument("--images", type=int, default=100)
        shift.add_argument("--image-size", type=int, default=128)
        shift.add_argument("--widths", default="4,4,8,8")
        shift.add_argument("--bins", type=int)
        erosion = parser.add_argument_group("erosion")
        erosion.add_argument("--depth", type=int, default=8)
        erosion.add_argument("--grid", type=int, default=4, help="stranica mreže maske")
        erosion.add_argument("--size", type=int, default=32, help="stranica indikatorske slike")

    def handle(self, *args, **options):
        kind = options["kind"]
        if options["depth"] < 1:
            raise CommandError("--depth must be at least 1", returncode=EXIT_USAGE)
        output = Path(
            options["output"] or settings.DESTILATOR["OUTPUT_ROOT"] / "diagnostics" / f"{kind}.csv"
        )
        with exit_codes():
            if kind == "shift":
                self.shift(output, options)
            else:
                self.erosion(output, options)
        self.success(f"poročilo v {output}")

    def shift(self, output, options):
        if options["checkpoint"]:
            student = load_student(options["checkpoint"])
        else:
            try:
                widths = tuple(int(part) for part in options["widths"].split(","))
            except ValueError:
                raise CommandError(
                    f"--widths expects integers, got {options['widths']!r}", returncode=EXIT_USAGE
                ) from None
            config = StudentConfig(
                widths=widths, blocks=1, image_size=options["image_size"], seed=options["seed"]
            )
            student = StudentModel(config)
        size = student.config.image_size
        if options["dataset"]:
            images = load_dataset(options["dataset"]).images[: options["images"]]
        else:
            images, _ = generate_dataset(options["images"], 4, size, options["seed"])
        report = distribution_shift(
            student, images, options["ratio"], options["seed"], options["bins"]
        )
        write_csv(output, SHIFT_HEADER, shift_rows(report))
        if options["gnuplot"]:
            write_gnuplot(options["gnuplot"], HISTOGRAM_HEADER, histogram_blocks(report))
        self.stdout.write(f"sparse shift={report.sparse.score:.4f}")
        self.stdout.write(f"dense shift={report.dense.score:.4f}")
        self.stdout.write(report.verdict)

    def erosion(self, output, options):
        grid, size = options["grid"], options["size"]
        mask = generate_mask(grid, grid, options["ratio"], options["seed"])
        visible = upsample_map(mask.visible, size, size)
        table = erosion_table(visible, options["depth"])
        write_csv(output, EROSION_HEADER, table)
        if options["gnuplot"]:
            write_gnuplot(options["gnuplot"], ("layer", "fraction"), erosion_blocks(table))
        for layer, dense, sparse in table:
            self.stdout.write(f"{layer:>3} dense={dense:.4f} sparse={sparse:.4f}")

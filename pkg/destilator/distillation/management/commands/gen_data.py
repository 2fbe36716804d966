from ...datasets import write_dataset
from ..base import DistillationCommand, exit_codes


class Command(DistillationCommand):
    help = "Ustvari sintetično zbirko slik z razredno odvisnimi teksturami."

    def add_arguments(self, parser):
        parser.add_argument("out_dir")
        parser.add_argument("--n", type=int, default=2500, help="število slik")
        parser.add_argument("--classes", type=int, default=4)
        parser.add_argument("--image-size", type=int, default=64)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--val-fraction", type=float, default=0.2)
        parser.add_argument(
            "--force", action="store_true", help="prepiši obstoječo neprazno mapo"
        )

    def handle(self, *args, **options):
        with exit_codes():
            dataset = write_dataset(
                options["out_dir"],
                options["n"],
                options["classes"],
                image_size=options["image_size"],
                seed=options["seed"],
                force=options["force"],
                val_fraction=options["val_fraction"],
            )
        self.success(
            f"{len(dataset)} slik ({dataset.train_count} učnih, {dataset.val_count}"
            f" testnih) v {dataset.path}, kontrolna vsota {dataset.checksum[:12]}"
        )

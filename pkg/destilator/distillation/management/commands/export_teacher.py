from teachers.embeddings import export_teacher_embeddings
from teachers.encoder import ToyTeacher

from ...datasets import load_dataset
from ...forms import read_config
from ...models import DistillConfig
from ..base import DistillationCommand, exit_codes


class Command(DistillationCommand):
    help = "Izvozi žetone učitelja za vse slike zbirke (za vrsto učitelja 'file')."

    def add_arguments(self, parser):
        parser.add_argument("dataset")
        parser.add_argument("out")
        parser.add_argument(
            "--config", help="nastavitve INI z razdelkom [teacher]; sicer privzete vrednosti"
        )
        parser.add_argument("--batch-size", type=int, default=32)

    def handle(self, *args, **options):
        with exit_codes():
            dataset = load_dataset(options["dataset"])
            if options["config"]:
                config = read_config(options["config"])
            else:
                config = DistillConfig(image_size=dataset.image_size)
            teacher = ToyTeacher(config.teacher_config())
            tokens = export_teacher_embeddings(
                teacher, dataset.images, options["out"], dataset.checksum, options["batch_size"]
            )
        self.success(
            f"{tokens.shape[0]} primerov, {tokens.shape[1]} žetonov dimenzije"
            f" {tokens.shape[2]} v {options['out']}"
        )

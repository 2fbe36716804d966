import hashlib
import json
import subprocess
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.validators import MaxValueValidator, MinValueValidator
from django.db import models
from students.network import StudentConfig
from teachers.encoder import TeacherConfig


def parse_widths(text):
    try:
        widths = tuple(int(part) for part in str(text).split(","))
    except ValueError:
        raise ValidationError(
            f"Širine morajo biti cela števila, ločena z vejico: {text}"
        ) from None
    if len(widths) != 4 or min(widths) <= 0:
        raise ValidationError("Potrebne so štiri pozitivne širine stopenj.")
    return widths


def build_identifier():
    try:
        result = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            cwd=settings.BASE_DIR,
            text=True,
        )
    except OSError:
        return "unknown"
    return result.stdout.strip() if result.returncode == 0 else "unknown"


class DistillConfig(models.Model):
    SECTIONS = {
        "data": ["dataset", "image_size"],
        "student": ["widths", "blocks", "activation", "sparse", "unet"],
        "teacher": [
            "teacher_kind",
            "teacher_path",
            "patch_size",
            "embed_dim",
            "teacher_depth",
            "teacher_heads",
            "teacher_seed",
        ],
        "train": [
            "epochs",
            "batch_size",
            "learning_rate",
            "warmup_epochs",
            "optimizer",
            "momentum",
            "weight_decay",
            "max_grad_norm",
        ],
        "distill": [
            "temperature",
            "queue_size",
            "mask_ratio",
            "weight_sim",
            "weight_feat",
            "similarity_mode",
        ],
        "augment": ["crop", "flip", "jitter"],
        "run": ["name", "seed", "output_dir", "checkpoint_every"],
    }

    name = models.CharField("ime", max_length=255, blank=True, default="")
    dataset = models.CharField(
        "podatkovna zbirka",
        max_length=500,
        help_text="Mapa s sintetično zbirko (images.ntnsr, labels.ntnsr, manifest.txt).",
        default="data/synthetic",
    )
    image_size = models.PositiveSmallIntegerField(
        "velikost slike",
        help_text="Stranica kvadratne slike; deljiva z 32.",
        default=64,
        validators=[MinValueValidator(32)],
    )
    widths = models.CharField(
        "širine stopenj",
        max_length=100,
        help_text="Število kanalov štirih stopenj kodirnika, ločeno z vejico.",
        default="32,64,128,256",
    )
    blocks = models.PositiveSmallIntegerField(
        "bloki na stopnjo",
        help_text="Število preostalih blokov v vsaki stopnji kodirnika.",
        default=2,
    )
    activation = models.CharField(
        "aktivacija",
        max_length=10,
        choices=[("relu", "ReLU"), ("gelu", "GELU")],
        default="relu",
    )
    sparse = models.BooleanField(
        "redek kodirnik",
        help_text="Če ni izbrano, gost kodirnik dobi sliko z ničlami na zakritih mestih.",
        default=True,
    )
    unet = models.BooleanField(
        "povezave UNet",
        help_text="Bočne povezave phi_i(F_i + M_i) med kodirnikom in dekodirnikom.",
        default=True,
    )
    teacher_kind = models.CharField(
        "vrsta učitelja",
        max_length=10,
        choices=[("toy", "majhen transformer"), ("file", "žetoni iz datoteke")],
        default="toy",
    )
    teacher_path = models.CharField(
        "mapa z žetoni učitelja",
        max_length=500,
        blank=True,
        help_text="Uporabi se le pri vrsti učitelja 'file'.",
        default="",
    )
    patch_size = models.PositiveSmallIntegerField(
        "velikost zaplate", default=16, validators=[MinValueValidator(4)]
    )
    embed_dim = models.PositiveSmallIntegerField(
        "dimenzija žetonov",
        help_text="Dimenzija izhoda učitelja in glave študenta.",
        default=64,
        validators=[MinValueValidator(1)],
    )
    teacher_depth = models.PositiveSmallIntegerField("globina učitelja", default=2)
    teacher_heads = models.PositiveSmallIntegerField(
        "glave pozornosti", default=1, validators=[MinValueValidator(1)]
    )
    teacher_seed = models.PositiveIntegerField("seme učitelja", default=0)
    epochs = models.PositiveSmallIntegerField(
        "število epoh", default=30, validators=[MinValueValidator(1)]
    )
    batch_size = models.PositiveSmallIntegerField(
        "velikost paketa", default=32, validators=[MinValueValidator(2)]
    )
    learning_rate = models.FloatField(
        "osnovna stopnja učenja", default=0.05, validators=[MinValueValidator(0.0)]
    )
    warmup_epochs = models.PositiveSmallIntegerField("epohe ogrevanja", default=5)
    optimizer = models.CharField(
        "optimizator",
        max_length=10,
        choices=[("sgd", "SGD z vztrajnostjo"), ("lamb", "razmerje zaupanja po plasteh")],
        default="sgd",
    )
    momentum = models.FloatField(
        "vztrajnost",
        default=0.9,
        validators=[MinValueValidator(0.0), MaxValueValidator(1.0)],
    )
    weight_decay = models.FloatField(
        "razpad uteži", default=1e-4, validators=[MinValueValidator(0.0)]
    )
    max_grad_norm = models.FloatField(
        "največja norma gradienta",
        help_text="Vrednost 0 izklopi rezanje gradienta.",
        default=5.0,
        validators=[MinValueValidator(0.0)],
    )
    temperature = models.FloatField(
        "temperatura",
        help_text="Temperatura tau porazdelitev podobnosti; strogo pozitivna.",
        default=0.05,
    )
    queue_size = models.PositiveIntegerField(
        "dolžina vrste",
        help_text="Kapaciteta K vrste FIFO vložitev učitelja.",
        default=512,
        validators=[MinValueValidator(2), MaxValueValidator(50_000)],
    )
    mask_ratio = models.FloatField(
        "delež zakritih zaplat",
        default=0.6,
        validators=[MinValueValidator(0.0), MaxValueValidator(1.0)],
    )
    weight_sim = models.FloatField(
        "utež podobnosti",
        help_text="Vrednost 0 da različico brez izgube podobnosti.",
        default=1.0,
        validators=[MinValueValidator(0.0)],
    )
    weight_feat = models.FloatField(
        "utež značilk", default=1.0, validators=[MinValueValidator(0.0)]
    )
    similarity_mode = models.CharField(
        "imenovalec P^S",
        max_length=20,
        choices=[
            ("consistent", "vsota študentovih členov"),
            ("as_written", "vsota členov učitelja"),
        ],
        default="consistent",
    )
    crop = models.BooleanField("naključni izrez", default=True)
    flip = models.BooleanField("zrcaljenje", default=True)
    jitter = models.BooleanField("tresenje svetlosti", default=True)
    seed = models.PositiveIntegerField("seme", default=0)
    output_dir = models.CharField(
        "izhodna mapa", max_length=500, default="runs/default"
    )
    checkpoint_every = models.PositiveIntegerField(
        "kontrolna točka vsakih",
        help_text="Število korakov med kontrolnimi točkami; 0 shrani le na koncu.",
        default=100,
    )

    class Meta:
        verbose_name = "nastavitve destilacije"
        verbose_name_plural = "nastavitve destilacije"

    def __str__(self):
        return self.name or f"destilacija {self.config_hash()[:12]}"

    def clean(self):
        errors = {}
        try:
            parse_widths(self.widths)
        except ValidationError as error:
            errors["widths"] = error.messages
        if self.warmup_epochs >= self.epochs:
            errors["warmup_epochs"] = "Ogrevanje mora biti krajše od števila epoh."
        if self.temperature <= 0:
            errors["temperature"] = "Temperatura mora biti pozitivna."
        if self.mask_ratio >= 1:
            errors["mask_ratio"] = "Vsaj ena zaplata mora ostati vidna."
        if self.image_size % 32 or self.image_size % self.patch_size:
            errors["image_size"] = "Velikost slike mora biti deljiva z 32 in z velikostjo zaplate."
        if self.teacher_kind == "file" and not self.teacher_path:
            errors["teacher_path"] = "Učitelj iz datoteke potrebuje mapo z žetoni."
        if errors:
            raise ValidationError(errors)

    @property
    def weights(self):
        return (self.weight_sim, self.weight_feat)

    def copy(self, **changes):
        values = {
            field.name: getattr(self, field.name)
            for field in self._meta.concrete_fields
            if not field.primary_key
        }
        values.update(changes)
        return DistillConfig(**values)

    @staticmethod
    def _format(value):
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def to_text(self):
        lines = []
        for section, names in self.SECTIONS.items():
            lines.append(f"[{section}]")
            lines.extend(f"{name} = {self._format(getattr(self, name))}" for name in names)
            lines.append("")
        return "\n".join(lines)

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_file(cls, path):
        from .forms import read_config

        return read_config(path)

    def student_config(self):
        return StudentConfig(
            widths=parse_widths(self.widths),
            blocks=self.blocks,
            image_size=self.image_size,
            embed_dim=self.embed_dim,
            patch_size=self.patch_size,
            sparse=self.sparse,
            unet=self.unet,
            activation=self.activation,
            seed=self.seed,
        )

    def teacher_config(self):
        return TeacherConfig(
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.teacher_depth,
            heads=self.teacher_heads,
            image_size=self.image_size,
            seed=self.teacher_seed,
        )


class RunManifest(models.Model):
    config = models.ForeignKey(
        DistillConfig,
        verbose_name="nastavitve",
        on_delete=models.PROTECT,
        related_name="runs",
    )
    config_hash = models.CharField("zgoščena vrednost nastavitev", max_length=64)
    config_text = models.TextField("besedilo nastavitev")
    dataset_checksum = models.CharField("kontrolna vsota zbirke", max_length=64)
    build = models.CharField("različica kode", max_length=100)
    output_dir = models.CharField("izhodna mapa", max_length=500)
    created_at = models.DateTimeField("ustvarjeno", auto_now_add=True)

    class Meta:
        verbose_name = "zagon"
        verbose_name_plural = "zagoni"
        ordering = ["-created_at"]

    def __str__(self):
        return f"{self.output_dir} ({self.config_hash[:12]})"

    def save(self, *args, **kwargs):
        if not self._state.adding:
            raise ValueError("run manifests are immutable once written")
        super().save(*args, **kwargs)

    @classmethod
    def record(cls, config: DistillConfig, dataset_checksum, output_dir):
        """Zapiše opis zagona v bazo in v manifest.json pred prvim korakom."""
        if config.pk is None:
            config.save()
        manifest = cls.objects.create(
            config=config,
            config_hash=config.config_hash(),
            config_text=config.to_text(),
            dataset_checksum=dataset_checksum,
            build=build_identifier(),
            output_dir=str(output_dir),
        )
        manifest.write(output_dir)
        return manifest

    def as_dict(self):
        return {
            "config_hash": self.config_hash,
            "config": self.config_text,
            "dataset_checksum": self.dataset_checksum,
            "build": self.build,
            "output_dir": self.output_dir,
            "created_at": self.created_at.isoformat() if self.created_at else None,
        }

    def write(self, directory):
        path = Path(directory) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.as_dict(), indent=2), encoding="utf-8")
        return path

# Generated by Django 3.2.3 on 2026-10-16 09:12

import django.core.validators
import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="DistillConfig",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                (
                    "name",
                    models.CharField(blank=True, default="", max_length=255, verbose_name="ime"),
                ),
                (
                    "dataset",
                    models.CharField(
                        default="data/synthetic",
                        help_text="Mapa s sintetično zbirko (images.ntnsr, labels.ntnsr, manifest.txt).",
                        max_length=500,
                        verbose_name="podatkovna zbirka",
                    ),
                ),
                (
                    "image_size",
                    models.PositiveSmallIntegerField(
                        default=64,
                        help_text="Stranica kvadratne slike; deljiva z 32.",
                        validators=[django.core.validators.MinValueValidator(32)],
                        verbose_name="velikost slike",
                    ),
                ),
                (
                    "widths",
                    models.CharField(
                        default="32,64,128,256",
                        help_text="Število kanalov štirih stopenj kodirnika, ločeno z vejico.",
                        max_length=100,
                        verbose_name="širine stopenj",
                    ),
                ),
                (
                    "blocks",
                    models.PositiveSmallIntegerField(
                        default=2,
                        help_text="Število preostalih blokov v vsaki stopnji kodirnika.",
                        verbose_name="bloki na stopnjo",
                    ),
                ),
                (
                    "activation",
                    models.CharField(
                        choices=[("relu", "ReLU"), ("gelu", "GELU")],
                        default="relu",
                        max_length=10,
                        verbose_name="aktivacija",
                    ),
                ),
                (
                    "sparse",
                    models.BooleanField(
                        default=True,
                        help_text="Če ni izbrano, gost kodirnik dobi sliko z ničlami na zakritih mestih.",
                        verbose_name="redek kodirnik",
                    ),
                ),
                (
                    "unet",
                    models.BooleanField(
                        default=True,
                        help_text="Bočne povezave phi_i(F_i + M_i) med kodirnikom in dekodirnikom.",
                        verbose_name="povezave UNet",
                    ),
                ),
                (
                    "teacher_kind",
                    models.CharField(
                        choices=[("toy", "majhen transformer"), ("file", "žetoni iz datoteke")],
                        default="toy",
                        max_length=10,
                        verbose_name="vrsta učitelja",
                    ),
                ),
                (
                    "teacher_path",
                    models.CharField(
                        blank=True,
                        default="",
                        help_text="Uporabi se le pri vrsti učitelja 'file'.",
                        max_length=500,
                        verbose_name="mapa z žetoni učitelja",
                    ),
                ),
                (
                    "patch_size",
                    models.PositiveSmallIntegerField(
                        default=16,
                        validators=[django.core.validators.MinValueValidator(4)],
                        verbose_name="velikost zaplate",
                    ),
                ),
                (
                    "embed_dim",
                    models.PositiveSmallIntegerField(
                        default=64,
                        help_text="Dimenzija izhoda učitelja in glave študenta.",
                        validators=[django.core.validators.MinValueValidator(1)],
                        verbose_name="dimenzija žetonov",
                    ),
                ),
                (
                    "teacher_depth",
                    models.PositiveSmallIntegerField(default=2, verbose_name="globina učitelja"),
                ),
                (
                    "teacher_heads",
                    models.PositiveSmallIntegerField(
                        default=1,
                        validators=[django.core.validators.MinValueValidator(1)],
                        verbose_name="glave pozornosti",
                    ),
                ),
                (
                    "teacher_seed",
                    models.PositiveIntegerField(default=0, verbose_name="seme učitelja"),
                ),
                (
                    "epochs",
                    models.PositiveSmallIntegerField(
                        default=30,
                        validators=[django.core.validators.MinValueValidator(1)],
                        verbose_name="število epoh",
                    ),
                ),
                (
                    "batch_size",
                    models.PositiveSmallIntegerField(
                        default=32,
                        validators=[django.core.validators.MinValueValidator(2)],
                        verbose_name="velikost paketa",
                    ),
                ),
                (
                    "learning_rate",
                    models.FloatField(
                        default=0.05,
                        validators=[django.core.validators.MinValueValidator(0.0)],
                        verbose_name="osnovna stopnja učenja",
                    ),
                ),
                (
                    "warmup_epochs",
                    models.PositiveSmallIntegerField(default=5, verbose_name="epohe ogrevanja"),
                ),
                (
                    "optimizer",
                    models.CharField(
                        choices=[
                            ("sgd", "SGD z vztrajnostjo"),
                            ("lamb", "razmerje zaupanja po plasteh"),
                        ],
                        default="sgd",
                        max_length=10,
                        verbose_name="optimizator",
                    ),
                ),
                (
                    "momentum",
                    models.FloatField(
                        default=0.9,
                        validators=[
                            django.core.validators.MinValueValidator(0.0),
                            django.core.validators.MaxValueValidator(1.0),
                        ],
                        verbose_name="vztrajnost",
                    ),
                ),
                (
                    "weight_decay",
                    models.FloatField(
                        default=0.0001,
                        validators=[django.core.validators.MinValueValidator(0.0)],
                        verbose_name="razpad uteži",
                    ),
                ),
                (
                    "max_grad_norm",
                    models.FloatField(
                        default=5.0,
                        help_text="Vrednost 0 izklopi rezanje gradienta.",
                        validators=[django.core.validators.MinValueValidator(0.0)],
                        verbose_name="največja norma gradienta",
                    ),
                ),
                (
                    "temperature",
                    models.FloatField(
                        default=0.05,
                        help_text="Temperatura tau porazdelitev podobnosti; strogo pozitivna.",
                        verbose_name="temperatura",
                    ),
                ),
                (
                    "queue_size",
                    models.PositiveIntegerField(
                        default=512,
                        help_text="Kapaciteta K vrste FIFO vložitev učitelja.",
                        validators=[
                            django.core.validators.MinValueValidator(2),
                            django.core.validators.MaxValueValidator(50000),
                        ],
                        verbose_name="dolžina vrste",
                    ),
                ),
                (
                    "mask_ratio",
                    models.FloatField(
                        default=0.6,
                        validators=[
                            django.core.validators.MinValueValidator(0.0),
                            django.core.validators.MaxValueValidator(1.0),
                        ],
                        verbose_name="delež zakritih zaplat",
                    ),
                ),
                (
                    "weight_sim",
                    models.FloatField(
                        default=1.0,
                        help_text="Vrednost 0 da različico brez izgube podobnosti.",
                        validators=[django.core.validators.MinValueValidator(0.0)],
                        verbose_name="utež podobnosti",
                    ),
                ),
                (
                    "weight_feat",
                    models.FloatField(
                        default=1.0,
                        validators=[django.core.validators.MinValueValidator(0.0)],
                        verbose_name="utež značilk",
                    ),
                ),
                (
                    "similarity_mode",
                    models.CharField(
                        choices=[
                            ("consistent", "vsota študentovih členov"),
                            ("as_written", "vsota členov učitelja"),
                        ],
                        default="consistent",
                        max_length=20,
                        verbose_name="imenovalec P^S",
                    ),
                ),
                ("crop", models.BooleanField(default=True, verbose_name="naključni izrez")),
                ("flip", models.BooleanField(default=True, verbose_name="zrcaljenje")),
                ("jitter", models.BooleanField(default=True, verbose_name="tresenje svetlosti")),
                ("seed", models.PositiveIntegerField(default=0, verbose_name="seme")),
                (
                    "output_dir",
                    models.CharField(
                        default="runs/default", max_length=500, verbose_name="izhodna mapa"
                    ),
                ),
                (
                    "checkpoint_every",
                    models.PositiveIntegerField(
                        default=100,
                        help_text="Število korakov med kontrolnimi točkami; 0 shrani le na koncu.",
                        verbose_name="kontrolna točka vsakih",
                    ),
                ),
            ],
            options={
                "verbose_name": "nastavitve destilacije",
                "verbose_name_plural": "nastavitve destilacije",
            },
        ),
        migrations.CreateModel(
            name="RunManifest",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                (
                    "config_hash",
                    models.CharField(max_length=64, verbose_name="zgoščena vrednost nastavitev"),
                ),
                ("config_text", models.TextField(verbose_name="besedilo nastavitev")),
                (
                    "dataset_checksum",
                    models.CharField(max_length=64, verbose_name="kontrolna vsota zbirke"),
                ),
                ("build", models.CharField(max_length=100, verbose_name="različica kode")),
                ("output_dir", models.CharField(max_length=500, verbose_name="izhodna mapa")),
                (
                    "created_at",
                    models.DateTimeField(auto_now_add=True, verbose_name="ustvarjeno"),
                ),
                (
                    "config",
                    models.ForeignKey(
                        on_delete=django.db.models.deletion.PROTECT,
                        related_name="runs",
                        to="distillation.distillconfig",
                        verbose_name="nastavitve",
                    ),
                ),
            ],
            options={
                "verbose_name": "zagon",
                "verbose_name_plural": "zagoni",
                "ordering": ["-created_at"],
            },
        ),
    ]

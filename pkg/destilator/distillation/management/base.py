"""Skupna osnova ukazov: preslikava napak v izhodne kode."""
import contextlib
import sys
from functools import partial

from django.core.management.base import BaseCommand, CommandError
from diagnostics.shift import DiagnosticError
from masking.masks import MaskError
from sparse.kernels import SparseError
from students.network import StudentConfigError
from teachers.encoder import TeacherError
from tensors.autodiff import NonFiniteValue
from tensors.ntnsr import NTNSRFormatError

from ..checkpoints import CheckpointError
from ..datasets import DatasetError
from ..forms import ConfigError
from ..losses import LossError
from ..probe import ProbeError
from ..queue import QueueError, SimilarityError
from ..trainer import NumericFailure

EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

EXIT_CODES = [
    (ConfigError, EXIT_CONFIG),
    (StudentConfigError, EXIT_CONFIG),
    ((DatasetError, TeacherError, CheckpointError, ProbeError), EXIT_DATA),
    ((MaskError, NTNSRFormatError, DiagnosticError, QueueError, SparseError), EXIT_DATA),
    ((NumericFailure, NonFiniteValue, LossError, SimilarityError), EXIT_NUMERIC),
]


def _usage_error(parser, message):
    if parser.called_from_command_line:
        parser.print_usage(sys.stderr)
        parser.exit(EXIT_USAGE, f"{parser.prog}: error: {message}\n")
    raise CommandError(f"Error: {message}", returncode=EXIT_USAGE)


@contextlib.contextmanager
def exit_codes():
    try:
        yield
    except CommandError:
        raise
    except Exception as error:
        for kinds, code in EXIT_CODES:
            if isinstance(error, kinds):
                raise CommandError(str(error), returncode=code) from error
        raise


class DistillationCommand(BaseCommand):
    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.error = partial(_usage_error, parser)
        return parser

    def success(self, message):
        self.stdout.write(self.style.SUCCESS(message))

import configparser
import re
from pathlib import Path

from django import forms
from django.forms.models import model_to_dict

from .models import DistillConfig

_SECTION = re.compile(r"^\s*\[(?P<section>[^\]]+)\]")
_KEY = re.compile(r"^\s*(?P<key>[^=:#;\s\[][^=:]*?)\s*[=:]")


class ConfigError(ValueError):
    """Napake v datoteki z nastavitvami, vsaka z razdelkom in vrstico."""

    def __init__(self, path, problems):
        self.path = str(path)
        self.problems = problems
        super().__init__(
            "\n".join(self._describe(problem) for problem in problems)
        )

    def _describe(self, problem):
        section, line, field, message = problem
        where = self.path
        if line is not None:
            where += f":{line}"
        if section is not None:
            where += f" [{section}]"
        if field is not None:
            where += f" {field}"
        return f"{where}: {message}"


class DistillConfigForm(forms.ModelForm):
    class Meta:
        model = DistillConfig
        fields = [name for names in DistillConfig.SECTIONS.values() for name in names]


def _line_numbers(text):
    lines = {}
    section = None
    for number, line in enumerate(text.splitlines(), 1):
        if match := _SECTION.match(line):
            section = match["section"].strip()
            lines.setdefault((section, None), number)
        elif match := _KEY.match(line):
            lines.setdefault((section, match["key"].strip().lower()), number)
    return lines


def _boolean_fields():
    return {
        field.name
        for field in DistillConfig._meta.concrete_fields
        if field.get_internal_type() == "BooleanField"
    }


def read_config(path):
    """
    Prebere datoteko INI, jo splošči v slovar polj in preveri z obrazcem.
    Vrne neshranjen DistillConfig ali sproži ConfigError.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as error:
        raise ConfigError(path, [(None, None, None, f"cannot read config: {error}")])
    return parse_config(text, path)


def parse_config(text, path="<config>"):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as error:
        line = getattr(error, "lineno", None)
        raise ConfigError(path, [(None, line, None, error.message)]) from error

    lines = _line_numbers(text)
    field_sections = {
        name: section
        for section, names in DistillConfig.SECTIONS.items()
        for name in names
    }
    booleans = _boolean_fields()
    data = model_to_dict(DistillConfig(), fields=list(field_sections))
    problems = []
    for section in parser.sections():
        if section not in DistillConfig.SECTIONS:
            problems.append((section, lines.get((section, None)), None, "unknown section"))
            continue
        for key, value in parser.items(section):
            line = lines.get((section, key))
            if field_sections.get(key) != section:
                problems.append((section, line, key, "unknown key"))
            elif key in booleans:
                if value.lower() not in parser.BOOLEAN_STATES:
                    problems.append((section, line, key, f"not a boolean: {value!r}"))
                else:
                    data[key] = parser.BOOLEAN_STATES[value.lower()]
            else:
                data[key] = value

    form = DistillConfigForm(data=data)
    if not form.is_valid():
        for field, messages in form.errors.items():
            section = field_sections.get(field)
            problems.append(
                (
                    section,
                    lines.get((section, field)),
                    None if field == "__all__" else field,
                    " ".join(messages),
                )
            )
    if problems:
        raise ConfigError(path, problems)
    return form.save(commit=False)

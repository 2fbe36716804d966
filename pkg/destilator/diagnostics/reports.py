import csv
from pathlib import Path

from .erosion import EROSION_HEADER
from .shift import ShiftReport

SHIFT_HEADER = ("arm", "shift", "masked_bins", "unmasked_bins")
HISTOGRAM_HEADER = ("center", "masked", "unmasked")


def _format(value):
    return repr(value) if isinstance(value, float) else str(value)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows([_format(value) for value in row] for row in rows)
    return path


def read_csv(path):
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = tuple(next(reader, ()))
        return header, [tuple(row) for row in reader]


def write_gnuplot(path, header, blocks):
    """
    Stolpci, ločeni s presledki; vsak blok ima naslov v komentarju in je od
    naslednjega ločen z dvema praznima vrsticama (za `index` v gnuplotu).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for title, rows in blocks.items():
        lines.append(f"# {title}")
        lines.append("# " + " ".join(header))
        lines.extend(" ".join(_format(value) for value in row) for row in rows)
        lines += ["", ""]
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def shift_rows(report: ShiftReport):
    return [
        ("sparse", report.sparse.score, len(report.sparse.masked), len(report.sparse.unmasked)),
        ("dense", report.dense.score, len(report.dense.masked), len(report.dense.unmasked)),
    ]


def histogram_blocks(report: ShiftReport):
    blocks = {}
    for name, arm in (("sparse", report.sparse), ("dense", report.dense)):
        blocks[name] = [
            (float(center), float(masked), float(unmasked))
            for center, masked, unmasked in zip(
                arm.masked.centers, arm.masked.counts, arm.unmasked.counts
            )
        ]
    return blocks


def erosion_blocks(table):
    return {
        kind: [(row[0], row[column]) for row in table]
        for column, kind in enumerate(EROSION_HEADER[1:], start=1)
    }

"""
Zapis tenzorjev NTNSR: magični niz, rang (uint32 LE), dimenzije (uint32 LE) in
vrednosti po vrsticah (float32 LE). Sorodni zapis NTSD1 ima enako zgradbo z
vrednostmi float64 in se uporablja za kontrolne točke.
"""
import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC_FLOAT32 = b"NTSR1"
MAGIC_FLOAT64 = b"NTSD1"
_DTYPES = {MAGIC_FLOAT32: np.dtype("<f4"), MAGIC_FLOAT64: np.dtype("<f8")}
_MAX_RANK = 32


class NTNSRFormatError(ValueError):
    pass


def dumps(array, double=False):
    array = np.asarray(array)
    magic = MAGIC_FLOAT64 if double else MAGIC_FLOAT32
    header = magic + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[magic]).tobytes()


def loads(blob, source="<bytes>"):
    if len(blob) < 9:
        raise NTNSRFormatError(f"{source}: truncated header ({len(blob)} bytes)")
    magic = bytes(blob[:5])
    if magic not in _DTYPES:
        raise NTNSRFormatError(f"{source}: bad magic {magic!r}")
    (rank,) = struct.unpack_from("<I", blob, 5)
    if rank > _MAX_RANK:
        raise NTNSRFormatError(f"{source}: implausible rank {rank}")
    offset = 9 + 4 * rank
    if len(blob) < offset:
        raise NTNSRFormatError(f"{source}: truncated dimensions for rank {rank}")
    shape = struct.unpack_from(f"<{rank}I", blob, 9)
    dtype = _DTYPES[magic]
    count = int(np.prod(shape, dtype=np.int64))
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise NTNSRFormatError(
            f"{source}: expected {expected} bytes for shape {shape}, found {len(blob)}"
        )
    return np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)


def write_tensor(path, array, double=False):
    Path(path).write_bytes(dumps(array, double=double))


def read_tensor(path):
    path = Path(path)
    return loads(path.read_bytes(), source=str(path)).copy()


def checksum(*paths):
    digest = hashlib.sha256()
    for path in paths:
        digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def write_manifest(path, entries):
    """Spremni opis artefakta: ena vrstica `ključ: vrednost` na vnos."""
    lines = [f"{key}: {value}" for key, value in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    entries = {}
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, separator, value = line.partition(":")
        if not separator:
            raise NTNSRFormatError(f"{path}:{number}: expected 'key: value', got {line!r}")
        entries[key.strip()] = value.strip()
    return entries

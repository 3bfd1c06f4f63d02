"""Minimal NRRD-subset reader/writer for volumes and multilabel masks.

Supported files are 3D, little-endian, raw or gzip encoded, with diagonal
space directions. Header fields are written in a fixed order: magic,
type, dimension, sizes, space directions, space origin, endian, encoding.
The payload is x-fastest. A multilabel mask travels as a u16 volume plus
a "<name>.classes.txt" registry sidecar next to it; u16 files without a
sidecar read back as plain volumes. Writes are atomic (temp then rename).

The space origin is parsed and validated but not carried into GridGeometry;
this package's pipeline is origin-agnostic.
"""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .codec import ClassRegistry, MultiLabelMask
from .volume import GridGeometry, Volume3D

MAGIC = "NRRD0004"

# canonical written name -> numpy little-endian dtype
_TYPES = {
    "uchar": np.dtype("<u1"),
    "ushort": np.dtype("<u2"),
    "short": np.dtype("<i2"),
    "float": np.dtype("<f4"),
}
_TYPE_ALIASES = {
    "uint8": "uchar",
    "unsigned char": "uchar",
    "uint16": "ushort",
    "unsigned short": "ushort",
    "int16": "short",
    "float32": "float",
}
_ENCODINGS = ("raw", "gzip")
_FIELD_ORDER = (
    "type",
    "dimension",
    "sizes",
    "space directions",
    "space origin",
    "endian",
    "encoding",
)


@dataclass(frozen=True)
class NrrdHeader:
    """Parsed header of a supported NRRD file."""

    element_type: str  # canonical: uchar | ushort | short | float
    sizes: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    encoding: str

    @property
    def dtype(self) -> np.dtype:
        return _TYPES[self.element_type]

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.sizes, self.spacing)


def sidecar_path(path) -> Path:
    """Registry sidecar path for a mask file: <name>.classes.txt."""
    path = Path(path)
    return path.with_name(path.stem + ".classes.txt")


def _format_vector(values) -> str:
    return "(" + ",".join(repr(float(v)) for v in values) + ")"


def _parse_vector(text: str, field: str) -> tuple[float, ...]:
    text = text.strip()
    if not (text.startswith("(") and text.endswith(")")):
        raise ValueError(f"malformed vector in field {field!r}: {text!r}")
    return tuple(float(part) for part in text[1:-1].split(","))


def format_header(header: NrrdHeader) -> str:
    directions = " ".join(
        _format_vector([s if i == j else 0.0 for j in range(3)])
        for i, s in enumerate(header.spacing)
    )
    lines = [
        MAGIC,
        f"type: {header.element_type}",
        "dimension: 3",
        "sizes: " + " ".join(str(n) for n in header.sizes),
        f"space directions: {directions}",
        f"space origin: {_format_vector(header.origin)}",
        "endian: little",
        f"encoding: {header.encoding}",
        "",
    ]
    return "\n".join(lines) + "\n"


def parse_header(text: str) -> NrrdHeader:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("NRRD000"):
        raise ValueError("not an NRRD file (bad magic)")
    fields: dict[str, str] = {}
    for line in lines[1:]:
        if not line.strip() or line.startswith("#"):
            continue
        if ":" not in line:
            raise ValueError(f"malformed header line {line!r}")
        key, value = line.split(":", 1)
        key = key.strip()
        if key not in _FIELD_ORDER:
            raise ValueError(f"unsupported header field {key!r}")
        fields[key] = value.strip()

    for key in ("type", "dimension", "sizes", "space directions", "encoding"):
        if key not in fields:
            raise ValueError(f"missing header field {key!r}")

    type_name = fields["type"]
    type_name = _TYPE_ALIASES.get(type_name, type_name)
    if type_name not in _TYPES:
        raise ValueError(f"unsupported value for field 'type': {fields['type']!r}")

    if int(fields["dimension"]) != 3:
        raise ValueError(f"unsupported value for field 'dimension': {fields['dimension']!r}")

    sizes = tuple(int(n) for n in fields["sizes"].split())
    if len(sizes) != 3:
        raise ValueError("field 'sizes' must have three entries")

    rows = fields["space directions"].split()
    if len(rows) != 3:
        raise ValueError("field 'space directions' must have three vectors")
    spacing = []
    for i, row in enumerate(rows):
        vec = _parse_vector(row, "space directions")
        if len(vec) != 3:
            raise ValueError("field 'space directions' must hold 3-vectors")
        for j, v in enumerate(vec):
            if i != j and v != 0.0:
                raise ValueError("field 'space directions' must be diagonal")
        spacing.append(vec[i])

    origin = (0.0, 0.0, 0.0)
    if "space origin" in fields:
        origin = _parse_vector(fields["space origin"], "space origin")
        if len(origin) != 3:
            raise ValueError("field 'space origin' must be a 3-vector")

    encoding = fields["encoding"]
    if encoding not in _ENCODINGS:
        raise ValueError(f"unsupported value for field 'encoding': {encoding!r}")

    if fields.get("endian", "little") != "little":
        raise ValueError(f"unsupported value for field 'endian': {fields['endian']!r}")

    return NrrdHeader(
        element_type=type_name,
        sizes=sizes,
        spacing=tuple(spacing),
        origin=origin,
        encoding=encoding,
    )


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_volume(
    volume: Union[Volume3D, MultiLabelMask],
    path,
    encoding: str = "raw",
    element_type: str | None = None,
) -> None:
    """Write a volume or multilabel mask; masks get a registry sidecar.

    ``element_type`` picks the on-disk scalar type for volumes (default
    "float"); integer types require the values to survive round-tripping
    (they are rounded to the nearest integer). Masks are always u16.
    """
    if encoding not in _ENCODINGS:
        raise ValueError(f"unsupported value for field 'encoding': {encoding!r}")
    path = Path(path)

    is_mask = isinstance(volume, MultiLabelMask)
    if is_mask:
        element_type = "ushort"
        arr = volume.words
    else:
        element_type = element_type or "float"
        if element_type not in _TYPES:
            raise ValueError(f"unsupported value for field 'type': {element_type!r}")
        arr = volume.values
        if element_type != "float":
            arr = np.rint(arr)
            info = np.iinfo(_TYPES[element_type])
            if arr.min() < info.min or arr.max() > info.max:
                raise ValueError(f"values out of range for element type {element_type!r}")

    header = NrrdHeader(
        element_type=element_type,
        sizes=volume.geometry.sizes,
        spacing=volume.geometry.spacing,
        origin=(0.0, 0.0, 0.0),
        encoding=encoding,
    )
    payload = np.ascontiguousarray(arr.astype(header.dtype).transpose(2, 1, 0)).tobytes()
    if encoding == "gzip":
        payload = gzip.compress(payload, mtime=0)  # mtime pinned: deterministic bytes
    _atomic_write(path, format_header(header).encode("ascii") + payload)

    if is_mask:
        registry_text = volume.registry.to_text().encode("utf-8")
        _atomic_write(sidecar_path(path), registry_text)


def read_header(path) -> NrrdHeader:
    with open(path, "rb") as fh:
        raw = fh.read()
    split = raw.find(b"\n\n")
    if split < 0:
        raise ValueError("missing blank line after NRRD header")
    return parse_header(raw[:split].decode("ascii"))


def read_volume(path) -> Union[Volume3D, MultiLabelMask]:
    """Read a supported NRRD file.

    A u16 payload with a registry sidecar loads as a MultiLabelMask; any
    other supported type loads as a Volume3D.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    split = raw.find(b"\n\n")
    if split < 0:
        raise ValueError("missing blank line after NRRD header")
    header = parse_header(raw[:split].decode("ascii"))
    payload = raw[split + 2 :]
    if header.encoding == "gzip":
        payload = gzip.decompress(payload)

    expected = int(np.prod(header.sizes)) * header.dtype.itemsize
    if len(payload) != expected:
        raise ValueError(
            f"payload size mismatch: expected {expected} bytes, got {len(payload)}"
        )
    nx, ny, nz = header.sizes
    arr = np.frombuffer(payload, dtype=header.dtype).reshape(nz, ny, nx).transpose(2, 1, 0)

    if header.element_type == "ushort":
        sidecar = sidecar_path(path)
        if sidecar.exists():
            registry = ClassRegistry.load(sidecar)
            return MultiLabelMask(header.geometry, arr, registry)
    return Volume3D(header.geometry, arr.astype(np.float64))

"""MetaImage (.mhd/.raw) volumes and fields, and landmark text files."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import PairingError, ParseError
from .metrics import LandmarkSet
from .volume import DisplacementField, Volume, _Grid

PathLike = Union[str, os.PathLike]

ELEMENT_TYPES = {"MET_FLOAT": np.dtype("<f4"), "MET_SHORT": np.dtype("<i2")}

# keys we understand; the marker keys are accepted only with their default value
_VALUE_KEYS = {"NDims", "DimSize", "ElementSpacing", "Offset", "ElementType", "ElementNumberOfChannels", "ElementDataFile"}
_MARKERS = {
    "ObjectType": "Image",
    "BinaryData": "True",
    "BinaryDataByteOrderMSB": "False",
    "ElementByteOrderMSB": "False",
    "CompressedData": "False",
    "TransformMatrix": "1 0 0 0 1 0 0 0 1",
}


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_image(path: PathLike, img: _Grid, element_type: str = "MET_FLOAT") -> Path:
    """Write a header at ``path`` (``.mhd``) and the raw data beside it (``.raw``).

    MET_FLOAT stores float32, so values are rounded to single precision;
    MET_SHORT requires integral values within int16 range.
    """
    if element_type not in ELEMENT_TYPES:
        raise ParseError(f"unsupported ElementType {element_type!r}")
    path = Path(path)
    if path.suffix.lower() != ".mhd":
        path = path.with_suffix(".mhd")
    raw_path = path.with_suffix(".raw")
    channels = 3 if isinstance(img, DisplacementField) else 1
    data = img.data
    if element_type == "MET_SHORT":
        if not np.array_equal(data, np.rint(data)) or data.min(initial=0) < -32768 or data.max(initial=0) > 32767:
            raise ParseError("MET_SHORT needs integral values within the int16 range")
    # channel fastest, then x, y, z
    arr = data if channels == 1 else np.moveaxis(data, -1, 0)
    raw = np.asarray(arr, dtype=ELEMENT_TYPES[element_type]).tobytes(order="F")
    header = "\n".join(
        [
            "ObjectType = Image",
            "NDims = 3",
            "BinaryData = True",
            "BinaryDataByteOrderMSB = False",
            "CompressedData = False",
            f"Offset = {_fmt(img.origin)}",
            f"ElementSpacing = {_fmt(img.spacing)}",
            f"DimSize = {' '.join(str(n) for n in img.dims)}",
            f"ElementNumberOfChannels = {channels}",
            f"ElementType = {element_type}",
            f"ElementDataFile = {raw_path.name}",
            "",
        ]
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(header, encoding="ascii", newline="\n")
    raw_path.write_bytes(raw)
    return path


def _parse_header(blob: bytes, name: str) -> tuple[dict, int]:
    """Parse ``Key = Value`` lines; returns the fields and the byte offset after ElementDataFile."""
    fields: dict[str, tuple[str, int]] = {}
    pos = 0
    while pos < len(blob):
        end = blob.find(b"\n", pos)
        end = len(blob) if end < 0 else end
        line = blob[pos:end].decode("ascii", errors="replace").strip()
        line_start, pos = pos, end + 1
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{name}: byte {line_start}: expected 'Key = Value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _MARKERS:
            if value.split() != _MARKERS[key].split() and not (key == "TransformMatrix" and _is_identity(value)):
                raise ParseError(f"{name}: byte {line_start}: unsupported {key} = {value} (expected {_MARKERS[key]})")
            continue
        if key not in _VALUE_KEYS:
            raise ParseError(f"{name}: byte {line_start}: unsupported header key {key!r}")
        fields[key] = (value, line_start)
        if key == "ElementDataFile":
            return fields, pos
    raise ParseError(f"{name}: header ends at byte {len(blob)} without ElementDataFile")


def _is_identity(value: str) -> bool:
    try:
        return np.allclose(np.array(value.split(), dtype=float), np.eye(3).ravel())
    except ValueError:
        return False


def _numbers(fields, key, name, cast, default=None):
    if key not in fields:
        if default is None:
            raise ParseError(f"{name}: missing required key {key}")
        return default
    value, offset = fields[key]
    try:
        out = [cast(x) for x in value.split()]
    except ValueError:
        raise ParseError(f"{name}: byte {offset}: cannot parse {key} = {value!r}") from None
    if len(out) != 3:
        raise ParseError(f"{name}: byte {offset}: {key} needs 3 values, got {len(out)}")
    return out


def read_image(path: PathLike) -> Union[Volume, DisplacementField]:
    """Read a 1-channel volume or 3-channel field."""
    path = Path(path)
    blob = path.read_bytes()
    name = str(path)
    fields, data_start = _parse_header(blob, name)
    ndims, off = fields.get("NDims", ("", 0))
    if ndims != "3":
        raise ParseError(f"{name}: byte {off}: NDims must be 3, got {ndims!r}")
    dims = _numbers(fields, "DimSize", name, int)
    spacing = _numbers(fields, "ElementSpacing", name, float, [1.0, 1.0, 1.0])
    origin = _numbers(fields, "Offset", name, float, [0.0, 0.0, 0.0])
    etype, off = fields.get("ElementType", (None, 0))
    if etype not in ELEMENT_TYPES:
        raise ParseError(f"{name}: byte {off}: unknown ElementType {etype!r}")
    ch_text, off = fields.get("ElementNumberOfChannels", ("1", 0))
    if ch_text not in ("1", "3"):
        raise ParseError(f"{name}: byte {off}: ElementNumberOfChannels must be 1 or 3, got {ch_text!r}")
    channels = int(ch_text)
    data_file = fields["ElementDataFile"][0]
    if data_file == "LOCAL":
        raw, raw_name = blob[data_start:], f"{name} (data at byte {data_start})"
    else:
        raw_path = path.parent / data_file
        if not raw_path.exists():
            raise ParseError(f"{name}: data file {raw_path} not found")
        raw, raw_name = raw_path.read_bytes(), str(raw_path)
    dtype = ELEMENT_TYPES[etype]
    expected = int(np.prod(dims)) * channels * dtype.itemsize
    if len(raw) != expected:
        raise ParseError(
            f"{raw_name}: expected {expected} bytes for DimSize {dims} x {channels} channel(s) "
            f"of {etype}, found {len(raw)} bytes"
        )
    flat = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    arr = flat.reshape([channels] + dims, order="F")
    if channels == 1:
        return Volume(arr[0], spacing, origin)
    return DisplacementField(np.moveaxis(arr, 0, -1), spacing, origin)


def read_volume(path: PathLike) -> Volume:
    img = read_image(path)
    if not isinstance(img, Volume):
        raise ParseError(f"{path}: expected a scalar volume, found a 3-channel field")
    return img


def read_field(path: PathLike) -> DisplacementField:
    img = read_image(path)
    if not isinstance(img, DisplacementField):
        raise ParseError(f"{path}: expected a 3-channel displacement field, found a scalar volume")
    return img


write_volume = write_image
write_field = write_image


# ---------------------------------------------------------------------------
# Landmarks


def _landmark_rows(text: str, name: str, columns: tuple[int, ...]) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) not in columns:
            raise ParseError(f"{name}: line {lineno}: expected {' or '.join(map(str, columns))} columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError(f"{name}: line {lineno}: non-numeric coordinate in {line!r}") from None
    if rows and len({len(r) for r in rows}) != 1:
        raise ParseError(f"{name}: mixed column counts")
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1)


def parse_landmarks(fixed_text: str, moving_text: Optional[str] = None, grid: Optional[_Grid] = None) -> LandmarkSet:
    """Pair landmarks from two 3-column texts, or from one 6-column text.

    Coordinates are millimetres unless ``grid`` is given, in which case they
    are voxel indices on that grid and are converted to millimetres.
    """
    if moving_text is None:
        rows = _landmark_rows(fixed_text, "landmarks", (6,))
        fixed, moving = rows[:, :3], rows[:, 3:]
    else:
        fixed = _landmark_rows(fixed_text, "fixed landmarks", (3,))
        moving = _landmark_rows(moving_text, "moving landmarks", (3,))
        if len(fixed) != len(moving):
            raise PairingError(f"{len(fixed)} fixed landmarks but {len(moving)} moving landmarks")
    if grid is not None:
        fixed, moving = grid.to_world(fixed), grid.to_world(moving)
    return LandmarkSet(fixed, moving)


def read_landmarks(fixed_path: PathLike, moving_path: Optional[PathLike] = None, grid: Optional[_Grid] = None) -> LandmarkSet:
    fixed_text = Path(fixed_path).read_text()
    moving_text = Path(moving_path).read_text() if moving_path is not None else None
    return parse_landmarks(fixed_text, moving_text, grid)


def write_landmarks(path: PathLike, points: np.ndarray) -> None:
    lines = [" ".join(f"{c:.6f}" for c in p) for p in np.asarray(points, dtype=float).reshape(-1, 3)]
    Path(path).write_text("\n".join(lines) + "\n")

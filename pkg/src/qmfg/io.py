"""Result files: CSV tables, JSON manifests and binary sphere-field dumps.

CSV tables use ``.`` decimals, ``\\n`` line endings and a header row; floats
are printed with 17 significant digits so they round-trip exactly.  Field
dumps carry a 16-byte little-endian header (magic ``QMFGFLD1``, format
version, band limit, latitude and longitude counts, all ``uint16``) followed
by the samples as little-endian float64 in C order ``(time, lat, lon)``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FIELD_MAGIC = b"QMFGFLD1"
FIELD_VERSION = 1
_HEADER = struct.Struct("<8sHHHH")


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, columns, rows) -> Path:
    """Write ``rows`` (mappings or sequences) under the header ``columns``."""
    path = Path(path)
    lines = [",".join(columns)]
    for row in rows:
        vals = [row[c] for c in columns] if isinstance(row, dict) else list(row)
        if len(vals) != len(columns):
            raise ValueError(f"row has {len(vals)} fields, header has {len(columns)}")
        lines.append(",".join(format_value(v) for v in vals))
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_csv(path):
    """Header and float rows of a table written by ``write_csv``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        rows = [[float(x) if _numeric(x) else x for x in line.rstrip("\n").split(",")] for line in fh if line.strip()]
    return header, rows


def _numeric(x: str) -> bool:
    try:
        float(x)
    except ValueError:
        return False
    return True


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_field(path, values, band_limit: int) -> Path:
    """Dump grid samples of shape ``(nlat, nlon)`` or ``(times, nlat, nlon)``."""
    values = np.asarray(values, dtype="<f8")
    if values.ndim == 2:
        values = values[None]
    if values.ndim != 3:
        raise ValueError("field must have shape (nlat, nlon) or (times, nlat, nlon)")
    _, nlat, nlon = values.shape
    for v in (band_limit, nlat, nlon):
        if not 0 <= v < 2**16:
            raise ValueError("header fields must fit in uint16")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, band_limit, nlat, nlon))
        fh.write(np.ascontiguousarray(values).tobytes())
    return path


def read_field(path):
    """Inverse of ``write_field``: ``(values, band_limit)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated field header")
    magic, version, band_limit, nlat, nlon = _HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FIELD_VERSION:
        raise ValueError(f"unsupported field version {version}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size % (nlat * nlon):
        raise ValueError("payload is not a whole number of fields")
    return data.reshape(-1, nlat, nlon), band_limit

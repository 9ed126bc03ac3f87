"""The ``ADF1`` flat binary container.

Layout::

    b"ADF1"                      4 bytes magic
    header length                uint64, little-endian
    header                       UTF-8 JSON object
    payload                      row-major little-endian float64 values

The header lists the stored arrays under ``"arrays"`` as ``{"name", "shape"}``
entries in payload order.  JSON is written with sorted keys and no wall-clock
fields, so identical inputs give byte-identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADF1"
_LE_F64 = np.dtype("<f8")


class ContainerError(ValueError):
    pass


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["arrays"] = [{"name": name, "shape": list(np.shape(arr))} for name, arr in arrays.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes(order="C"))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not an ADF1 container (bad magic bytes)")
    if len(raw) < 12:
        raise ContainerError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header: {exc}") from exc
    offset = 12 + n
    arrays = {}
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ContainerError(f"{path}: payload truncated in array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=_LE_F64, count=count,
                                              offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise ContainerError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return header, arrays

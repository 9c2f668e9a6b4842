"""Versioned binary checkpoint container.

Layout: an 8-byte magic with version, a little-endian uint64 header length,
a UTF-8 JSON header, then the raw array payloads. The header carries
arbitrary JSON metadata plus the shape table; payloads are float64,
row-major, little-endian, in the header's order (names sorted). Round
trips are bit-exact, which is what makes resumed runs reproduce the
uninterrupted trajectory.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ShapeError

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint"]

MAGIC = b"LRPCKP01"


def save_checkpoint(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    table = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"checkpoint array {name!r} must be 2-D, got ndim={arr.ndim}")
        table.append({"name": name, "rows": arr.shape[0], "cols": arr.shape[1]})
        payload += arr.astype("<f8").tobytes(order="C")
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r}, expected {MAGIC!r})")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            rows, cols = int(entry["rows"]), int(entry["cols"])
            buf = fh.read(rows * cols * 8)
            if len(buf) != rows * cols * 8:
                raise ValueError(f"checkpoint truncated while reading {entry['name']!r}")
            arrays[entry["name"]] = (
                np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(rows, cols)
            )
    return header["meta"], arrays

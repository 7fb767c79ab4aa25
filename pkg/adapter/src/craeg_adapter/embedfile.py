"""Writer for the shared embedding-table file format.

Layout: a 32-byte little-endian header (4-byte magic "CRWD", uint32 format
version, uint64 vocab size, uint32 dim, uint8 dtype code, 11 pad bytes)
followed by the row-major payload. Dtype codes: 1 = float32, 2 = float64.
Implemented against the format description alone; the engine's reader is
the other side of the contract.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CRWD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQIB11x")
_WIRE_DTYPES = {"float32": ("<f4", 1), "float64": ("<f8", 2)}


def write_embedding_file(matrix, path, dtype: str = "float32") -> None:
    """Write one embedding matrix, rejecting anything the reader would refuse."""
    if dtype not in _WIRE_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("matrix must be a nonempty 2-D array")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite values")
    wire, code = _WIRE_DTYPES[dtype]
    with np.errstate(over="ignore"):
        payload = np.ascontiguousarray(arr.astype(wire))
    if not np.all(np.isfinite(payload)):
        raise ValueError(f"matrix values overflow {dtype}")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, arr.shape[0], arr.shape[1], code)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())

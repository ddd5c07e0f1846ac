"""Binary tensor serialization and the single-file checkpoint container.

Tensor blobs use a fixed layout: 4-byte magic "TNSR", u32 format version,
u32 ndim, ndim u64 dims, then row-major float64 data. All integers and
floats are little-endian.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1


def write_tensor(stream, array: np.ndarray) -> int:
    """Serialize one array to a binary stream. Returns the byte count."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim:
        arr = np.ascontiguousarray(arr)  # ascontiguousarray promotes 0-d to 1-d
    header = TNSR_MAGIC + struct.pack("<II", TNSR_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype("<f8", copy=False).tobytes(order="C")
    stream.write(header)
    stream.write(dims)
    stream.write(payload)
    return len(header) + len(dims) + len(payload)


def read_tensor(stream) -> np.ndarray:
    """Read one array written by write_tensor."""
    magic = stream.read(4)
    if magic != TNSR_MAGIC:
        raise ValidationError(f"bad tensor magic {magic!r}")
    version, ndim = struct.unpack("<II", stream.read(8))
    if version != TNSR_VERSION:
        raise ValidationError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{ndim}Q", stream.read(8 * ndim)) if ndim else ()
    count = int(np.prod(dims)) if ndim else 1
    raw = stream.read(8 * count)
    if len(raw) != 8 * count:
        raise ValidationError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f8").reshape(dims).copy()


def save_tensor_file(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor_file(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named tensors plus a JSON metadata header to one file.

    Layout: u64 header length, UTF-8 JSON header, then the tensor blobs
    back to back. The header's "tensors" table maps each name to its
    byte offset and length inside the blob region, in name order.
    """
    blobs = io.BytesIO()
    table = {}
    for name in sorted(tensors):
        offset = blobs.tell()
        length = write_tensor(blobs, tensors[name])
        table[name] = {"offset": offset, "length": length}
    header = dict(meta)
    if "tensors" in header:
        raise ValidationError('metadata may not contain the reserved key "tensors"')
    header["tensors"] = table
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blobs.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint file back into (tensors, metadata)."""
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
            table = header.pop("tensors")
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
            raise ValidationError(f"corrupt checkpoint header: {exc}") from exc
        base = fh.tell()
        tensors = {}
        for name, entry in table.items():
            fh.seek(base + entry["offset"])
            tensors[name] = read_tensor(fh)
    return tensors, header

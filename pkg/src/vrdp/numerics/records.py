"""Length-prefixed binary container for named float64 arrays.

Layout (all integers little-endian)::

    magic     8 bytes   b"VRDPREC\\0"
    version   u32
    kind      u32 length + utf-8 ("checkpoint", "dataset", ...)
    meta      u32 length + utf-8 JSON (sorted keys)
    count     u32
    count x record:
        name    u32 length + utf-8
        ndim    u32
        dims    ndim x u64
        payload prod(dims) x f64 (little-endian)

Records are written in sorted name order, so equal contents give equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"VRDPREC\0"
FORMAT_VERSION = 1


class RecordFormatError(ValueError):
    pass


def encode(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    for text in (kind, json.dumps(meta, sort_keys=True, separators=(",", ":"))):
        raw = text.encode()
        out += struct.pack("<I", len(raw)) + raw
    out += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes(order="C")
    return bytes(out)


def decode(blob: bytes, kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise RecordFormatError("truncated record file")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if bytes(take(8)) != MAGIC:
        raise RecordFormatError("bad magic; not a record file")
    version = u32()
    if version != FORMAT_VERSION:
        raise RecordFormatError(f"unsupported format version {version}")
    found_kind = bytes(take(u32())).decode()
    if kind is not None and found_kind != kind:
        raise RecordFormatError(f"expected a {kind!r} file, found {found_kind!r}")
    try:
        meta = json.loads(bytes(take(u32())).decode())
    except json.JSONDecodeError as exc:
        raise RecordFormatError(f"corrupt metadata: {exc}") from None
    arrays = {}
    for _ in range(u32()):
        name = bytes(take(u32())).decode()
        ndim = u32()
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise RecordFormatError("trailing bytes after last record")
    return found_kind, meta, arrays


def atomic_write_bytes(path, blob: bytes) -> None:
    """Write to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def save(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(kind, meta, arrays))


def load(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    _, meta, arrays = decode(Path(path).read_bytes(), kind)
    return meta, arrays

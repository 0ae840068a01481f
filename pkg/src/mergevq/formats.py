"""Binary and text file formats used by the CLI.

MVQT (tensor)::

    b"MVQT" | u8 version=1 | u32 ndim | u32 dims[ndim] | f32 data (row-major)

MVQS (source matrix, column-wise assignment form)::

    b"MVQS" | u32 k | u32 l | u32 assignment[l]

``.codes``: one decimal code index per line.

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"MVQT"
TENSOR_VERSION = 1
SOURCE_MAGIC = b"MVQS"


class FormatError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<BI", TENSOR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError("not an MVQT tensor (bad magic)")
    if len(buf) < 9:
        raise FormatError("truncated MVQT header")
    version, ndim = struct.unpack_from("<BI", buf, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported MVQT version {version}")
    off = 9
    if len(buf) < off + 4 * ndim:
        raise FormatError("truncated MVQT dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) != off + 4 * count:
        raise FormatError(f"MVQT payload is {len(buf) - off} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return data.astype(np.float32).reshape(dims)


def encode_source(source) -> bytes:
    assignment = np.asarray(source.assignment, dtype="<u4")
    return SOURCE_MAGIC + struct.pack("<II", source.k, source.l) + assignment.tobytes()


def decode_source(buf: bytes):
    from .tome import SourceMatrix

    if buf[:4] != SOURCE_MAGIC:
        raise FormatError("not an MVQS source matrix (bad magic)")
    if len(buf) < 12:
        raise FormatError("truncated MVQS header")
    k, l = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + 4 * l:
        raise FormatError(f"MVQS payload is {len(buf) - 12} bytes, expected {4 * l}")
    assignment = np.frombuffer(buf, dtype="<u4", count=l, offset=12).astype(np.int64)
    if l and assignment.max() >= k:
        raise FormatError(f"MVQS assignment references row {assignment.max()} >= k={k}")
    return SourceMatrix(assignment, k)


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_source(path, source) -> None:
    Path(path).write_bytes(encode_source(source))


def read_source(path):
    return decode_source(Path(path).read_bytes())


def write_codes(path, indices) -> None:
    Path(path).write_text("".join(f"{int(i)}\n" for i in indices))


def read_codes(path) -> np.ndarray:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if not line.isdigit():
            raise FormatError(f"{path}:{lineno}: not a code index: {line!r}")
        out.append(int(line))
    return np.asarray(out, dtype=np.int64)

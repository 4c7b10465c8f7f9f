"""Little-endian binary record primitives shared by the EWCL checkpoint and
EWCV volume containers."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class ContainerError(Exception):
    pass


class FormatError(ContainerError):
    """Bad magic, unsupported version, or a malformed record."""


class TruncatedError(ContainerError):
    """The file ended before a record was complete."""


_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedError(f"file ended while reading {what} ({len(buf)}/{n} bytes)")
    return buf


def write_header(f: BinaryIO, magic: bytes, version: int) -> None:
    f.write(magic)
    f.write(struct.pack("<I", version))


def check_header(f: BinaryIO, magic: bytes, version: int, kind: str) -> None:
    got = read_exact(f, len(magic), f"{kind} magic")
    if got != magic:
        raise FormatError(f"bad {kind} magic {got!r}, expected {magic!r}")
    (ver,) = struct.unpack("<I", read_exact(f, 4, f"{kind} version"))
    if ver != version:
        raise FormatError(f"unsupported {kind} version {ver}, expected {version}")


def write_str(f: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def read_str(f: BinaryIO, what: str) -> str:
    (n,) = struct.unpack("<I", read_exact(f, 4, f"{what} length"))
    return read_exact(f, n, what).decode("utf-8")


def write_array(f: BinaryIO, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a)
    le = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    if np.dtype(le) not in _DTYPE_CODES:
        raise FormatError(f"unsupported array dtype {a.dtype}")
    f.write(struct.pack("<BB", _DTYPE_CODES[np.dtype(le)], a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.astype(le, copy=False).tobytes())


def read_array(f: BinaryIO, what: str) -> np.ndarray:
    code, ndim = struct.unpack("<BB", read_exact(f, 2, f"{what} array header"))
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code} in {what}")
    shape = struct.unpack(f"<{ndim}I", read_exact(f, 4 * ndim, f"{what} shape"))
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    raw = read_exact(f, nbytes, f"{what} payload")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

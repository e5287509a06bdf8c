"""Little-endian helpers shared by the binary file formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Raised when a binary file does not match the expected layout."""


def write_magic(f: BinaryIO, magic: bytes, version: int) -> None:
    f.write(magic)
    f.write(struct.pack("<H", version))


def read_magic(f: BinaryIO, magic: bytes, supported: tuple[int, ...]) -> int:
    got = f.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = read(f, "<H")
    if version not in supported:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    return version


def read(f: BinaryIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    buf = f.read(size)
    if len(buf) != size:
        raise FormatError("unexpected end of file")
    return struct.unpack(fmt, buf)


def write_str(f: BinaryIO, s: str, width: str = "<H") -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack(width, len(raw)))
    f.write(raw)


def read_str(f: BinaryIO, width: str = "<H") -> str:
    (n,) = read(f, width)
    raw = f.read(n)
    if len(raw) != n:
        raise FormatError("unexpected end of file")
    return raw.decode("utf-8")


def write_array(f: BinaryIO, a: np.ndarray, dtype: str) -> None:
    f.write(np.ascontiguousarray(a, dtype=np.dtype(dtype)).tobytes())


def read_array(f: BinaryIO, dtype: str, count: int) -> np.ndarray:
    dt = np.dtype(dtype)
    raw = f.read(dt.itemsize * count)
    if len(raw) != dt.itemsize * count:
        raise FormatError("unexpected end of file")
    return np.frombuffer(raw, dtype=dt).copy()

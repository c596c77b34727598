"""Little-endian binary container shared by all on-disk formats.

Every file is laid out as::

    magic (4 bytes) | version (u32) | payload ... | checksum (u64)

The checksum is an 8-byte BLAKE2b digest of everything that precedes it.
Readers verify magic, then checksum, then version, so a truncated or
bit-flipped file is reported as corrupt before its version is trusted.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Type

import numpy as np

from .errors import CorruptArchive, VersionError

CHECKSUM_SIZE = 8


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_SIZE).digest()


def config_hash(obj: Any) -> str:
    """Short stable hash of a JSON-serializable config object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class Writer:
    """Accumulates little-endian fields into a byte buffer."""

    def __init__(self, magic: bytes, version: int):
        assert len(magic) == 4
        self._parts: list[bytes] = [magic, struct.pack("<I", version)]

    def u16(self, v: int) -> None:
        self._parts.append(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", v))

    def text(self, s: str) -> None:
        b = s.encode("utf-8")
        self.u32(len(b))
        self._parts.append(b)

    def json(self, obj: Any) -> None:
        self.text(json.dumps(obj, sort_keys=True, separators=(",", ":")))

    def array(self, a: np.ndarray, dtype: str) -> None:
        self._parts.append(np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def finish(self) -> bytes:
        body = b"".join(self._parts)
        return body + checksum(body)


class Reader:
    """Cursor over a verified payload; any overrun is reported as corruption."""

    def __init__(self, data: bytes, exc: Type[Exception]):
        self._data = data
        self._pos = 0
        self._exc = exc

    def _take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise self._exc("unexpected end of data")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def text(self) -> str:
        n = self.u32()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise self._exc(f"bad utf-8 string: {e}") from None

    def json(self) -> Any:
        try:
            return json.loads(self.text())
        except json.JSONDecodeError as e:
            raise self._exc(f"bad json header: {e}") from None

    def array(self, count: int, dtype: str, shape: tuple[int, ...] | None = None) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self._take(count * dt.itemsize)
        a = np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype), copy=True)
        return a.reshape(shape) if shape is not None else a

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)

    def expect_end(self) -> None:
        if not self.exhausted:
            raise self._exc(f"{len(self._data) - self._pos} trailing bytes")


def open_container(
    data: bytes,
    magic: bytes,
    max_version: int,
    exc: Type[Exception] = CorruptArchive,
) -> tuple[int, Reader]:
    """Verify a container and return ``(version, reader over payload)``."""
    if len(data) < 8 + CHECKSUM_SIZE:
        raise exc("file too short")
    if data[:4] != magic:
        raise exc(f"bad magic {data[:4]!r}, expected {magic!r}")
    body, digest = data[:-CHECKSUM_SIZE], data[-CHECKSUM_SIZE:]
    if checksum(body) != digest:
        raise exc("checksum mismatch")
    version = struct.unpack("<I", data[4:8])[0]
    if version > max_version or version == 0:
        raise VersionError(f"unsupported format version {version} (max {max_version})")
    return version, Reader(body[8:], exc)


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

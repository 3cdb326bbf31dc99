"""Low-level helpers for the versioned little-endian binary containers.

Both file kinds (checkpoints and datasets) share one framing::

    magic      8 bytes
    version    uint32
    header     uint32 length + UTF-8 JSON text
    body       format-specific records
    crc32      uint32 over everything before it

Readers go through :class:`Reader`, which turns any short read into a
:class:`CorruptFileError` so a truncated file never yields partial objects.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, MagicError, VersionMismatchError


class Writer:
    def __init__(self, magic: bytes, version: int, header: dict):
        self.buf = io.BytesIO()
        self.buf.write(magic)
        self.u32(version)
        self.text(json.dumps(header, sort_keys=True))

    def u8(self, v: int) -> None:
        self.buf.write(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self.buf.write(struct.pack("<I", v))

    def text(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.buf.write(raw)

    def array(self, a: np.ndarray) -> None:
        a = np.ascontiguousarray(a, dtype="<f8")
        self.u8(a.ndim)
        for extent in a.shape:
            self.u32(extent)
        self.buf.write(a.tobytes())

    def to_bytes(self) -> bytes:
        body = self.buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)


class Reader:
    def __init__(self, raw: bytes, magic: bytes, version: int, what: str):
        self.what = what
        if raw[: len(magic)] != magic:
            raise MagicError(f"not a {what}: bad magic {raw[:len(magic)]!r} (expected {magic!r})")
        if len(raw) < len(magic) + 8:
            raise CorruptFileError(f"{what} is truncated ({len(raw)} bytes)")
        body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
        self.raw = body
        self.pos = len(magic)
        found = self.u32()
        if found != version:
            raise VersionMismatchError(found, version, what)
        if zlib.crc32(body) != crc:
            raise CorruptFileError(f"{what} checksum mismatch (truncated or damaged)")
        try:
            self.header = json.loads(self.text())
        except ValueError as exc:
            raise CorruptFileError(f"{what} header is not valid JSON: {exc}") from exc

    @classmethod
    def open(cls, path, magic: bytes, version: int, what: str) -> "Reader":
        return cls(Path(path).read_bytes(), magic, version, what)

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptFileError(f"{self.what} ends early at byte {len(self.raw)} (wanted {self.pos + n})")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def text(self) -> str:
        n = self.u32()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFileError(f"{self.what} has an undecodable string") from exc

    def array(self) -> np.ndarray:
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def finish(self) -> None:
        if self.pos != len(self.raw):
            raise CorruptFileError(f"{self.what} has {len(self.raw) - self.pos} unexpected trailing bytes")

"""PRL1 tensor container: a tiny bit-exact binary format for float32 tensors.

Layout (all integers little-endian):

    magic   "PRL1"            4 bytes
    version u32 = 1
    count   u32               number of entries
    entry:  name_len  u16
            name      UTF-8 bytes
            dtype     u8      0 = float32 (other codes reserved)
            rank      u8
            extents   u64 * rank
            payload   f32 * prod(extents), row-major

Writing rejects non-finite values; reading accepts them but records the
offending entry names in ``TensorContainer.nonfinite`` so callers can warn.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, SerializationError

MAGIC = b"PRL1"
VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_DTYPE_RANK = struct.Struct("<BB")


@dataclass(frozen=True)
class TensorEntry:
    name: str
    array: np.ndarray  # float32, C-contiguous

    def __post_init__(self):
        # ascontiguousarray would promote rank-0 scalars to rank 1
        arr = np.asarray(self.array, dtype=np.float32)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        object.__setattr__(self, "array", arr)


@dataclass(frozen=True)
class TensorContainer:
    """Ordered, immutable collection of named float32 tensors."""

    entries: tuple[TensorEntry, ...]
    nonfinite: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise FormatError(f"duplicate entry names: {dup}")
        object.__setattr__(self, "entries", entries)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __contains__(self, name: str) -> bool:
        return any(e.name == name for e in self.entries)

    def get(self, name: str) -> np.ndarray:
        for e in self.entries:
            if e.name == name:
                return e.array
        raise KeyError(name)


def container_from_arrays(pairs) -> TensorContainer:
    """Build a container from an iterable of (name, array-like) pairs."""
    return TensorContainer(tuple(TensorEntry(n, np.asarray(a)) for n, a in pairs))


def write_container(container: TensorContainer) -> bytes:
    out = bytearray()
    out += _HEADER.pack(MAGIC, VERSION, len(container.entries))
    for entry in container.entries:
        if not np.all(np.isfinite(entry.array)):
            raise SerializationError(f"entry {entry.name!r} contains non-finite values")
        name = entry.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise SerializationError(f"entry name too long: {len(name)} bytes")
        if entry.array.ndim > 0xFF:
            raise SerializationError(f"entry {entry.name!r} rank {entry.array.ndim} exceeds format limit")
        out += _NAME_LEN.pack(len(name))
        out += name
        out += _DTYPE_RANK.pack(DTYPE_F32, entry.array.ndim)
        for extent in entry.array.shape:
            out += struct.pack("<Q", extent)
        out += entry.array.tobytes(order="C")
    return bytes(out)


def read_container(data: bytes) -> TensorContainer:
    if len(data) < _HEADER.size:
        raise FormatError(f"container too short: {len(data)} bytes")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    pos = _HEADER.size
    entries: list[TensorEntry] = []
    seen: set[str] = set()
    nonfinite: list[str] = []
    for _ in range(count):
        pos, name = _read_name(data, pos)
        if name in seen:
            raise FormatError(f"duplicate entry name {name!r}")
        seen.add(name)
        if pos + _DTYPE_RANK.size > len(data):
            raise FormatError(f"truncated entry header for {name!r}")
        dtype, rank = _DTYPE_RANK.unpack_from(data, pos)
        pos += _DTYPE_RANK.size
        if dtype != DTYPE_F32:
            raise FormatError(f"unknown dtype code {dtype} for entry {name!r}")
        if pos + 8 * rank > len(data):
            raise FormatError(f"truncated extents for {name!r}")
        shape = struct.unpack_from(f"<{rank}Q", data, pos) if rank else ()
        pos += 8 * rank
        size = 1
        for extent in shape:
            size *= extent
        nbytes = 4 * size
        if pos + nbytes > len(data):
            raise FormatError(
                f"truncated payload for {name!r}: need {nbytes} bytes, have {len(data) - pos}"
            )
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += nbytes
        if not np.all(np.isfinite(arr)):
            nonfinite.append(name)
        entries.append(TensorEntry(name, arr.copy()))
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last entry")
    return TensorContainer(tuple(entries), nonfinite=tuple(nonfinite))


def _read_name(data: bytes, pos: int) -> tuple[int, str]:
    if pos + _NAME_LEN.size > len(data):
        raise FormatError("truncated entry name length")
    (name_len,) = _NAME_LEN.unpack_from(data, pos)
    pos += _NAME_LEN.size
    if pos + name_len > len(data):
        raise FormatError("truncated entry name")
    try:
        name = data[pos : pos + name_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"entry name is not valid UTF-8: {exc}") from exc
    return pos + name_len, name


def load_container(path) -> TensorContainer:
    with open(path, "rb") as fh:
        return read_container(fh.read())


def save_container(container: TensorContainer, path) -> None:
    data = write_container(container)
    with open(path, "wb") as fh:
        fh.write(data)

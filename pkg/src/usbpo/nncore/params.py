"""Flat parameter storage and the binary checkpoint format."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, Mapping

import numpy as np

from ..exceptions import DataError, NonFiniteError, UsageError

MAGIC = b"USBP"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ParamVector:
    """All learnable parameters of one model as a flat float64 array plus a layout.

    ``layout`` is an ordered tuple of ``(name, shape)``; :meth:`tensors`
    returns reshaped views into ``values``.
    """

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple((n, tuple(int(d) for d in s)) for n, s in self.layout))
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if expected != values.size:
            raise UsageError(f"layout describes {expected} values but {values.size} were given")

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "ParamVector":
        layout = tuple((name, np.shape(t)) for name, t in tensors.items())
        if not tensors:
            return cls(np.zeros(0), ())
        flat = np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1) for t in tensors.values()])
        return cls(flat, layout)

    def tensors(self) -> dict[str, np.ndarray]:
        out, offset = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[offset:offset + n].reshape(shape)
            offset += n
        return out

    def __len__(self) -> int:
        return self.values.size

    def with_values(self, values: np.ndarray) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise UsageError(f"expected {self.values.shape} values, got {values.shape}")
        return ParamVector(values.copy(), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def assert_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            bad = [n for n, t in self.tensors().items() if not np.all(np.isfinite(t))]
            raise NonFiniteError(f"non-finite parameters in {bad}")

    def digest(self) -> str:
        h = hashlib.sha256(self.values.tobytes())
        h.update(repr(self.layout).encode())
        return h.hexdigest()


def _iter_records(tensors: Mapping[str, np.ndarray]) -> Iterator[bytes]:
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise UsageError(f"tensor {name!r} cannot be encoded")
        yield struct.pack("<H", len(raw)) + raw
        yield struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        yield arr.tobytes(order="C")


def write_checkpoint(fh: BinaryIO | str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors as ``USBP`` | u16 version | records (little-endian f64, row-major)."""
    if isinstance(fh, (str, Path)):
        with open(fh, "wb") as f:
            return write_checkpoint(f, tensors)
    fh.write(MAGIC + struct.pack("<H", FORMAT_VERSION))
    for chunk in _iter_records(tensors):
        fh.write(chunk)


def _take(buf: memoryview, pos: int, n: int) -> tuple[memoryview, int]:
    if pos + n > len(buf):
        raise DataError("truncated checkpoint")
    return buf[pos:pos + n], pos + n


def read_checkpoint(fh: BinaryIO | str | Path) -> dict[str, np.ndarray]:
    if isinstance(fh, (str, Path)):
        with open(fh, "rb") as f:
            return read_checkpoint(f)
    buf = memoryview(fh.read())
    if bytes(buf[:4]) != MAGIC:
        raise DataError("bad checkpoint header")
    chunk, pos = _take(buf, 4, 2)
    (version,) = struct.unpack("<H", chunk)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        chunk, pos = _take(buf, pos, 2)
        (name_len,) = struct.unpack("<H", chunk)
        chunk, pos = _take(buf, pos, name_len)
        name = bytes(chunk).decode("utf-8")
        chunk, pos = _take(buf, pos, 1)
        (rank,) = struct.unpack("<B", chunk)
        chunk, pos = _take(buf, pos, 4 * rank)
        dims = struct.unpack(f"<{rank}I", chunk)
        count = int(np.prod(dims)) if rank else 1
        chunk, pos = _take(buf, pos, 8 * count)
        out[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(dims)
    return out

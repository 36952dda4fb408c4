"""Little-endian binary primitives shared by the model container and the wire codec.

Every f64 array is preceded by a u32 element count; tensors carry a u32
order and one u32 per extent before the data, matrices a u32 row and
column count.  Array data is row-major float64.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["Writer", "Reader", "TruncatedError"]


class TruncatedError(ValueError):
    pass


class Writer:
    def __init__(self):
        self.parts = []

    def raw(self, data: bytes):
        self.parts.append(data)

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", float(v)))

    def string(self, s: str):
        data = s.encode("utf-8")
        self.u32(len(data))
        self.parts.append(data)

    def array(self, a):
        a = np.ascontiguousarray(a, dtype="<f8")
        self.u32(a.size)
        self.parts.append(a.tobytes())

    def matrix(self, m):
        self.u32(m.shape[0])
        self.u32(m.shape[1])
        self.array(m)

    def tensor(self, t):
        self.u32(t.ndim)
        for s in t.shape:
            self.u32(s)
        self.array(t)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError("truncated data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        n = self.u32()
        return self.take(n).decode("utf-8")

    def array(self) -> np.ndarray:
        n = self.u32()
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def matrix(self) -> np.ndarray:
        rows, cols = self.u32(), self.u32()
        a = self.array()
        if a.size != rows * cols:
            raise TruncatedError("matrix size mismatch")
        return a.reshape(rows, cols)

    def tensor(self) -> np.ndarray:
        order = self.u32()
        shape = tuple(self.u32() for _ in range(order))
        a = self.array()
        if a.size != int(np.prod(shape)):
            raise TruncatedError("tensor size mismatch")
        return a.reshape(shape)

    def exhausted(self) -> bool:
        return self.pos == len(self.data)

"""Binary file formats.

``UQTF`` holds a float32 tensor::

    "UQTF" | version u8 (=1) | dtype u8 (0 = f32) | ndim u8 | dims u32 LE x ndim | payload f32 LE

``UQPK`` holds a packed BCQ artifact::

    "UQPK" | version u8 (=1) | k u8 | g u32 | n_groups u32 | ndim u8 | dims u32 x ndim
    then per group: k alpha halves, one z_B half (all f16 LE), ceil(width*k/8) code bytes

The tensor is viewed as rows of its last axis; each row is cut into groups of
``g`` with a shorter tail group when ``g`` does not divide the row. Groups are
stored row-major. Code bit ``j`` of weight ``i`` sits at bit ``i*k + j`` of the
group's code section, MSB first within each byte; +1 is stored as 1.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bcq
from .bcq import BCQParams

TENSOR_MAGIC = b"UQTF"
PACKED_MAGIC = b"UQPK"
VERSION = 1
DTYPE_F32 = 0


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = memoryview(data), 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"truncated {what}: need {n} bytes at offset {self.pos}, "
                                 f"{len(self.data) - self.pos} left")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes after payload")


def _header(r: _Reader, magic: bytes, kind: str):
    got = r.take(4, "magic")
    if got != magic:
        raise BadMagicError(f"not a {kind} file (magic {got!r}, expected {magic!r})")
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported {kind} version {version} (reader supports {VERSION})")


def _dims(shape) -> bytes:
    shape = tuple(int(d) for d in shape)
    if len(shape) > 255 or any(not 0 <= d < 2**32 for d in shape):
        raise FormatError(f"shape {shape} cannot be encoded")
    return struct.pack(f"<B{len(shape)}I", len(shape), *shape)


def _read_dims(r: _Reader) -> tuple:
    (ndim,) = r.unpack("<B", "ndim")
    return r.unpack(f"<{ndim}I", "dims")


def _load(src) -> bytes:
    if isinstance(src, (bytes, bytearray, memoryview)):
        return bytes(src)
    return Path(src).read_bytes()


# --------------------------------------------------------------------- tensor

def encode_tensor(x) -> bytes:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise FormatError("tensor contains non-finite values")
    head = TENSOR_MAGIC + struct.pack("<BB", VERSION, DTYPE_F32) + _dims(x.shape)
    return head + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    r = _Reader(data)
    _header(r, TENSOR_MAGIC, "tensor")
    (dtype,) = r.unpack("<B", "dtype")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    shape = _read_dims(r)
    count = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(r.take(4 * count, "payload"), dtype="<f4").reshape(shape)
    r.finish()
    return arr.astype(np.float32)


def write_tensor(path, x):
    Path(path).write_bytes(encode_tensor(x))


def read_tensor(src) -> np.ndarray:
    return decode_tensor(_load(src))


# ------------------------------------------------------------------- packed

def group_widths(shape, g: int) -> list[int]:
    """Widths of the groups of one row, in storage order."""
    cols = int(shape[-1]) if len(shape) else 1
    widths = [g] * (cols // g)
    if cols % g:
        widths.append(cols % g)
    return widths


def group_count(shape, g: int) -> int:
    rows = int(np.prod(shape[:-1], dtype=np.int64)) if len(shape) > 1 else 1
    return rows * len(group_widths(shape, g))


def group_bits(width: int, k: int) -> int:
    """Payload bits of one group: one bit per code, 16 per stored real."""
    return width * k + 16 * (k + 1)


def code_bytes(width: int, k: int) -> int:
    return (width * k + 7) // 8


@dataclass
class PackedArtifact:
    """Folded BCQ parameters at half precision plus +/-1 codes.

    ``alpha`` is ``(n_groups, k)`` and ``z_b`` ``(n_groups,)``, both float16;
    ``codes[i]`` is a ``(width_i, k)`` int8 array of +/-1.
    """

    k: int
    g: int
    shape: tuple
    alpha: np.ndarray
    z_b: np.ndarray
    codes: list

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        if not 1 <= self.k <= 255 or not 1 <= self.g < 2**32:
            raise FormatError(f"k={self.k}, g={self.g} out of range")
        n = group_count(self.shape, self.g)
        row = group_widths(self.shape, self.g)
        widths = row * (n // len(row)) if row else []
        if self.alpha.shape != (n, self.k) or self.z_b.shape != (n,) or len(self.codes) != n:
            raise ShapeMismatchError(f"expected {n} groups of k={self.k} for shape {self.shape}")
        for c, w in zip(self.codes, widths):
            if np.shape(c) != (w, self.k):
                raise ShapeMismatchError(f"code block of shape {np.shape(c)}, expected {(w, self.k)}")

    @property
    def n_groups(self) -> int:
        return len(self.codes)

    @classmethod
    def from_groups(cls, shape, g: int, groups):
        """Build from row-major ``(codes (width, k), BCQParams)`` pairs, halving the reals."""
        groups = list(groups)
        if not groups:
            raise ShapeMismatchError("no groups")
        k = groups[0][1].k
        alpha = to_half(np.stack([p.alpha for _, p in groups]))
        z_b = to_half(np.array([float(p.z_b) for _, p in groups]))
        codes = [np.where(np.asarray(C) > 0, 1, -1).astype(np.int8) for C, _ in groups]
        return cls(k, g, shape, alpha, z_b, codes)

    def payload_bits(self) -> int:
        return sum(group_bits(c.shape[0], self.k) for c in self.codes)


def to_half(x) -> np.ndarray:
    """Round-to-nearest-even conversion to float16; overflow is an error."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        h = x.astype(np.float16)
    if np.any(np.isinf(h) & np.isfinite(x)) or not np.all(np.isfinite(x)):
        raise FormatError("value outside the half-precision range")
    return h


def pack_codes(C) -> bytes:
    bits = (np.asarray(C) > 0).astype(np.uint8).ravel()
    return np.packbits(bits, bitorder="big").tobytes()


def unpack_codes(data: bytes, width: int, k: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")
    n = width * k
    if np.any(bits[n:]):
        raise FormatError("non-zero padding bits in code section")
    return np.where(bits[:n].reshape(width, k) == 1, 1, -1).astype(np.int8)


def encode_packed(a: PackedArtifact) -> bytes:
    out = io.BytesIO()
    out.write(PACKED_MAGIC + struct.pack("<BBII", VERSION, a.k, a.g, a.n_groups) + _dims(a.shape))
    alpha = np.asarray(a.alpha, dtype="<f2")
    z_b = np.asarray(a.z_b, dtype="<f2")
    for i, C in enumerate(a.codes):
        out.write(alpha[i].tobytes())
        out.write(z_b[i:i + 1].tobytes())
        out.write(pack_codes(C))
    return out.getvalue()


def decode_packed(data: bytes) -> PackedArtifact:
    r = _Reader(data)
    _header(r, PACKED_MAGIC, "packed artifact")
    k, g, n = r.unpack("<BII", "header")
    shape = _read_dims(r)
    if k < 1 or g < 1:
        raise FormatError(f"invalid header: k={k}, g={g}")
    if n != group_count(shape, g):
        raise ShapeMismatchError(f"header says {n} groups, shape {shape} with g={g} needs {group_count(shape, g)}")
    widths = group_widths(shape, g)
    alpha, z_b, codes = np.empty((n, k), np.float16), np.empty(n, np.float16), []
    for i in range(n):
        w = widths[i % len(widths)]
        reals = np.frombuffer(r.take(2 * (k + 1), f"scales of group {i}"), dtype="<f2")
        alpha[i], z_b[i] = reals[:k], reals[k]
        codes.append(unpack_codes(r.take(code_bytes(w, k), f"codes of group {i}"), w, k))
    r.finish()
    return PackedArtifact(k, g, shape, alpha, z_b, codes)


def write_packed(path, a: PackedArtifact):
    Path(path).write_bytes(encode_packed(a))


def read_packed(src) -> PackedArtifact:
    return decode_packed(_load(src))


def dequantize_artifact(a: PackedArtifact) -> np.ndarray:
    """Per group ``C @ alpha + z_B`` with the halves widened to float64."""
    alpha = a.alpha.astype(np.float64)
    z_b = a.z_b.astype(np.float64)
    parts = [bcq.reconstruct(C, BCQParams(alpha[i], z_b[i])) for i, C in enumerate(a.codes)]
    flat = np.concatenate(parts) if parts else np.zeros(0)
    if flat.size != int(np.prod(a.shape, dtype=np.int64)):
        raise ShapeMismatchError(f"{flat.size} weights do not fill shape {a.shape}")
    return flat.reshape(a.shape)


def artifact_from_layer(layer) -> PackedArtifact:
    """Pack an optimizer :class:`LayerResult`, reordering its banks to row-major groups."""
    layout = layer.layout
    rows = layout.shape[0]
    per_row = []
    for (lo, hi, width), (C, p) in zip(layout.banks, layer.banks):
        m = (hi - lo) // width
        per_row.append([[(C[r * m + j], BCQParams(p.alpha[r * m + j], p.z_b[r * m + j])) for j in range(m)]
                        for r in range(rows)])
    groups = [grp for r in range(rows) for bank in per_row for grp in bank[r]]
    return PackedArtifact.from_groups(layout.shape, layout.group_size, groups)

"""Dense float32 tensors plus the handful of layout operations the pipeline needs.

Every tensor is row-major (C order, last axis fastest) and immutable once
built. The canonical layout for layer data throughout the package is
(M, channels, height, width): the extra sample axis M leads, so the flat
memory order is what the single-transpose unwarp step relies on.

reshape is a pure reinterpretation of memory; transpose materializes the
permuted data so the result is canonically row-major again.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DTNS"
FORMAT_VERSION = 1


class ElementCountMismatch(ValueError):
    """reshape target has a different element count."""


class AxisOutOfRange(IndexError):
    """Axis index is not a valid axis of the tensor."""


class RangeOutOfBounds(IndexError):
    """crop range does not fit inside the axis extent."""


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible."""


class FormatError(ValueError):
    """A .dtns byte stream is malformed."""


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable dense float32 array with row-major layout."""

    array: np.ndarray

    def __post_init__(self):
        a = self.array
        if not isinstance(a, np.ndarray) or a.dtype != np.float32:
            raise TypeError("Tensor requires a float32 ndarray")
        if a.ndim < 1 or any(d < 1 for d in a.shape):
            raise ShapeMismatch(f"extents must all be >= 1, got {a.shape}")
        if not a.flags.c_contiguous:
            raise ShapeMismatch("Tensor data must be C-contiguous")
        a.flags.writeable = False

    @staticmethod
    def from_array(data) -> "Tensor":
        return Tensor(np.array(data, dtype=np.float32, order="C"))

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float32))

    @staticmethod
    def full(shape, value: float) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=np.float32))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def nbytes(self) -> int:
        return self.array.nbytes

    @property
    def flat(self) -> np.ndarray:
        """The underlying flat data sequence (read-only view)."""
        return self.array.reshape(-1)

    def item(self, *index) -> float:
        return float(self.array[tuple(index)])

    def tolist(self):
        return self.array.tolist()

    def equals(self, other: "Tensor") -> bool:
        """Bit-exact equality: same shape, same data."""
        return self.shape == other.shape and np.array_equal(self.array, other.array)

    def reshape(self, new_shape) -> "Tensor":
        return reshape(self, new_shape)

    def transpose(self, axis_a: int, axis_b: int) -> "Tensor":
        return transpose(self, axis_a, axis_b)

    def pad(self, axis: int, before: int, after: int, value: float = 0.0) -> "Tensor":
        return pad(self, axis, before, after, value)

    def crop(self, axis: int, start: int, length: int) -> "Tensor":
        return crop(self, axis, start, length)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _wrap(array: np.ndarray) -> Tensor:
    """Wrap a freshly built array without copying. Caller hands over ownership."""
    return Tensor(np.ascontiguousarray(array, dtype=np.float32))


def _check_axis(t: Tensor, axis: int) -> None:
    if not 0 <= axis < t.ndim:
        raise AxisOutOfRange(f"axis {axis} out of range for shape {t.shape}")


def linear_index(shape, index) -> int:
    """Row-major flat offset of a multi-index (stride of the last axis is 1)."""
    if len(index) != len(shape):
        raise ShapeMismatch(f"index {index} does not match shape {shape}")
    offset = 0
    stride = 1
    for extent, i in zip(reversed(shape), reversed(index)):
        if not 0 <= i < extent:
            raise RangeOutOfBounds(f"index {index} out of bounds for {shape}")
        offset += i * stride
        stride *= extent
    return offset


def reshape(t: Tensor, new_shape) -> Tensor:
    """Reinterpret the flat data under a new shape. No data movement."""
    new_shape = tuple(int(d) for d in new_shape)
    count = 1
    for d in new_shape:
        count *= d
    if count != t.size:
        raise ElementCountMismatch(
            f"cannot reshape {t.shape} ({t.size} elements) to {new_shape} ({count})"
        )
    return Tensor(t.array.reshape(new_shape))


def transpose(t: Tensor, axis_a: int, axis_b: int) -> Tensor:
    """Swap two axes and materialize the result in row-major order."""
    _check_axis(t, axis_a)
    _check_axis(t, axis_b)
    if axis_a == axis_b:
        raise AxisOutOfRange("transpose axes must differ")
    return _wrap(np.swapaxes(t.array, axis_a, axis_b))


def pad(t: Tensor, axis: int, before: int, after: int, value: float = 0.0) -> Tensor:
    _check_axis(t, axis)
    if before < 0 or after < 0:
        raise RangeOutOfBounds("pad amounts must be >= 0")
    if before == 0 and after == 0:
        return t
    width = [(0, 0)] * t.ndim
    width[axis] = (before, after)
    return _wrap(np.pad(t.array, width, constant_values=np.float32(value)))


def crop(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    _check_axis(t, axis)
    if length < 1 or start < 0 or start + length > t.shape[axis]:
        raise RangeOutOfBounds(
            f"crop [{start}, {start + length}) does not fit axis {axis} of {t.shape}"
        )
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, start + length)
    return _wrap(t.array[tuple(index)])


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along `axis`; every other extent must match exactly."""
    ts = list(tensors)
    if not ts:
        raise ShapeMismatch("concat needs at least one tensor")
    _check_axis(ts[0], axis)
    head = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(head):
            raise ShapeMismatch(f"rank mismatch: {head} vs {t.shape}")
        for ax, (a, b) in enumerate(zip(head, t.shape)):
            if ax != axis and a != b:
                raise ShapeMismatch(
                    f"extents differ on axis {ax}: {head} vs {t.shape}"
                )
    return _wrap(np.concatenate([t.array for t in ts], axis=axis))


def save(t: Tensor, path) -> None:
    """Write the .dtns format: magic, u32 version, u32 ndim, u64 extents, f32 payload.

    All integers and floats are little-endian; payload is row-major.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, t.ndim))
        fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        fh.write(t.array.astype("<f4", copy=False).tobytes())


def load(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    return from_bytes(blob)


def to_bytes(t: Tensor) -> bytes:
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + t.array.astype("<f4", copy=False).tobytes()


def from_bytes(blob: bytes) -> Tensor:
    if blob[:4] != MAGIC:
        raise FormatError("not a .dtns stream (bad magic)")
    if len(blob) < 12:
        raise FormatError("truncated .dtns header")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported .dtns version {version}")
    if ndim < 1:
        raise FormatError("ndim must be >= 1")
    if len(blob) < 12 + 8 * ndim:
        raise FormatError("truncated .dtns extents")
    shape = struct.unpack_from(f"<{ndim}Q", blob, 12)
    if any(d < 1 for d in shape):
        raise FormatError(f"extents must be >= 1, got {shape}")
    count = 1
    for d in shape:
        count *= d
    payload = blob[12 + 8 * ndim :]
    if len(payload) != 4 * count:
        raise FormatError(
            f"payload holds {len(payload)} bytes, expected {4 * count} for {shape}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    return _wrap(data)

"""2D plane types: dense real/integer grids and bit-packed binary grids.

A BitPlane stores one {-1,+1} element per bit (1 encodes +1, 0 encodes -1),
packed row-major into 64-bit words with every row starting on a word
boundary. Padding bits beyond `width` are always zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

WORD_BITS = 64

# dtype tags for the binary container format
_TAG_REAL = 0
_TAG_INT = 1
_TAG_BITS = 2

_MAGIC = b"DSGN"


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RealPlane:
    """Immutable 2D grid of finite float64 values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"RealPlane needs a 2D array, got ndim={v.ndim}")
        if not np.all(np.isfinite(v)):
            raise ValueError("RealPlane entries must be finite")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class IntPlane:
    """Immutable 2D grid of signed integers."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"IntPlane needs a 2D array, got ndim={v.ndim}")
        if not np.issubdtype(v.dtype, np.integer):
            raise ValueError(f"IntPlane needs an integer dtype, got {v.dtype}")
        object.__setattr__(self, "values", _freeze(v.astype(np.int32)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BitPlane:
    """Bit-packed {-1,+1} plane: bit 1 is +1, bit 0 is -1.

    `words` has shape (height, words_per_row) and dtype uint64; column c of
    the logical plane lives in word c // 64, bit c % 64 (LSB first).
    """

    height: int
    width: int
    words: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.words, dtype=np.uint64)
        nw = words_per_row(self.width)
        if w.shape != (self.height, nw):
            raise ValueError(f"words shape {w.shape} != ({self.height}, {nw})")
        # reject garbage in the padding bits
        pad = self.width % WORD_BITS
        if nw > 0 and pad:
            mask = np.uint64((1 << pad) - 1)
            if np.any(w[:, -1] & ~mask):
                raise ValueError("padding bits beyond width must be zero")
        object.__setattr__(self, "words", _freeze(w))


def words_per_row(width: int) -> int:
    return (width + WORD_BITS - 1) // WORD_BITS


def pack(plane: IntPlane | np.ndarray) -> BitPlane:
    """Pack a {-1,+1} integer plane into a BitPlane."""
    v = plane.values if isinstance(plane, IntPlane) else np.asarray(plane)
    if v.ndim != 2:
        raise ValueError("pack expects a 2D plane")
    if not np.all(np.isin(v, (-1, 1))):
        raise ValueError("pack expects entries in {-1, +1}")
    h, w = v.shape
    bits = (v > 0).astype(np.uint8)
    packed = np.packbits(bits, axis=1, bitorder="little")  # (h, ceil(w/8))
    nbytes = words_per_row(w) * 8
    if packed.shape[1] < nbytes:
        packed = np.pad(packed, ((0, 0), (0, nbytes - packed.shape[1])))
    words = packed.view("<u8").reshape(h, words_per_row(w))
    return BitPlane(h, w, words)


def unpack(bp: BitPlane) -> IntPlane:
    """Unpack a BitPlane back to a {-1,+1} IntPlane."""
    raw = bp.words.astype("<u8").view(np.uint8).reshape(bp.height, -1)
    bits = np.unpackbits(raw, axis=1, count=bp.width, bitorder="little")
    return IntPlane(bits.astype(np.int32) * 2 - 1)


@dataclass(frozen=True)
class FeatureStack:
    """Homogeneous stack of planes, one per channel."""

    planes: tuple

    def __post_init__(self):
        planes = tuple(self.planes)
        if not planes:
            raise ValueError("FeatureStack needs at least one plane")
        dims = {(p.height, p.width) for p in planes}
        if len(dims) != 1:
            raise ValueError(f"inhomogeneous plane dims: {dims}")
        kinds = {type(p) for p in planes}
        if len(kinds) != 1:
            raise ValueError("FeatureStack planes must share one type")
        object.__setattr__(self, "planes", planes)

    @property
    def channels(self) -> int:
        return len(self.planes)

    @property
    def height(self) -> int:
        return self.planes[0].height

    @property
    def width(self) -> int:
        return self.planes[0].width

    def __iter__(self):
        return iter(self.planes)

    def __getitem__(self, i):
        return self.planes[i]


def dump_plane(plane) -> bytes:
    """Serialize a plane: magic, u32 height, u32 width, u8 tag, payload (LE)."""
    if isinstance(plane, RealPlane):
        tag, payload = _TAG_REAL, plane.values.astype("<f8").tobytes()
        h, w = plane.values.shape
    elif isinstance(plane, IntPlane):
        tag, payload = _TAG_INT, plane.values.astype("<i4").tobytes()
        h, w = plane.values.shape
    elif isinstance(plane, BitPlane):
        tag, payload = _TAG_BITS, plane.words.astype("<u8").tobytes()
        h, w = plane.height, plane.width
    else:
        raise TypeError(f"cannot serialize {type(plane).__name__}")
    return _MAGIC + struct.pack("<IIB", h, w, tag) + payload


def load_plane(data: bytes):
    """Inverse of dump_plane."""
    if data[:4] != _MAGIC:
        raise ValueError("bad magic")
    h, w, tag = struct.unpack_from("<IIB", data, 4)
    payload = data[13:]
    if tag == _TAG_REAL:
        return RealPlane(np.frombuffer(payload, dtype="<f8").reshape(h, w))
    if tag == _TAG_INT:
        return IntPlane(np.frombuffer(payload, dtype="<i4").reshape(h, w))
    if tag == _TAG_BITS:
        words = np.frombuffer(payload, dtype="<u8").reshape(h, words_per_row(w))
        return BitPlane(h, w, words)
    raise ValueError(f"unknown dtype tag {tag}")

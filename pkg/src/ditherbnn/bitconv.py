"""Binary 2D convolution over {-1,+1} planes.

Two routes: `conv_naive` is a direct integer reference, `conv_packed` is the
XNOR-popcount fast path over bit-packed words. The packed path uses a
compiled kernel when the extension is available; set DITHERBNN_NO_EXT=1 to
force the pure-numpy fallback. Both routes must agree exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .planes import BitPlane, IntPlane, WORD_BITS, pack, unpack

try:
    if os.environ.get("DITHERBNN_NO_EXT"):
        _ext = None
    else:
        from . import _convkernels as _ext
except ImportError:  # pragma: no cover - build-dependent
    _ext = None

HAVE_COMPILED = _ext is not None


@dataclass(frozen=True)
class BinaryKernel:
    """k x k kernel with {-1,+1} weights, stored bit-packed."""

    weights: BitPlane

    def __post_init__(self):
        if self.weights.height != self.weights.width:
            raise ValueError("kernel must be square")
        if self.weights.height < 1:
            raise ValueError("kernel side must be >= 1")

    @property
    def k(self) -> int:
        return self.weights.height

    @classmethod
    def from_array(cls, a: np.ndarray) -> "BinaryKernel":
        return cls(pack(np.asarray(a)))


def conv_range(k: int) -> list[int]:
    """Attainable outputs of a k x k binary convolution: {-k^2 + 2l}."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return [-k * k + 2 * ell for ell in range(k * k + 1)]


def _check_dims(x: BitPlane, k: int) -> None:
    if x.height < k or x.width < k:
        raise ValueError(
            f"input {x.height}x{x.width} smaller than kernel {k}x{k}"
        )


def conv_naive(x: BitPlane, kern: BinaryKernel) -> IntPlane:
    """Reference correlation of {-1,+1} planes, plain integer arithmetic."""
    k = kern.k
    _check_dims(x, k)
    xv = unpack(x).values
    kv = unpack(kern.weights).values
    H, W = x.height - k + 1, x.width - k + 1
    out = np.empty((H, W), dtype=np.int32)
    for i in range(H):
        for j in range(W):
            out[i, j] = int(np.sum(xv[i : i + k, j : j + k] * kv))
    return IntPlane(out)


def _kernel_rows(kern: BinaryKernel) -> np.ndarray:
    """Kernel row r packed into the low k bits of a uint64."""
    return kern.weights.words[:, 0].copy()


def _conv_packed_numpy(x: BitPlane, kern: BinaryKernel) -> IntPlane:
    k = kern.k
    words = x.words
    krows = _kernel_rows(kern)
    H, W = x.height - k + 1, x.width - k + 1
    mask = np.uint64(2**64 - 1) if k == WORD_BITS else np.uint64((1 << k) - 1)
    # k-bit window fields for every (row, output column)
    fields = np.empty((x.height, W), dtype=np.uint64)
    for j in range(W):
        wi, off = divmod(j, WORD_BITS)
        f = words[:, wi] >> np.uint64(off)
        if off + k > WORD_BITS:
            f = f | (words[:, wi + 1] << np.uint64(WORD_BITS - off))
        fields[:, j] = f & mask
    matches = np.zeros((H, W), dtype=np.int32)
    for r in range(k):
        xnor = ~(fields[r : r + H, :] ^ krows[r]) & mask
        matches += np.bitwise_count(xnor).astype(np.int32)
    return IntPlane(2 * matches - k * k)


def conv_packed(x: BitPlane, kern: BinaryKernel) -> IntPlane:
    """XNOR-popcount convolution; exact equal to conv_naive by construction."""
    k = kern.k
    _check_dims(x, k)
    if _ext is not None:
        out = _ext.conv_packed_words(x.words, x.height, x.width,
                                     _kernel_rows(kern), k)
        return IntPlane(out)
    return _conv_packed_numpy(x, kern)


def conv_packed_fallback(x: BitPlane, kern: BinaryKernel) -> IntPlane:
    """Pure-numpy packed path, exposed for equivalence tests and benchmarks."""
    _check_dims(x, kern.k)
    return _conv_packed_numpy(x, kern)

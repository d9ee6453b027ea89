"""Activation family: ReLU, Sign with clip STE, and the dithered Sign.

The dithered variant subtracts a spatially periodic threshold pattern from
the input before binarizing, so the single binarization threshold becomes a
small tiled kernel. Thresholds never receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .planes import BitPlane, IntPlane, RealPlane, pack


def _sign_array(a: np.ndarray) -> np.ndarray:
    """{-1,+1} sign with the tie rule sign(0) = +1."""
    return np.where(a >= 0, 1, -1).astype(np.int32)


def _clip_mask(a: np.ndarray) -> np.ndarray:
    """Derivative of clip(x, -1, 1); closed interval at the boundary."""
    return (np.abs(a) <= 1.0).astype(np.float64)


def tile(base: np.ndarray, h: int, w: int, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Periodically tile a d x d kernel over an h x w grid.

    out[i, j] = base[(i + offset[0]) % d, (j + offset[1]) % d]; the pattern
    truncates at non-divisible dims.
    """
    base = np.asarray(base)
    d0, d1 = base.shape
    ri = (np.arange(h) + offset[0]) % d0
    cj = (np.arange(w) + offset[1]) % d1
    return base[np.ix_(ri, cj)]


@dataclass(frozen=True)
class TiledThreshold:
    """A d x d threshold kernel expanded to target spatial dims."""

    base: np.ndarray
    tiled: np.ndarray

    @classmethod
    def for_dims(cls, base: np.ndarray, h: int, w: int,
                 offset: tuple[int, int] = (0, 0)) -> "TiledThreshold":
        base = np.asarray(base, dtype=np.float64)
        return cls(base=base, tiled=tile(base, h, w, offset))

    @classmethod
    def zero(cls, h: int, w: int) -> "TiledThreshold":
        return cls.for_dims(np.zeros((1, 1)), h, w)


def relu(x: RealPlane) -> RealPlane:
    return RealPlane(np.maximum(0.0, x.values))


def sign_fwd(x: RealPlane | IntPlane) -> BitPlane:
    return pack(_sign_array(x.values))


def sign_bwd(x: RealPlane, upstream_grad: RealPlane) -> RealPlane:
    """Straight-through gradient: pass upstream where |x| <= 1, else zero."""
    if x.values.shape != upstream_grad.values.shape:
        raise ValueError("sign_bwd: dim mismatch")
    return RealPlane(upstream_grad.values * _clip_mask(x.values))


def design_fwd(xs: RealPlane | IntPlane, t: TiledThreshold) -> BitPlane:
    """Sign of (input - tiled threshold)."""
    if xs.values.shape != t.tiled.shape:
        raise ValueError("design_fwd: threshold dims do not match input")
    return pack(_sign_array(xs.values - t.tiled))


def design_bwd(xs: RealPlane, t: TiledThreshold, upstream_grad: RealPlane) -> RealPlane:
    """STE through the shifted Sign; the threshold gets no gradient."""
    if xs.values.shape != t.tiled.shape:
        raise ValueError("design_bwd: threshold dims do not match input")
    shifted = RealPlane(xs.values - t.tiled)
    return sign_bwd(shifted, upstream_grad)

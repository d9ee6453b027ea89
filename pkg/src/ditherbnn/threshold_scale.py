"""Map integer threshold levels to real values on batch-normalized data.

The positive half of a standard normal is quantized into N clusters with
K-means; each integer level is replaced by the left-side boundary of its
cluster, so the lowest level maps to 0 and behaves like a plain Sign.
Also provides the per-channel 3D kernel generators (circular shift and
complement) and gamma re-scaling for learned batch-norm scales.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .threshold_design import LevelSet, ThresholdKernel

KMEANS_TOL = 1e-10
KMEANS_MAX_ITER = 10_000
KMEANS_RESTARTS = 10


@dataclass(frozen=True)
class QuantizerLevels:
    """Cluster centers on the half-Gaussian and their left-side boundaries."""

    centers: np.ndarray
    boundaries: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        b = np.asarray(self.boundaries, dtype=np.float64)
        if np.any(np.diff(c) <= 0) or np.any(np.diff(b) <= 0):
            raise ValueError("centers and boundaries must be strictly increasing")
        if b[0] != 0.0 or len(b) != len(c):
            raise ValueError("boundaries must start at 0 and match centers")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "boundaries", b)

    @property
    def n(self) -> int:
        return len(self.centers)


def _lloyd_1d(sorted_x: np.ndarray, centers: np.ndarray):
    """Lloyd iterations on sorted 1D data; returns centers or None on an
    empty cluster."""
    n = len(centers)
    csum = np.concatenate([[0.0], np.cumsum(sorted_x)])
    for _ in range(KMEANS_MAX_ITER):
        cuts = (centers[:-1] + centers[1:]) / 2.0
        edges = np.searchsorted(sorted_x, cuts)
        lo = np.concatenate([[0], edges])
        hi = np.concatenate([edges, [len(sorted_x)]])
        counts = hi - lo
        if np.any(counts == 0):
            return None
        new = (csum[hi] - csum[lo]) / counts
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift < KMEANS_TOL:
            break
    return centers


def half_gaussian_kmeans(n: int, samples: int = 100_000, seed: int = 0) -> QuantizerLevels:
    """K-means quantizer of |z|, z ~ N(0,1), with n clusters.

    Samples are drawn by inverse CDF over jittered uniform strata, which
    keeps the Monte Carlo error of the cluster boundaries well below 1e-3
    at the default sample count.
    """
    if n < 2:
        raise ValueError("need at least 2 clusters")
    if samples < 10 * n:
        raise ValueError("need at least 10 samples per cluster")
    rng = np.random.default_rng(seed)
    u = (np.arange(samples) + rng.random(samples)) / samples
    inv_cdf = NormalDist().inv_cdf
    # |z| for z ~ N(0,1) has CDF 2*Phi(x) - 1; u is already sorted
    x = np.array([inv_cdf(0.5 + 0.5 * ui) for ui in u])
    for _ in range(KMEANS_RESTARTS):
        init = np.sort(rng.choice(x, size=n, replace=False))
        if np.any(np.diff(init) == 0):
            continue
        centers = _lloyd_1d(x, init)
        if centers is not None:
            boundaries = np.concatenate([[0.0], (centers[:-1] + centers[1:]) / 2.0])
            return QuantizerLevels(centers=centers, boundaries=boundaries)
    raise RuntimeError(f"k-means failed to keep {n} non-empty clusters")


@dataclass(frozen=True)
class ScaledThresholdKernel:
    """Real-valued d x d thresholds derived from an integer-level kernel."""

    entries: np.ndarray
    source_levels: ThresholdKernel

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.shape != self.source_levels.entries.shape:
            raise ValueError("scaled entries must match the source kernel shape")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def d(self) -> int:
        return self.entries.shape[0]


def scale_kernel(t: ThresholdKernel, q: QuantizerLevels,
                 levels: LevelSet) -> ScaledThresholdKernel:
    """Replace each integer level with the left-side boundary of its cluster."""
    if q.n != levels.n:
        raise ValueError(f"quantizer has {q.n} clusters, level set has {levels.n}")
    idx = np.vectorize(levels.index)(t.entries)
    return ScaledThresholdKernel(entries=q.boundaries[idx], source_levels=t)


def gamma_rescale(ts: ScaledThresholdKernel, gamma: float) -> ScaledThresholdKernel:
    """Multiply thresholds by a channel's batch-norm scale gamma."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return ScaledThresholdKernel(entries=ts.entries * gamma,
                                 source_levels=ts.source_levels)


def complement_kernel(t: ThresholdKernel) -> ThresholdKernel:
    """Pair each level with its mirror: 1-indexed level kappa -> N-(kappa-1)."""
    levels = np.array(t.levels.levels)
    idx = t.level_indices()  # 0-indexed
    comp_idx = (t.levels.n - 1) - idx
    return ThresholdKernel(levels[comp_idx], t.levels)


def shift_kernel(t: ThresholdKernel, steps: int) -> ThresholdKernel:
    """Circularly shift each entry's level index within the sorted level set."""
    levels = np.array(t.levels.levels)
    idx = (t.level_indices() + steps) % t.levels.n
    return ThresholdKernel(levels[idx], t.levels)


def make_3d(t: ThresholdKernel, channels: int, mode: str,
            levels: LevelSet | None = None) -> list[ThresholdKernel]:
    """Per-channel kernels: circular index shift or alternating complement."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    if mode == "shift":
        return [shift_kernel(t, c) for c in range(channels)]
    if mode == "complement":
        comp = complement_kernel(t)
        return [t if c % 2 == 0 else comp for c in range(channels)]
    raise ValueError(f"unknown 3D mode {mode!r}")


def kernel_to_json(t: ThresholdKernel, scaled=None, mode: str = "2d",
                   channels: int = 1, q: QuantizerLevels | None = None) -> dict:
    """JSON document for the design-to-trainer handoff.

    `scaled` is a ScaledThresholdKernel or a per-channel list of them;
    `level_thresholds` carries the full level -> real-threshold map so a
    trainer can regenerate per-channel kernels for any channel count.
    """
    doc = {
        "k": t.levels.k,
        "d": t.d,
        "levels": list(t.levels.levels),
        "entries": t.entries.tolist(),
        "scaled_entries": None,
        "mode": mode,
        "channels": channels,
    }
    if scaled is not None:
        if isinstance(scaled, ScaledThresholdKernel):
            doc["scaled_entries"] = scaled.entries.tolist()
        else:
            doc["scaled_entries"] = [s.entries.tolist() for s in scaled]
    if q is not None:
        doc["level_thresholds"] = q.boundaries.tolist()
    return doc


def save_kernel_json(path, **kwargs) -> None:
    with open(path, "w") as fh:
        json.dump(kernel_to_json(**kwargs), fh, indent=2)
        fh.write("\n")


def load_kernel_json(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("k", "d", "levels", "entries"):
        if key not in doc:
            raise ValueError(f"kernel file missing field {key!r}")
    return doc


def kernel_from_doc(doc: dict) -> ThresholdKernel:
    levels = LevelSet(k=doc["k"], levels=tuple(doc["levels"]))
    return ThresholdKernel(np.array(doc["entries"]), levels)

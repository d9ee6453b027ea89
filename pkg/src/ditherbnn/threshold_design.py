"""Brute-force threshold kernel search by expected total variation.

Every candidate d x d kernel over the level set is scored by the mean TV of
the binarized-then-rectified convolution outputs of a corpus; candidates are
ranked descending. Convolutions are cached once per (image, kernel) pair;
all candidates reuse the cache.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .activation import tile
from .bitconv import BinaryKernel, conv_packed, conv_range
from .planes import IntPlane

ENUMERATION_GUARD = 10**7

# Shipped default: the 2x2 tile used when the search step is skipped.
DEFAULT_KERNEL_ENTRIES = np.array([[1, 1], [3, 3]])


@dataclass(frozen=True)
class LevelSet:
    """Ordered candidate threshold levels for a given conv kernel size."""

    k: int
    levels: tuple

    def __post_init__(self):
        if list(self.levels) != sorted(set(self.levels)):
            raise ValueError("levels must be strictly increasing")

    @property
    def n(self) -> int:
        return len(self.levels)

    def index(self, level: int) -> int:
        try:
            return self.levels.index(level)
        except ValueError:
            raise ValueError(f"level {level} not in {self.levels}") from None


def build_levels(k: int) -> LevelSet:
    """Non-negative attainable conv outputs, with 0 prepended for odd k.

    k=3 gives (0, 1, 3, 5, 7, 9); k=2 gives (0, 2, 4).
    """
    nonneg = [v for v in conv_range(k) if v >= 0]
    if k % 2 == 1:
        nonneg = [0] + nonneg
    return LevelSet(k=k, levels=tuple(nonneg))


@dataclass(frozen=True)
class ThresholdKernel:
    """d x d integer kernel with entries drawn from a LevelSet."""

    entries: np.ndarray
    levels: LevelSet

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.int64)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError("entries must be a square 2D array")
        if not np.all(np.isin(e, self.levels.levels)):
            raise ValueError(f"entries must lie in {self.levels.levels}")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    def level_indices(self) -> np.ndarray:
        lut = {lv: i for i, lv in enumerate(self.levels.levels)}
        return np.vectorize(lut.__getitem__)(self.entries)


def enumerate_kernels(levels: LevelSet, d: int) -> Iterator[ThresholdKernel]:
    """All N^(d^2) kernels in lexicographic entry order."""
    count = levels.n ** (d * d)
    if count > ENUMERATION_GUARD:
        raise ValueError(
            f"refusing to enumerate {count} candidates (> {ENUMERATION_GUARD})"
        )
    for combo in itertools.product(levels.levels, repeat=d * d):
        yield ThresholdKernel(np.array(combo).reshape(d, d), levels)


def tv_score(plane: IntPlane | np.ndarray) -> int:
    """Anisotropic l1 total variation of a {0,1} plane."""
    v = plane.values if isinstance(plane, IntPlane) else np.asarray(plane)
    if not np.all(np.isin(v, (0, 1))):
        raise ValueError("tv_score expects a {0,1} plane")
    return int(np.abs(np.diff(v, axis=0)).sum() + np.abs(np.diff(v, axis=1)).sum())


@dataclass(frozen=True)
class ConvCache:
    """Stacked integer conv outputs X_c for a corpus, one plane per pair."""

    planes: np.ndarray  # (n_pairs, H, W) int32

    def __post_init__(self):
        p = np.asarray(self.planes, dtype=np.int32)
        if p.ndim != 3 or p.shape[0] == 0:
            raise ValueError("cache must hold at least one plane")
        object.__setattr__(self, "planes", p)

    @property
    def n_pairs(self) -> int:
        return self.planes.shape[0]

    @classmethod
    def from_planes(cls, planes: Sequence[IntPlane]) -> "ConvCache":
        return cls(np.stack([p.values for p in planes]))


def score_candidate(t: ThresholdKernel, cache: ConvCache) -> float:
    """Mean TV of ReLU(shifted-sign(X_c)) over the cached corpus.

    With the sign(0)=+1 tie rule the rectified output is 1 exactly where
    X_c >= tiled threshold.
    """
    _, H, W = cache.planes.shape
    tiled = tile(t.entries, H, W)
    b = cache.planes >= tiled  # bool (P, H, W)
    total = int((b[:, 1:, :] ^ b[:, :-1, :]).sum())
    total += int((b[:, :, 1:] ^ b[:, :, :-1]).sum())
    return total / cache.n_pairs


class PhasePairCounts:
    """Exact TV decomposition by tile phase and threshold-level pair.

    TV of a tiled-threshold binarization only depends, per adjacent pixel
    pair, on the two levels assigned to the pair's tile phases. Counting
    sign changes once per (phase, level pair) makes scoring each candidate
    a handful of table lookups instead of a pass over the corpus.
    """

    def __init__(self, cache: ConvCache, levels: LevelSet, d: int):
        self.levels = levels
        self.d = d
        self.n_pairs = cache.n_pairs
        N = levels.n
        thr = [cache.planes >= lv for lv in levels.levels]
        self.h_counts = np.zeros((d, d, N, N), dtype=np.int64)
        self.v_counts = np.zeros((d, d, N, N), dtype=np.int64)
        for a in range(N):
            for b in range(N):
                dh = thr[a][:, :, :-1] ^ thr[b][:, :, 1:]
                dv = thr[a][:, :-1, :] ^ thr[b][:, 1:, :]
                for r in range(d):
                    for c in range(d):
                        self.h_counts[r, c, a, b] = dh[:, r::d, c::d].sum()
                        self.v_counts[r, c, a, b] = dv[:, r::d, c::d].sum()

    def score(self, t: ThresholdKernel) -> float:
        idx = t.level_indices()
        d = self.d
        total = 0
        for r in range(d):
            for c in range(d):
                total += self.h_counts[r, c, idx[r, c], idx[r, (c + 1) % d]]
                total += self.v_counts[r, c, idx[r, c], idx[(r + 1) % d, c]]
        return total / self.n_pairs


@dataclass(frozen=True)
class ScoredKernel:
    kernel: ThresholdKernel
    score: float
    rank: int


@dataclass(frozen=True)
class TVScoreTable:
    candidates: tuple

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def best(self) -> ScoredKernel:
        return self.candidates[0]

    def top(self, n: int) -> tuple:
        return self.candidates[:n]

    def to_csv(self, path) -> None:
        d = self.candidates[0].kernel.d
        header = ["rank", "score"] + [f"t{r}{c}" for r in range(d) for c in range(d)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for sc in self.candidates:
                row = [sc.rank, f"{sc.score:.6f}"]
                row += [int(v) for v in sc.kernel.entries.ravel()]
                writer.writerow(row)


def rank_candidates(levels: LevelSet, d: int, counts: PhasePairCounts) -> TVScoreTable:
    scored = [(counts.score(t), t) for t in enumerate_kernels(levels, d)]
    # descending score; ties broken by lexicographic kernel order (stable:
    # enumeration is already lexicographic)
    scored.sort(key=lambda st: -st[0])
    ranked = tuple(
        ScoredKernel(kernel=t, score=s, rank=i) for i, (s, t) in enumerate(scored)
    )
    return TVScoreTable(ranked)


def build_cache(images, stats, k: int, n_kernels: int, seed: int) -> ConvCache:
    """Binarize each image, draw random binary kernels, conv once per pair.

    Kernels are i.i.d. uniform over {-1,+1}^(k x k); each kernel convolves
    one image channel, assigned round-robin.
    """
    from .dataio import binarize_for_search  # local import: dataio uses planes only

    rng = np.random.default_rng(seed)
    planes = []
    for img in images:
        chans = binarize_for_search(img, stats)
        for i in range(n_kernels):
            kern = BinaryKernel.from_array(rng.choice([-1, 1], size=(k, k)))
            planes.append(conv_packed(chans[i % len(chans)], kern))
    return ConvCache.from_planes(planes)


def search(images, stats, k: int = 3, d: int = 2, n_kernels: int = 8,
           seed: int = 0) -> TVScoreTable:
    """Score every candidate kernel over a corpus and return the full ranking."""
    if not images:
        raise ValueError("search needs a non-empty corpus")
    levels = build_levels(k)
    cache = build_cache(images, stats, k, n_kernels, seed)
    counts = PhasePairCounts(cache, levels, d)
    return rank_candidates(levels, d, counts)

"""Dataset ingestion and preparation.

Reads the CIFAR-10 binary batch format (3073-byte records: 1 label byte,
then 3072 pixel bytes as R, G, B planes row-major). Converted datasets in
the same record format are accepted from a directory holding train.bin,
test.bin and a metadata.json with {num_classes, height, width, channels}.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .activation import _sign_array
from .planes import BitPlane, pack


@dataclass(frozen=True)
class LabeledImage:
    label: int
    channels: np.ndarray  # (C, H, W) float32 in [0, 1]

    def __post_init__(self):
        c = np.asarray(self.channels, dtype=np.float32)
        if c.ndim != 3:
            raise ValueError("channels must be (C, H, W)")
        object.__setattr__(self, "channels", c)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class DataSplit:
    train: list
    test: list
    stats: ChannelStats = field(default=None)
    num_classes: int = 10

    def __post_init__(self):
        if self.stats is None:
            object.__setattr__(self, "stats", compute_stats(self.train))


def compute_stats(images) -> ChannelStats:
    """Per-channel mean/std over a list of images (train split only)."""
    stacked = np.stack([img.channels for img in images])  # (N, C, H, W)
    return ChannelStats(mean=stacked.mean(axis=(0, 2, 3)),
                        std=stacked.std(axis=(0, 2, 3)))


def _parse_records(raw: bytes, h: int, w: int, c: int, num_classes: int):
    rec = 1 + c * h * w
    if len(raw) % rec != 0:
        raise ValueError(f"truncated file: {len(raw)} bytes is not a multiple of {rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0]
    if np.any(labels >= num_classes):
        raise ValueError(f"label out of range (max {num_classes - 1})")
    pixels = arr[:, 1:].reshape(-1, c, h, w).astype(np.float32) / 255.0
    return [LabeledImage(int(l), p) for l, p in zip(labels, pixels)]


def load_cifar10(directory) -> DataSplit:
    """Load CIFAR-10 binary batches, or a converted same-format directory."""
    directory = os.fspath(directory)
    meta_path = os.path.join(directory, "metadata.json")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        h, w, c = meta["height"], meta["width"], meta["channels"]
        ncls = meta["num_classes"]
        train_files = [os.path.join(directory, "train.bin")]
        test_file = os.path.join(directory, "test.bin")
    else:
        h, w, c, ncls = 32, 32, 3, 10
        train_files = [os.path.join(directory, f"data_batch_{i}.bin")
                       for i in range(1, 6)]
        test_file = os.path.join(directory, "test_batch.bin")
    train = []
    for path in train_files:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        with open(path, "rb") as fh:
            train.extend(_parse_records(fh.read(), h, w, c, ncls))
    with open(test_file, "rb") as fh:
        test = _parse_records(fh.read(), h, w, c, ncls)
    return DataSplit(train=train, test=test, num_classes=ncls)


def save_records(images, path) -> None:
    """Write images in the CIFAR-10 binary record layout."""
    with open(path, "wb") as fh:
        for img in images:
            pix = np.clip(np.round(img.channels * 255.0), 0, 255).astype(np.uint8)
            fh.write(bytes([img.label]) + pix.tobytes())


def save_converted(split: DataSplit, directory) -> None:
    """Write a DataSplit as a converted-format directory with metadata."""
    os.makedirs(directory, exist_ok=True)
    c, h, w = split.train[0].channels.shape
    meta = {"num_classes": split.num_classes, "height": h, "width": w,
            "channels": c}
    with open(os.path.join(directory, "metadata.json"), "w") as fh:
        json.dump(meta, fh)
    save_records(split.train, os.path.join(directory, "train.bin"))
    save_records(split.test, os.path.join(directory, "test.bin"))


def binarize_for_search(img: LabeledImage, stats: ChannelStats) -> list[BitPlane]:
    """Standardize each channel with train stats, then take the sign."""
    out = []
    for c in range(img.channels.shape[0]):
        std = max(float(stats.std[c]), 1e-8)
        z = (img.channels[c].astype(np.float64) - float(stats.mean[c])) / std
        out.append(pack(_sign_array(z)))
    return out


def subset(split: DataSplit, n_per_class: int, seed: int = 0) -> DataSplit:
    """Class-balanced, seeded train subset; test split kept as is."""
    rng = np.random.default_rng(seed)
    by_class = {}
    for i, img in enumerate(split.train):
        by_class.setdefault(img.label, []).append(i)
    chosen = []
    for label in sorted(by_class):
        idxs = by_class[label]
        if len(idxs) < n_per_class:
            raise ValueError(f"class {label} has only {len(idxs)} samples")
        chosen.extend(rng.choice(idxs, size=n_per_class, replace=False))
    train = [split.train[i] for i in sorted(chosen)]
    return DataSplit(train=train, test=split.test, num_classes=split.num_classes)


def synth_dataset(n: int, classes: int = 2, seed: int = 0, size: int = 32,
                  noise: float = 0.15) -> DataSplit:
    """Class-conditioned oriented-stripe images, learnable by a small CNN.

    Generates n train and n // 4 (at least `classes`) test images; class c
    gets stripes at angle pi * c / classes plus pixel noise.
    """
    if n < classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)

    def make(count):
        imgs = []
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
        for i in range(count):
            label = i % classes
            theta = np.pi * label / classes
            freq = 0.35 + 0.1 * rng.random()
            phase = rng.random() * 2 * np.pi
            wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) * 2 + phase)
            chans = []
            for c in range(3):
                gain = 0.35 + 0.1 * c / 3
                img = 0.5 + gain * wave + noise * rng.standard_normal((size, size))
                chans.append(img)
            imgs.append(LabeledImage(label, np.clip(np.stack(chans), 0, 1)))
        return imgs

    return DataSplit(train=make(n), test=make(max(classes, n // 4)),
                     num_classes=classes)

"""Dataset IO: record format, converted dirs, subsets, synthetic corpus."""

import numpy as np
import pytest

from ditherbnn import dataio
from ditherbnn.planes import unpack


def test_record_layout_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = [dataio.LabeledImage(i % 3, rng.random((3, 8, 8), dtype=np.float32))
            for i in range(5)]
    path = tmp_path / "batch.bin"
    dataio.save_records(imgs, path)
    raw = path.read_bytes()
    assert len(raw) == 5 * (1 + 3 * 8 * 8)
    back = dataio._parse_records(raw, 8, 8, 3, 3)
    for a, b in zip(imgs, back):
        assert a.label == b.label
        # quantized to 1/255 steps on the way out
        np.testing.assert_allclose(a.channels, b.channels, atol=0.5 / 255)


def test_parse_rejects_truncated_and_bad_labels():
    with pytest.raises(ValueError):
        dataio._parse_records(b"\x00" * 10, 8, 8, 3, 3)
    rec = bytes([7]) + b"\x00" * (3 * 4 * 4)
    with pytest.raises(ValueError):
        dataio._parse_records(rec, 4, 4, 3, 3)


def test_converted_dir_roundtrip(tmp_path):
    split = dataio.synth_dataset(12, classes=3, seed=1, size=16)
    dataio.save_converted(split, tmp_path / "ds")
    back = dataio.load_cifar10(tmp_path / "ds")
    assert back.num_classes == 3
    assert len(back.train) == len(split.train)
    assert len(back.test) == len(split.test)
    assert [i.label for i in back.train] == [i.label for i in split.train]
    np.testing.assert_allclose(back.train[0].channels, split.train[0].channels,
                               atol=0.5 / 255)


def test_cifar_batch_layout(tmp_path):
    # five train files plus a test file, 3073-byte records
    rng = np.random.default_rng(2)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        imgs = [dataio.LabeledImage(int(rng.integers(10)),
                                    rng.random((3, 32, 32), dtype=np.float32))
                for _ in range(4)]
        dataio.save_records(imgs, tmp_path / name)
    split = dataio.load_cifar10(tmp_path)
    assert len(split.train) == 20 and len(split.test) == 4
    assert split.train[0].channels.shape == (3, 32, 32)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        dataio.load_cifar10(tmp_path)


def test_stats_computed_from_train_only():
    split = dataio.synth_dataset(16, classes=2, seed=3, size=16)
    stacked = np.stack([img.channels for img in split.train])
    np.testing.assert_allclose(split.stats.mean, stacked.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(split.stats.std, stacked.std(axis=(0, 2, 3)))


def test_binarize_for_search_sign_oracle():
    split = dataio.synth_dataset(8, classes=2, seed=4, size=16)
    img = split.train[0]
    planes = dataio.binarize_for_search(img, split.stats)
    assert len(planes) == 3
    for c, bp in enumerate(planes):
        z = (img.channels[c] - split.stats.mean[c]) / max(split.stats.std[c], 1e-8)
        np.testing.assert_array_equal(unpack(bp).values, np.where(z >= 0, 1, -1))


def test_subset_balance_and_determinism():
    split = dataio.synth_dataset(40, classes=4, seed=5, size=16)
    sub1 = dataio.subset(split, 3, seed=7)
    sub2 = dataio.subset(split, 3, seed=7)
    labels = [img.label for img in sub1.train]
    assert len(labels) == 12
    for c in range(4):
        assert labels.count(c) == 3
    assert [i.label for i in sub2.train] == labels
    a1 = np.stack([i.channels for i in sub1.train])
    a2 = np.stack([i.channels for i in sub2.train])
    np.testing.assert_array_equal(a1, a2)
    # different seed draws a different subset (with overwhelming probability)
    sub3 = dataio.subset(split, 3, seed=8)
    a3 = np.stack([i.channels for i in sub3.train])
    assert not np.array_equal(a1, a3)


def test_subset_insufficient_class():
    split = dataio.synth_dataset(8, classes=4, seed=6, size=16)
    with pytest.raises(ValueError):
        dataio.subset(split, 100)


def test_synth_dataset_shapes_and_labels():
    split = dataio.synth_dataset(10, classes=5, seed=0, size=24)
    assert len(split.train) == 10
    assert len(split.test) == max(5, 10 // 4)
    assert split.num_classes == 5
    assert {img.label for img in split.train} == set(range(5))
    for img in split.train:
        assert img.channels.shape == (3, 24, 24)
        assert img.channels.min() >= 0.0 and img.channels.max() <= 1.0
    with pytest.raises(ValueError):
        dataio.synth_dataset(2, classes=5)

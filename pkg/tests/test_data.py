import json
import struct

import numpy as np
import pytest

from frameprompt import data as D
from frameprompt.errors import BadMagicError, DataError, TruncatedFileError


def idx_bytes(images=None, labels=None):
    if images is not None:
        n, h, w = images.shape
        return struct.pack(">iiii", 0x00000803, n, h, w) + images.tobytes()
    n = labels.shape[0]
    return struct.pack(">ii", 0x00000801, n) + labels.tobytes()


def test_load_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(7, 28, 28), dtype=np.uint8)
    imgs[0, 0, 0] = 255
    imgs[0, 0, 1] = 0
    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    ip = tmp_path / "img.idx"
    lp = tmp_path / "lab.idx"
    ip.write_bytes(idx_bytes(images=imgs))
    lp.write_bytes(idx_bytes(labels=labels))
    ds = D.load_idx(str(ip), str(lp), "digits")
    assert ds.images.shape == (7, 3, 28, 28)
    assert ds.images[0, 0, 0, 0] == 1.0  # byte 255 maps exactly to 1.0
    assert ds.images[0, 1, 0, 0] == 1.0  # grayscale replicated per channel
    assert ds.images[0, 2, 0, 1] == 0.0
    assert np.array_equal(ds.labels, labels.astype(np.int64))
    assert ds.id == "digits"


def test_load_idx_error_taxonomy(tmp_path):
    good = idx_bytes(images=np.zeros((2, 4, 4), dtype=np.uint8))
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x09\x03" + good[4:])
    lab = tmp_path / "lab.idx"
    lab.write_bytes(idx_bytes(labels=np.zeros(2, dtype=np.uint8)))
    with pytest.raises(BadMagicError):
        D.load_idx(str(bad), str(lab), "x")
    short = tmp_path / "short.idx"
    short.write_bytes(good[:-5])
    with pytest.raises(TruncatedFileError):
        D.load_idx(str(short), str(lab), "x")
    img = tmp_path / "img.idx"
    img.write_bytes(good)
    lab3 = tmp_path / "lab3.idx"
    lab3.write_bytes(idx_bytes(labels=np.zeros(3, dtype=np.uint8)))
    with pytest.raises(DataError):
        D.load_idx(str(img), str(lab3), "x")


def test_modemix_shapes_and_labels():
    spec = D.SyntheticSpec(modes=3, classes_per_mode=2, samples_per_class=4,
                           jitter=0.05, seed=1)
    ds = D.generate_modemix(spec)
    assert ds.images.shape == (24, 3, 32, 32)
    assert ds.class_count == 6
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    # mode-major labels: first block is mode 0 class 0
    assert list(ds.labels[:4]) == [0] * 4
    assert list(ds.labels[4:8]) == [1] * 4
    assert sorted(set(ds.labels)) == list(range(6))


def test_modemix_deterministic_and_jitter_zero_degenerates():
    spec = D.SyntheticSpec(modes=2, classes_per_mode=2, samples_per_class=3,
                           jitter=0.0, seed=2)
    a = D.generate_modemix(spec)
    b = D.generate_modemix(spec)
    assert np.array_equal(a.images, b.images)
    for cls in range(4):
        block = a.images[a.labels == cls]
        assert np.array_equal(block[0], block[1])
        assert np.array_equal(block[0], block[2])
    jittered = D.generate_modemix(D.SyntheticSpec(2, 2, 3, jitter=0.05, seed=2))
    assert not np.array_equal(a.images, jittered.images)


def test_modemix_validation():
    with pytest.raises(DataError):
        D.generate_modemix(D.SyntheticSpec(0, 2, 2))
    with pytest.raises(DataError):
        D.generate_modemix(D.SyntheticSpec(9, 2, 2))
    with pytest.raises(DataError):
        D.generate_modemix(D.SyntheticSpec(2, 2, 2, jitter=-0.1))


def test_split_is_stratified_and_standardized():
    ds = D.generate_modemix(D.SyntheticSpec(2, 2, 30, jitter=0.05, seed=3))
    train, val, test = D.split_dataset(ds, (0.7, 0.15, 0.15), seed=4)
    assert len(train) + len(val) + len(test) == len(ds)
    for part, frac in ((train, 0.7), (val, 0.15), (test, 0.15)):
        for cls in range(4):
            got = int((part.labels == cls).sum())
            assert abs(got - frac * 30) <= 1  # proportions within one sample
    # statistics come from train and are shared
    assert np.allclose(train.images.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    assert np.allclose(train.images.std(axis=(0, 2, 3)), 1.0, atol=1e-9)
    assert np.array_equal(train.mean, val.mean)
    assert np.array_equal(train.std, test.std)
    assert abs(float(val.images.mean())) > 1e-12  # val uses train stats, not its own


def test_split_deterministic_and_disjoint():
    ds = D.generate_modemix(D.SyntheticSpec(1, 3, 12, jitter=0.03, seed=5))
    a = D.split_dataset(ds, (0.5, 0.25, 0.25), seed=6)
    b = D.split_dataset(ds, (0.5, 0.25, 0.25), seed=6)
    c = D.split_dataset(ds, (0.5, 0.25, 0.25), seed=7)
    for x, y in zip(a, b):
        assert np.array_equal(x.images, y.images)
    assert not np.array_equal(a[0].images, c[0].images)
    # destandardized rows must reappear in the source set exactly once
    raw = a[0].destandardize()
    matches = 0
    for row in raw.images:
        matches += int(np.any(np.all(np.isclose(ds.images, row, atol=1e-12),
                                     axis=(1, 2, 3))))
    assert matches == len(raw)


def test_split_zero_fraction_and_errors():
    ds = D.generate_modemix(D.SyntheticSpec(1, 2, 10, jitter=0.02, seed=8))
    train, val, test = D.split_dataset(ds, (1.0, 0.0, 0.0), seed=0)
    assert len(train) == 20 and len(val) == 0 and len(test) == 0
    with pytest.raises(DataError):
        D.split_dataset(ds, (0.5, 0.5, 0.5), seed=0)
    with pytest.raises(DataError):
        D.split_dataset(ds, (1.2, -0.2, 0.0), seed=0)
    tiny = D.ImageDataset("tiny", np.zeros((2, 3, 4, 4)), np.array([0, 0]), 1)
    with pytest.raises(DataError):
        D.split_dataset(tiny, (0.5, 0.25, 0.25), seed=0)


def test_standardize_destandardize_identity():
    ds = D.generate_modemix(D.SyntheticSpec(2, 1, 8, jitter=0.05, seed=9))
    mean, std = ds.channel_stats()
    back = ds.standardize(mean, std).destandardize()
    assert np.abs(back.images - ds.images).max() < 1e-12
    with pytest.raises(DataError):
        ds.destandardize()
    std_ds = ds.standardize(mean, std)
    with pytest.raises(DataError):
        std_ds.standardize(mean, std)


def test_descriptor_loading(tmp_path):
    desc = tmp_path / "d.json"
    desc.write_text(json.dumps({"kind": "synthetic", "modes": 2,
                                "classes_per_mode": 1, "samples_per_class": 5,
                                "jitter": 0.01, "seed": 3, "id": "demo"}))
    ds = D.load_descriptor(str(desc))
    assert ds.id == "demo"
    assert len(ds) == 10
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(DataError) as e:
        D.load_descriptor(str(bad))
    assert "line 1" in str(e.value)
    unk = tmp_path / "unk.json"
    unk.write_text('{"kind": "parquet"}')
    with pytest.raises(DataError):
        D.load_descriptor(str(unk))

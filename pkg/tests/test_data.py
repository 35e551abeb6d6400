import numpy as np
import pytest

from r2b.data import (DatasetFormatError, augment, augment_batch, hflip, load_cifar, load_dataset,
                      read_cifar_file, save_dataset, split_synthetic, synthetic_dataset)


def write_batch(path, labels, label_bytes=1, seed=0):
    r = np.random.default_rng(seed)
    recs = []
    images = r.integers(0, 256, (len(labels), 3072), dtype=np.uint8)
    for lab, img in zip(labels, images):
        head = bytes([0] * (label_bytes - 1) + [lab])
        recs.append(head + img.tobytes())
    path.write_bytes(b"".join(recs))
    return images.reshape(-1, 3, 32, 32)


def test_read_cifar_file(tmp_path):
    images = write_batch(tmp_path / "b.bin", [3, 7, 1])
    x, y = read_cifar_file(tmp_path / "b.bin", 1)
    assert y.tolist() == [3, 7, 1]
    np.testing.assert_array_equal(x, images)


def test_cifar100_uses_fine_label(tmp_path):
    write_batch(tmp_path / "c.bin", [42, 99], label_bytes=2)
    _, y = read_cifar_file(tmp_path / "c.bin", 2)
    assert y.tolist() == [42, 99]


def test_truncated_file_reports_offset(tmp_path):
    write_batch(tmp_path / "b.bin", [1, 2])
    raw = (tmp_path / "b.bin").read_bytes()
    (tmp_path / "b.bin").write_bytes(raw[:-10])
    with pytest.raises(DatasetFormatError, match="byte offset 3073"):
        read_cifar_file(tmp_path / "b.bin", 1)


def test_load_cifar10_layout_and_standardization(tmp_path):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    for i in range(1, 6):
        write_batch(d / f"data_batch_{i}.bin", [i % 10, (i + 3) % 10], seed=i)
    write_batch(d / "test_batch.bin", [0, 9], seed=9)
    tr, te = load_cifar(tmp_path, "cifar10")
    assert tr.images.shape == (10, 3, 32, 32) and len(te) == 2 and tr.class_count == 10
    np.testing.assert_allclose(tr.images.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(tr.images.std(axis=(0, 2, 3)), 1, atol=1e-4)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar(tmp_path, "cifar10")


def test_augment_pinned_choices(rng):
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    same = augment(x, rng, flip=False, angle=0.0, crop=(4, 4))
    np.testing.assert_array_equal(same, x)
    flipped = augment(x, rng, flip=True, angle=0.0, crop=(4, 4))
    np.testing.assert_array_equal(flipped, hflip(x))
    shifted = augment(x, rng, flip=False, angle=0.0, crop=(4, 5))
    np.testing.assert_array_equal(shifted[:, :, :-1], x[:, :, 1:])


def test_augment_rotation_keeps_shape_and_centre(rng):
    x = np.zeros((1, 9, 9), dtype=np.float32)
    x[0, 4, 4] = 1.0
    out = augment(x, rng, flip=False, angle=15.0, crop=(4, 4))
    assert out.shape == x.shape and out[0, 4, 4] == pytest.approx(1.0, abs=1e-6)


def test_augment_batch_reproducible(rng):
    x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
    a = augment_batch(x, np.arange(4), 1, 2, "cifar-train")
    b = augment_batch(x, np.arange(4), 1, 2, "cifar-train")
    c = augment_batch(x, np.arange(4), 1, 3, "cifar-train")
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert augment_batch(x, np.arange(4), 1, 2, "eval") is x


def test_synthetic_deterministic_and_balanced():
    a, b = synthetic_dataset(3, 4, 100), synthetic_dataset(3, 4, 100)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [25] * 4
    tr, te = split_synthetic(3, 4, 80, 20)
    assert len(tr) == 80 and len(te) == 20


def test_dataset_save_load(tmp_path):
    tr, _ = split_synthetic(0, 3, 12, 3, image_shape=(3, 4, 4))
    save_dataset(tr, tmp_path / "d.r2b")
    back = load_dataset(tmp_path / "d.r2b")
    np.testing.assert_array_equal(back.images, tr.images)
    np.testing.assert_array_equal(back.labels, tr.labels)
    assert back.class_count == 3 and back.split == "train"

import logging

import numpy as np
import pytest

from lpae import data as D
from lpae.errors import FormatError


def _cifar_like(n, rng):
    images = rng.integers(0, 256, size=(n, 3, 32, 32)).astype(np.float32) / 255.0
    return D.Dataset(images, rng.integers(0, 10, size=n))


def test_cifar_record_roundtrip(tmp_path, rng):
    ds = _cifar_like(7, rng)
    D.write_cifar10_file(tmp_path / "data_batch_1.bin", ds)
    assert (tmp_path / "data_batch_1.bin").stat().st_size == 7 * 3073
    back = D.read_cifar10_file(tmp_path / "data_batch_1.bin")
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_allclose(back.images, ds.images, atol=1e-7)


def test_cifar_layout_is_label_then_planes(tmp_path):
    rec = np.zeros(3073, np.uint8)
    rec[0] = 4
    rec[1 + 1024 + 32 * 2 + 5] = 255  # green plane, row 2, column 5
    rec.tofile(tmp_path / "test_batch.bin")
    ds = D.read_cifar10_file(tmp_path / "test_batch.bin")
    assert ds.labels.tolist() == [4]
    assert ds.images[0, 1, 2, 5] == 1.0 and ds.images.sum() == 1.0


def test_load_cifar_limit_spans_files(tmp_path, rng):
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    D.write_cifar10_file(root / "data_batch_1.bin", _cifar_like(5, rng))
    D.write_cifar10_file(root / "data_batch_2.bin", _cifar_like(5, rng))
    D.write_cifar10_file(root / "test_batch.bin", _cifar_like(3, rng))
    assert len(D.load_cifar10(tmp_path, "train", limit=8)) == 8
    assert len(D.load_cifar10(root, "train")) == 10
    assert D.load_cifar10(root, "test").split == "test"


def test_truncated_cifar_file(tmp_path):
    (tmp_path / "data_batch_1.bin").write_bytes(b"\0" * 3000)
    with pytest.raises(FormatError):
        D.load_cifar10(tmp_path)
    with pytest.raises(FileNotFoundError):
        D.load_cifar10(tmp_path / "missing")


def test_image_roundtrip_and_folder(tmp_path, rng):
    img = np.round(rng.uniform(size=(3, 6, 6)) * 255) / 255
    for cls in ("b", "a"):
        (tmp_path / cls).mkdir()
        D.write_image(tmp_path / cls / "x.png", img)
    np.testing.assert_allclose(D.read_image(tmp_path / "a" / "x.png"), img, atol=1e-6)
    ds = D.load_image_folder(tmp_path, size=4)
    assert ds.images.shape == (2, 3, 4, 4) and ds.labels.tolist() == [0, 1]


def test_zca_whitened_covariance_oracle(rng):
    # whitened covariance must equal E diag(l / (l + eps)) E^T
    mix = rng.normal(size=(48, 48))
    x = (rng.normal(size=(600, 48)) @ mix).reshape(600, 3, 4, 4)
    stats = D.zca_fit(x, epsilon=0.1)
    white = D.zca_apply(stats, x, dtype=np.float64).reshape(600, -1)
    xc = x.reshape(600, -1) - x.reshape(600, -1).mean(axis=0)
    lam, vec = np.linalg.eigh(xc.T @ xc / 600)
    expect = (vec * (lam / (lam + 0.1))) @ vec.T
    np.testing.assert_allclose(white.T @ white / 600, expect, atol=1e-8)
    np.testing.assert_allclose(stats.matrix, stats.matrix.T)


def test_zca_block_mode_passes_detail_through(rng):
    x = rng.uniform(size=(200, 3, 8, 8))
    stats = D.zca_fit(x, epsilon=0.01, max_dim=48)
    assert stats.factor == 2 and stats.matrix.shape == (48, 48)
    out = D.zca_apply(stats, x, dtype=np.float64)
    coarse = x.reshape(200, 3, 4, 2, 4, 2).mean(axis=(3, 5))
    detail = x - coarse.repeat(2, 2).repeat(2, 3)
    white = ((coarse.reshape(200, -1) - stats.mean) @ stats.matrix).reshape(coarse.shape)
    np.testing.assert_allclose(out, white.repeat(2, 2).repeat(2, 3) + detail, atol=1e-10)


def test_zca_stats_roundtrip(rng):
    stats = D.zca_fit(rng.uniform(size=(60, 3, 4, 4)))
    back = D.ZCAStats.from_arrays(stats.to_arrays())
    np.testing.assert_array_equal(back.matrix, stats.matrix)
    assert back.epsilon == stats.epsilon and back.factor == 1
    assert D.ZCAStats.from_arrays({}) is None


def test_zca_warns_when_underdetermined(rng, caplog):
    with caplog.at_level(logging.WARNING, logger="lpae.data"):
        D.zca_fit(rng.uniform(size=(10, 3, 4, 4)))
    assert "10 images for 48 dimensions" in caplog.text


@pytest.mark.parametrize("kind", D.SYNTHETIC_KINDS)
def test_synthetic_is_deterministic(kind):
    a = D.synthetic_dataset(kind, 12, 16, seed=4)
    b = D.synthetic_dataset(kind, 12, 16, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (12, 3, 16, 16)
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_stripes_circles_is_balanced():
    ds = D.synthetic_dataset("stripes-circles", 101, 16, seed=0)
    assert abs(int(ds.labels.sum()) - 50) <= 1
    with pytest.raises(ValueError):
        D.synthetic_dataset("squares", 4)


@pytest.mark.parametrize("n, bs", [(10, 3), (12, 4), (5, 5)])
def test_batches_drop_the_short_tail(n, bs):
    ds = D.Dataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1).repeat(2, 2).repeat(2, 3))
    seen = [imgs[:, 0, 0, 0] for imgs, _ in D.batches(ds, bs, seed=1, epoch=2)]
    assert len(seen) == n // bs == D.num_batches(n, bs)
    flat = np.concatenate(seen)
    np.testing.assert_array_equal(flat, D.epoch_order(n, 1, 2)[:len(flat)])
    skipped = [imgs[:, 0, 0, 0] for imgs, _ in D.batches(ds, bs, seed=1, epoch=2, start=1)]
    assert len(skipped) == len(seen) - 1
    if skipped:
        np.testing.assert_array_equal(skipped[0], seen[1])


def test_epoch_orders_differ_across_epochs():
    assert not np.array_equal(D.epoch_order(50, 0, 0), D.epoch_order(50, 0, 1))


def test_dataset_validation():
    with pytest.raises(FormatError):
        D.Dataset(np.zeros((2, 3, 4, 5)))
    with pytest.raises(FormatError):
        D.Dataset(np.zeros((2, 3, 4, 4)), labels=[0])

import hashlib
import json
import os

import numpy as np
import pytest

from lstmpool.data import (
    POOL_REGIMES,
    DataFormatError,
    WhiteningTransform,
    batch_rng,
    fit_whitening,
    fit_whitening_cached,
    augment,
    gen_pool_batch,
    global_contrast_normalize,
    load_cifar_file,
    make_synthetic_cifar,
    write_cifar_file,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def test_loader_byte_exact_on_fixture():
    path = os.path.join(FIXTURES, "cifar_fixture.bin")
    with open(os.path.join(FIXTURES, "cifar_fixture.json")) as fh:
        meta = json.load(fh)
    with open(path, "rb") as fh:
        assert hashlib.sha256(fh.read()).hexdigest() == meta["sha256"]
    labels, images = load_cifar_file(path)
    assert len(labels) == meta["n"]
    for i, rec in enumerate(meta["records"]):
        assert labels[i] == rec["label"]
        assert images[i, 0, 0, 0] == rec["pixel_0_0_0"]
        assert images[i, 2, 31, 31] == rec["pixel_2_31_31"]
        assert images[i].sum() == rec["sum"]


def test_loader_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, size=7).astype(np.int64)
    images = rng.integers(0, 256, size=(7, 3, 32, 32)).astype(np.float32)
    path = tmp_path / "batch.bin"
    write_cifar_file(str(path), labels, images)
    l2, i2 = load_cifar_file(str(path))
    assert np.array_equal(labels, l2)
    assert np.array_equal(images, i2)


def test_loader_rejects_truncated_and_bad_labels(tmp_path):
    good = bytes([3]) + bytes(3072)
    p1 = tmp_path / "trunc.bin"
    p1.write_bytes(good[:-10])
    with pytest.raises(DataFormatError):
        load_cifar_file(str(p1))
    p2 = tmp_path / "badlabel.bin"
    p2.write_bytes(bytes([250]) + bytes(3072))
    with pytest.raises(DataFormatError):
        load_cifar_file(str(p2))


def test_gcn_zero_mean_unit_scale():
    rng = np.random.default_rng(1)
    images = rng.uniform(0, 255, size=(16, 3, 32, 32)).astype(np.float32)
    out = global_contrast_normalize(images)
    flat = out.reshape(16, -1)
    assert np.allclose(flat.mean(axis=1), 0.0, atol=1e-5)
    assert np.allclose(flat.std(axis=1), 1.0, atol=1e-3)


def test_gcn_constant_image_does_not_blow_up():
    images = np.full((1, 3, 32, 32), 128.0, dtype=np.float32)
    out = global_contrast_normalize(images)
    assert np.all(np.isfinite(out))


def test_whitening_decorrelates():
    rng = np.random.default_rng(2)
    # correlated synthetic "images"
    base = rng.normal(size=(400, 3 * 32 * 32)).astype(np.float32)
    mix = base + np.roll(base, 1, axis=1) * 0.9
    images = mix.reshape(400, 3, 32, 32)
    tr = fit_whitening(images, lam=0.1)
    white = tr.apply(images).reshape(400, -1)
    cov = np.cov(white, rowvar=False)
    off = np.abs(cov - np.diag(np.diag(cov)))
    assert off.mean() < 0.05


def test_whitening_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    images = rng.normal(size=(50, 3, 4, 4)).astype(np.float32)
    tr = fit_whitening(images, lam=0.1)
    path = tmp_path / "zca.bin"
    tr.save(str(path))
    tr2 = WhiteningTransform.load(str(path))
    assert np.array_equal(tr.apply(images), tr2.apply(images))


def test_whitening_cache_hits(tmp_path):
    rng = np.random.default_rng(4)
    images = rng.normal(size=(30, 3, 4, 4)).astype(np.float32)
    f = tmp_path / "train.bin"
    f.write_bytes(b"stand-in bytes")
    tr1 = fit_whitening_cached(images, [str(f)], 0.1, str(tmp_path / "cache"))
    # second call must load from disk (mutating the images proves it)
    tr2 = fit_whitening_cached(images * 0, [str(f)], 0.1, str(tmp_path / "cache"))
    assert np.array_equal(tr1.matrix, tr2.matrix)


def test_augment_shapes_flip_and_determinism():
    rng = np.random.default_rng(5)
    images = rng.normal(size=(8, 3, 32, 32)).astype(np.float32)
    out1 = augment(images, np.random.default_rng(7))
    out2 = augment(images, np.random.default_rng(7))
    assert out1.shape == images.shape
    assert np.array_equal(out1, out2)
    assert not np.array_equal(out1, augment(images, np.random.default_rng(8)))


def test_batch_rng_independent_streams():
    a = batch_rng(0, 1, 2).random(4)
    b = batch_rng(0, 1, 2).random(4)
    c = batch_rng(0, 1, 3).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("regime,frac", sorted(POOL_REGIMES.items()))
def test_regime_sparsity_over_many_batches(regime, frac):
    zeros, total = 0, 0
    for b in range(200):
        x, _ = gen_pool_batch(9, regime, 128, batch_rng(0, 0, b))
        zeros += int((x == 0).sum())
        total += x.size
    assert zeros / total == pytest.approx(frac, abs=0.02)


def test_gen_pool_batch_targets_and_range():
    x, y_max = gen_pool_batch(9, "T2", 64, batch_rng(1, 0, 0), "max")
    _, y_avg = gen_pool_batch(9, "T2", 64, batch_rng(1, 0, 0), "avg")
    assert x.min() >= 0.0 and x.max() <= 300.0
    assert np.allclose(y_max, x.max(axis=1))
    assert np.allclose(y_avg, x.mean(axis=1))
    with pytest.raises(ValueError):
        gen_pool_batch(9, "T9", 64)


def test_synthetic_cifar_layout(tmp_path):
    make_synthetic_cifar(str(tmp_path), n_train=20, n_test=10, seed=0)
    labels, images = load_cifar_file(str(tmp_path / "data_batch_1.bin"))
    assert images.shape[1:] == (3, 32, 32)
    assert labels.min() >= 0 and labels.max() < 10
    assert images.min() >= 0 and images.max() <= 255
    assert os.path.getsize(tmp_path / "test_batch.bin") == 10 * 3073

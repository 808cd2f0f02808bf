"""CIFAR binary ingestion, GCN + ZCA preprocessing, augmentation, and the
synthetic pooling-sequence generator.

CIFAR binary layout (as published): one record per image, 1 label byte
(CIFAR-10) or 2 label bytes (CIFAR-100: coarse then fine) followed by
3072 pixel bytes, channel-major R,G,B, row-major within each channel.
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

RECORD_PIXELS = 3072
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]
WHITEN_MAGIC = b"LPZW"

POOL_REGIMES = {"T1": 0.0, "T2": 0.5, "T3": 0.8}  # probability of a zero entry


class DataFormatError(ValueError):
    pass


def load_cifar_file(path, classes: int = 10):
    """Read one CIFAR binary file -> (labels int64 [N], images f32 [N,3,32,32]).

    Pixel values are reals in [0, 255].  CIFAR-100 files carry two label
    bytes; the fine label is returned.
    """
    label_bytes = 1 if classes <= 10 else 2
    rec = label_bytes + RECORD_PIXELS
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % rec:
        raise DataFormatError(
            f"{path}: size {raw.size} is not a multiple of the {rec}-byte "
            f"record (offset of partial record: {raw.size - raw.size % rec})")
    n = raw.size // rec
    recs = raw.reshape(n, rec)
    labels = recs[:, label_bytes - 1].astype(np.int64)  # fine label for CIFAR-100
    bad = np.nonzero(labels >= classes)[0]
    if bad.size:
        raise DataFormatError(
            f"{path}: label {labels[bad[0]]} out of range at record {bad[0]} "
            f"(byte offset {bad[0] * rec})")
    images = recs[:, label_bytes:].reshape(n, 3, 32, 32).astype(np.float32)
    return labels, images


def load_cifar(root, split: str, classes: int = 10):
    """Load a CIFAR split from a directory of binary batch files."""
    if classes == 10:
        names = CIFAR10_TRAIN_FILES if split == "train" else CIFAR10_TEST_FILES
    else:
        names = ["train.bin"] if split == "train" else ["test.bin"]
    labels, images = [], []
    for name in names:
        path = os.path.join(root, name)
        if not os.path.exists(path):
            raise DataFormatError(f"missing CIFAR file: {path}")
        lab, img = load_cifar_file(path, classes)
        labels.append(lab)
        images.append(img)
    return np.concatenate(labels), np.concatenate(images)


def write_cifar_file(path, labels, images, classes: int = 10,
                     coarse_labels=None):
    """Write records in the CIFAR binary layout (inverse of load_cifar_file)."""
    labels = np.asarray(labels)
    images = np.asarray(images)
    n = labels.shape[0]
    with open(path, "wb") as fh:
        for j in range(n):
            if classes > 10:
                coarse = 0 if coarse_labels is None else int(coarse_labels[j])
                fh.write(bytes([coarse, int(labels[j])]))
            else:
                fh.write(bytes([int(labels[j])]))
            fh.write(np.clip(np.round(images[j]), 0, 255).astype(np.uint8).tobytes())


# -- preprocessing ------------------------------------------------------------

def global_contrast_normalize(images: np.ndarray, std_floor: float = 1e-8):
    """Per-image: subtract the mean, divide by the (floored) std.

    Input [N,3,32,32] in [0,255]; works on a [0,1] rescale so the ZCA
    regularizer has a consistent scale.
    """
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    x = x - x.mean(axis=1, keepdims=True)
    std = np.maximum(x.std(axis=1, keepdims=True), std_floor)
    return (x / std).reshape(images.shape).astype(np.float32)


class WhiteningTransform:
    """ZCA whitening fit on the training split only."""

    def __init__(self, mean: np.ndarray, matrix: np.ndarray, lam: float):
        self.mean = mean          # [D]
        self.matrix = matrix      # [D,D], symmetric
        self.lam = lam

    def apply(self, images: np.ndarray) -> np.ndarray:
        x = images.reshape(images.shape[0], -1).astype(np.float64)
        out = (x - self.mean) @ self.matrix
        return out.reshape(images.shape).astype(np.float32)

    def save(self, path):
        d = self.mean.shape[0]
        with open(path, "wb") as fh:
            fh.write(WHITEN_MAGIC)
            fh.write(struct.pack("<Id", d, self.lam))
            fh.write(self.mean.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())

    @staticmethod
    def load(path) -> "WhiteningTransform":
        with open(path, "rb") as fh:
            if fh.read(4) != WHITEN_MAGIC:
                raise DataFormatError(f"{path}: bad whitening cache magic")
            d, lam = struct.unpack("<Id", fh.read(12))
            mean = np.frombuffer(fh.read(8 * d), dtype="<f8").copy()
            mat = np.frombuffer(fh.read(8 * d * d), dtype="<f8").reshape(d, d).copy()
        return WhiteningTransform(mean, mat, lam)


def fit_whitening(train_images: np.ndarray, lam: float = 0.1) -> WhiteningTransform:
    """Eigendecompose the training covariance; X' = U diag((s+lam)^-1/2) U^T (X-mu)."""
    x = train_images.reshape(train_images.shape[0], -1).astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / x.shape[0]
    s, u = np.linalg.eigh(cov)
    s = np.maximum(s, 0.0)
    mat = (u * (1.0 / np.sqrt(s + lam))) @ u.T
    return WhiteningTransform(mean, mat, lam)


def whitening_cache_key(train_files: list, lam: float) -> str:
    """Hash of the training file contents + lambda, for the disk cache."""
    h = hashlib.sha256()
    for path in sorted(train_files):
        h.update(os.path.basename(path).encode())
        with open(path, "rb") as fh:
            while True:
                chunk = fh.read(1 << 20)
                if not chunk:
                    break
                h.update(chunk)
    h.update(struct.pack("<d", lam))
    return h.hexdigest()[:16]


def fit_whitening_cached(train_images, train_files, lam, cache_dir):
    os.makedirs(cache_dir, exist_ok=True)
    key = whitening_cache_key(train_files, lam)
    path = os.path.join(cache_dir, f"zca_{key}.bin")
    if os.path.exists(path):
        return WhiteningTransform.load(path)
    tr = fit_whitening(train_images, lam)
    tr.save(path)
    return tr


# -- augmentation ---------------------------------------------------------------

def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4,
            crop: int = 32, hflip_prob: float = 0.5) -> np.ndarray:
    """Zero-pad, random-crop back to `crop`, random horizontal flip."""
    n, c, h, w = images.shape
    padded = np.pad(images, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    ys = rng.integers(0, h + 2 * pad - crop + 1, size=n)
    xs = rng.integers(0, w + 2 * pad - crop + 1, size=n)
    flips = rng.random(n) < hflip_prob
    out = np.empty((n, c, crop, crop), dtype=images.dtype)
    for j in range(n):
        patch = padded[j, :, ys[j]:ys[j] + crop, xs[j]:xs[j] + crop]
        out[j] = patch[:, :, ::-1] if flips[j] else patch
    return out


def batch_rng(seed: int, epoch: int, batch_index: int) -> np.random.Generator:
    """Deterministic per-batch stream so prefetch order cannot matter."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, batch_index]))


# -- synthetic pooling sequences -------------------------------------------------

def gen_pool_batch(length: int, regime: str, batch: int = 128,
                   rng: np.random.Generator | None = None,
                   target: str = "max", lo: float = 0.0, hi: float = 300.0):
    """Sequences of `length` entries in [lo, hi], zeroed with the regime's
    sparsity; targets are the exact per-sequence max (or mean)."""
    if regime not in POOL_REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if rng is None:
        rng = np.random.default_rng()
    x = rng.uniform(lo, hi, size=(batch, length))
    p_zero = POOL_REGIMES[regime]
    if p_zero > 0:
        x *= rng.random((batch, length)) >= p_zero
    if target == "max":
        y = x.max(axis=1)
    elif target == "avg":
        y = x.mean(axis=1)
    else:
        raise ValueError(f"unknown target {target!r}")
    return x.astype(np.float32), y.astype(np.float32)


# -- synthetic CIFAR-format dataset ----------------------------------------------
#
# Stand-in classification data written in the exact CIFAR-10 binary layout,
# for environments where the real dataset files are unavailable.  Ten
# texture classes: each class has a characteristic grating orientation;
# images vary in frequency, phase, colour mixing, windowing and noise, so
# a small CNN has to work for its accuracy.

def _synthetic_image(cls: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    theta = cls * np.pi / 10 + rng.normal(0, 0.06)
    freq = rng.uniform(3.0, 7.0)
    phase = rng.uniform(0, 2 * np.pi)
    carrier = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    # a couple of elliptical windows: the texture only shows in patches
    mask = np.zeros((32, 32))
    for _ in range(rng.integers(2, 4)):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        ry, rx = rng.uniform(0.12, 0.3, size=2)
        ang = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = np.cos(ang) * dx + np.sin(ang) * dy
        v = -np.sin(ang) * dx + np.cos(ang) * dy
        mask = np.maximum(mask, np.exp(-((u / rx) ** 2 + (v / ry) ** 2)))
    tex = carrier * mask
    # random colour mixing + background gradient + noise
    img = np.empty((3, 32, 32))
    weights = rng.uniform(0.4, 1.0, size=3) * np.sign(rng.uniform(-1, 1, size=3))
    grad = rng.normal(0, 0.15) * xx + rng.normal(0, 0.15) * yy
    for ch in range(3):
        img[ch] = weights[ch] * tex + grad + rng.normal(0, 0.35, size=(32, 32))
    img = (img - img.min()) / max(img.max() - img.min(), 1e-6)
    return (img * 255.0).astype(np.float32)


def make_synthetic_cifar(root, n_train: int = 50000, n_test: int = 10000,
                         seed: int = 0, classes: int = 10):
    """Write a synthetic dataset in the CIFAR-10 binary layout under `root`."""
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(seed)

    def gen(n):
        labels = rng.integers(0, classes, size=n)
        images = np.stack([_synthetic_image(int(c), rng) for c in labels])
        return labels, images

    per_file = (n_train + len(CIFAR10_TRAIN_FILES) - 1) // len(CIFAR10_TRAIN_FILES)
    written = 0
    for name in CIFAR10_TRAIN_FILES:
        take = min(per_file, n_train - written)
        if take <= 0:
            take = 0
        labels, images = gen(take)
        write_cifar_file(os.path.join(root, name), labels, images, classes)
        written += take
    labels, images = gen(n_test)
    write_cifar_file(os.path.join(root, CIFAR10_TEST_FILES[0]), labels, images, classes)
    return root

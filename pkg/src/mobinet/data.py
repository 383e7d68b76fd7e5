"""Dataset ingestion: IDX file reading/writing, seeded synthetic
generators, normalization, and batch iteration.

The IDX format is the classic ubyte layout: magic 0x00000803 for image
files (big-endian dims count, N, H, W then raw ubyte pixels) and
0x00000801 for label files (N then ubyte labels).

Two generators cover desk-scale training:

  * stripes: ten oriented-texture classes with noise and contrast wobble.
    Hard enough that features must be learned, easy enough for a desk run
    to clear 85-95% test top-1.
  * blobs: ten oriented Gaussian blobs, nearly noise-free; the fast CI
    preset.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# ---------------------------------------------------------------------------
# IDX files


def load_idx_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DatasetError(f"{path}: truncated IDX image file")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(raw) != 16 + n * h * w:
        raise DatasetError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, h, w).copy()


def load_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated IDX label file")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw) != 8 + n:
        raise DatasetError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).copy()


def save_idx_images(path, images: np.ndarray):
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise DatasetError("images must be (N, H, W) uint8")
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())


def save_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.dtype != np.uint8:
        raise DatasetError("labels must be (N,) uint8")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# synthetic generators


def _coords(size):
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    return yy - c, xx - c


def generate_stripes(n, size=32, seed=0, noise=0.18):
    """Ten oriented-stripe texture classes; the desk training dataset.

    Class c is a sinusoidal grating at orientation pi*c/10 with random
    phase, frequency, contrast and additive noise. Orientation is a local
    texture statistic, so the labels survive global average pooling and
    sign-quantized activations; the noise level keeps desk runs off the
    ceiling.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    yy, xx = _coords(size)
    images = np.empty((n, size, size), dtype=np.uint8)
    labels = (np.arange(n) % 10).astype(np.uint8)
    for i in range(n):
        theta = np.pi * labels[i] / 10.0 + rng.uniform(-0.05, 0.05)
        freq = rng.uniform(0.5, 0.8)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        contrast = rng.uniform(0.6, 1.0)
        img = contrast * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img = img + rng.normal(0.0, noise, img.shape)
        images[i] = (np.clip(img * 0.5 + 0.5, 0.0, 1.0) * 255).astype(np.uint8)
    perm = rng.permutation(n)
    return images[perm], labels[perm]


def generate_blobs(n, size=32, seed=0, noise=0.03):
    """Ten oriented Gaussian-blob texture classes; the easy CI dataset.

    Class c scatters small anisotropic Gaussian blobs along parallel lines
    at orientation pi*c/10 (random phase and along-line jitter), giving a
    quasi-periodic texture whose orientation survives pooling and sign
    quantization. Nearly noise-free, so a small desk run clears it in a
    few epochs.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    images = np.empty((n, size, size), dtype=np.uint8)
    labels = (np.arange(n) % 10).astype(np.uint8)
    line_gap, along_gap = 8.0, 5.0
    for i in range(n):
        theta = np.pi * labels[i] / 10.0 + rng.uniform(-0.04, 0.04)
        ct, st = np.cos(theta), np.sin(theta)
        phase = rng.uniform(0.0, line_gap)
        img = np.zeros((size, size))
        for line in range(-3, 4):
            d = line * line_gap + phase - line_gap / 2.0
            along0 = rng.uniform(0.0, along_gap)
            for k in range(-5, 6):
                a = k * along_gap + along0 + rng.uniform(-0.8, 0.8)
                cx = c + a * ct - d * st
                cy = c + a * st + d * ct
                if -6 <= cx <= size + 6 and -6 <= cy <= size + 6:
                    u = ct * (xx - cx) + st * (yy - cy)
                    v = -st * (xx - cx) + ct * (yy - cy)
                    img += np.exp(-(u**2 / (2 * 2.6**2) + v**2 / (2 * 1.1**2)))
        img = img / max(float(img.max()), 1e-6)
        img = img + rng.normal(0.0, noise, img.shape)
        images[i] = (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    perm = rng.permutation(n)
    return images[perm], labels[perm]


# ---------------------------------------------------------------------------
# dataset spec + batching


@dataclass
class DatasetSpec:
    """Where training data comes from and how it is normalized.

    source "idx_files" reads the four IDX paths; "synthetic" generates
    shapes or blobs from the seed. Pixel x maps to (x/255 - mean) / std.
    """

    source: str = "synthetic"
    kind: str = "stripes"  # synthetic flavor: stripes | blobs
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    n_train: int = 1500
    n_test: int = 500
    size: int = 32
    seed: int = 0
    mean: float = 0.5
    std: float = 0.5
    num_classes: int = 10
    extra: dict = field(default_factory=dict)

    def load(self):
        """Returns (x_train, y_train, x_test, y_test); images normalized
        float32 (N, 1, H, W), labels int64."""
        if self.source == "idx_files":
            xtr = load_idx_images(self.train_images)
            ytr = load_idx_labels(self.train_labels)
            xte = load_idx_images(self.test_images)
            yte = load_idx_labels(self.test_labels)
        elif self.source == "synthetic":
            gen = generate_stripes if self.kind == "stripes" else generate_blobs
            xtr, ytr = gen(self.n_train, size=self.size, seed=self.seed)
            xte, yte = gen(self.n_test, size=self.size, seed=self.seed + 1)
        else:
            raise DatasetError(f"unknown dataset source {self.source!r}")
        for name, y in (("train", ytr), ("test", yte)):
            if y.size and int(y.max()) >= self.num_classes:
                raise DatasetError(
                    f"{name} label {int(y.max())} out of range for {self.num_classes} classes"
                )
        return (
            self.normalize(xtr),
            ytr.astype(np.int64),
            self.normalize(xte),
            yte.astype(np.int64),
        )

    def normalize(self, images: np.ndarray) -> np.ndarray:
        x = images.astype(np.float32) / np.float32(255.0)
        x = (x - np.float32(self.mean)) / np.float32(self.std)
        return x[:, None, :, :]


def write_idx_dataset(out_dir, kind="stripes", n_train=1500, n_test=500, size=32, seed=0):
    """Generate a synthetic dataset and persist it as four IDX files.

    Returns a DatasetSpec pointing at the files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = generate_stripes if kind == "stripes" else generate_blobs
    xtr, ytr = gen(n_train, size=size, seed=seed)
    xte, yte = gen(n_test, size=size, seed=seed + 1)
    paths = {
        "train_images": out / "train-images-idx3-ubyte",
        "train_labels": out / "train-labels-idx1-ubyte",
        "test_images": out / "t10k-images-idx3-ubyte",
        "test_labels": out / "t10k-labels-idx1-ubyte",
    }
    save_idx_images(paths["train_images"], xtr)
    save_idx_labels(paths["train_labels"], ytr)
    save_idx_images(paths["test_images"], xte)
    save_idx_labels(paths["test_labels"], yte)
    return DatasetSpec(
        source="idx_files",
        size=size,
        seed=seed,
        **{k: str(v) for k, v in paths.items()},
    )


def iter_batches(x, y, batch_size, rng=None):
    """Yield (xb, yb) minibatches; shuffled when rng is given."""
    n = x.shape[0]
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield x[idx], y[idx]

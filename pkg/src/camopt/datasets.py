"""Desk-scale tasks: synthetic classification generators, an analytic
quadratic objective, and IDX image-file ingestion."""

import struct
from dataclasses import dataclass

import numpy as np

from .rng import make_generator

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class TaskSource:
    """Classification data stream: sample_batch(rng, n) -> (x, labels)."""

    name: str
    input_dim: int
    num_classes: int
    sample_batch: object


@dataclass(frozen=True)
class QuadraticTask:
    """Analytic objective f(x) = 0.5 * ||x - optimum||^2."""

    name: str
    dim: int
    optimum: np.ndarray

    def loss_value(self, x):
        return 0.5 * float(((np.asarray(x) - self.optimum) ** 2).sum())

    def gradient(self, x):
        return np.asarray(x) - self.optimum


def two_gaussians(seed, dim=8, separation=10.0):
    """Two unit-variance Gaussian blobs, means separation sigmas apart."""
    gen = make_generator(seed, "task-two-gaussians")
    direction = gen.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    mean = 0.5 * separation * direction

    def sample_batch(rng, batch_size):
        labels = rng.integers(0, 2, size=batch_size)
        signs = np.where(labels == 0, -1.0, 1.0)
        x = signs[:, None] * mean + rng.standard_normal((batch_size, dim))
        return x, labels

    return TaskSource(name="two_gaussians", input_dim=dim, num_classes=2,
                      sample_batch=sample_batch)


def spiral(seed, turns=1.75, noise=0.1):
    """Two interleaved planar spiral arms."""
    del seed  # the arms are fixed; randomness comes from the batch rng

    def sample_batch(rng, batch_size):
        labels = rng.integers(0, 2, size=batch_size)
        t = rng.uniform(0.25, 1.0, size=batch_size)
        angle = t * turns * 2.0 * np.pi + labels * np.pi
        radius = t
        x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        x += noise * rng.standard_normal((batch_size, 2))
        return x, labels

    return TaskSource(name="spiral", input_dim=2, num_classes=2,
                      sample_batch=sample_batch)


def gaussian_mixture(seed, dim=16, classes=8, radius=2.0):
    """Unit-variance Gaussian blobs with means on a sphere of the given
    radius, one blob per class."""
    gen = make_generator(seed, "task-gaussian-mixture")
    means = gen.standard_normal((classes, dim))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)

    def sample_batch(rng, batch_size):
        labels = rng.integers(0, classes, size=batch_size)
        x = means[labels] + rng.standard_normal((batch_size, dim))
        return x, labels

    return TaskSource(name="gaussian_mixture", input_dim=dim,
                      num_classes=classes, sample_batch=sample_batch)


def quadratic(seed, dim=8):
    gen = make_generator(seed, "task-quadratic")
    return QuadraticTask(name="quadratic", dim=dim,
                         optimum=gen.standard_normal(dim))


def synthetic_task(kind, seed, **kw):
    makers = {"two_gaussians": two_gaussians, "spiral": spiral,
              "gaussian_mixture": gaussian_mixture, "quadratic": quadratic}
    if kind not in makers:
        raise ValueError(f"unknown synthetic task {kind!r}; "
                         f"choose from {sorted(makers)}")
    return makers[kind](seed, **kw)


def _read_idx_header(data, path, magic_expected, header_len):
    if len(data) < 4:
        raise ValueError(f"{path}: truncated at byte {len(data)}: "
                         f"expected 4-byte magic")
    (magic,) = struct.unpack(">i", data[:4])
    if magic != magic_expected:
        raise ValueError(f"{path}: bad magic at byte 0: expected "
                         f"0x{magic_expected:08x}, found 0x{magic & 0xffffffff:08x}")
    if len(data) < header_len:
        raise ValueError(f"{path}: truncated at byte {len(data)}: expected "
                         f"{header_len}-byte header")
    dims = struct.unpack(f">{header_len // 4 - 1}i", data[4:header_len])
    return dims


def load_idx_images(path):
    """Big-endian IDX image file -> float array (n, rows*cols) in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    count, rows, cols = _read_idx_header(data, path, IDX_IMAGE_MAGIC, 16)
    expected = 16 + count * rows * cols
    if len(data) != expected:
        raise ValueError(f"{path}: truncated at byte {len(data)}: expected "
                         f"{expected} bytes for {count} {rows}x{cols} images")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def load_idx_labels(path):
    with open(path, "rb") as fh:
        data = fh.read()
    (count,) = _read_idx_header(data, path, IDX_LABEL_MAGIC, 8)
    expected = 8 + count
    if len(data) != expected:
        raise ValueError(f"{path}: truncated at byte {len(data)}: expected "
                         f"{expected} bytes for {count} labels")
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def ingest_mnist(image_path, label_path, seed=0):
    """Load an IDX image/label pair as a shuffled classification source."""
    images = load_idx_images(image_path)
    labels = load_idx_labels(label_path)
    if len(images) != len(labels):
        raise ValueError(f"{image_path} holds {len(images)} images but "
                         f"{label_path} holds {len(labels)} labels")
    order = make_generator(seed, "mnist-shuffle").permutation(len(images))
    images, labels = images[order], labels[order]

    def sample_batch(rng, batch_size):
        idx = rng.integers(0, len(images), size=batch_size)
        return images[idx], labels[idx]

    return TaskSource(name="mnist", input_dim=images.shape[1],
                      num_classes=int(labels.max()) + 1,
                      sample_batch=sample_batch)

"""Dataset ingestion, synthetic generation, corruption, and splits.

IDX ingestion covers the MNIST/FashionMNIST file pair format. The
synthetic generators provide deterministic desk-scale stand-ins: Gaussian
blob data for separability experiments, and a smooth-image generator that
has genuine spatial structure (so convolutional models benefit from it
and pixel shuffling destroys it).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, *shape) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, num_classes)
    num_classes: int
    provenance: str = "synthetic"  # "real" | "synthetic" | "corrupted"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0:
            raise ValueError("empty dataset")
        if len(self.inputs) != len(self.labels):
            raise ValueError("input / label count mismatch")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx: np.ndarray, provenance: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes,
                       provenance or self.provenance)


def _open(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx_dataset(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Parse an IDX image/label file pair (big-endian, magic-checked),
    scaling pixels to [0, 1] and cross-checking the item counts."""
    with _open(images_path) as f:
        head = f.read(16)
        if len(head) < 16:
            raise IdxFormatError("truncated image header")
        magic, n, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x}")
        raw = f.read(n * rows * cols)
        if len(raw) != n * rows * cols:
            raise IdxFormatError("truncated image data")
    with _open(labels_path) as f:
        head = f.read(8)
        if len(head) < 8:
            raise IdxFormatError("truncated label header")
        magic, n_labels = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"bad label magic 0x{magic:08x}")
        labels = np.frombuffer(f.read(n_labels), dtype=np.uint8)
        if len(labels) != n_labels:
            raise IdxFormatError("truncated label data")
    if n != n_labels:
        raise IdxFormatError(f"image count {n} != label count {n_labels}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)
    return Dataset(images.astype(np.float32) / 255.0, labels.astype(np.int64),
                   num_classes=num_classes, provenance="real")


def synth_dataset(seed: int, n: int, dim: int, classes: int,
                  structure: str = "clustered") -> Dataset:
    """Flat-vector synthetic data.

    clustered: Gaussian blobs, one per class, centers 4 sigma apart,
    labels = blob id. random: inputs uniform noise, labels uniform and
    independent of the inputs.
    """
    if min(n, dim, classes) < 1:
        raise ValueError("n, dim, classes must all be >= 1")
    rng = np.random.Generator(np.random.Philox(key=seed))
    if structure == "random":
        inputs = rng.random((n, dim))
        labels = rng.integers(0, classes, size=n)
        return Dataset(inputs.astype(np.float32), labels, classes)
    if structure != "clustered":
        raise ValueError(f"unknown structure {structure!r}")
    sigma = 0.05
    centers = rng.random((classes, dim))
    # Rescale pairwise so the nearest centers sit ~8 sigma apart; the 4-sigma
    # tail mass makes overlap at desk-scale n astronomically unlikely, so the
    # blobs are genuinely separable.
    dists = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
    np.fill_diagonal(dists, np.inf)
    if classes > 1:
        centers *= (8.0 * sigma) / dists.min()
    labels = rng.integers(0, classes, size=n)
    inputs = centers[labels] + sigma * rng.standard_normal((n, dim))
    inputs = np.clip(inputs, 0.0, 1.0)
    return Dataset(inputs.astype(np.float32), labels, classes)


def _smooth_field(rng, shape, cutoff):
    """Low-frequency random image: white noise kept below a frequency
    cutoff, normalized to zero mean, unit std."""
    h, w = shape
    spec = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    spec = np.where(np.hypot(fy, fx) <= cutoff, spec, 0.0)
    img = np.fft.ifft2(spec).real
    return (img - img.mean()) / (img.std() + 1e-12)


def synth_image_dataset(seed: int, n: int, shape: tuple[int, int] = (28, 28),
                        classes: int = 10, prototypes_per_class: int = 8,
                        noise: float = 0.25, cutoff: float = 0.15,
                        channels: int | None = None,
                        sample_seed: int | None = None) -> Dataset:
    """Smooth-image stand-in for digit data.

    Each class owns several low-frequency prototype images; a sample is a
    random prototype of its class plus smooth per-sample deformation and
    pixel noise. The spatial smoothness is real structure: it survives
    label permutation, and pixel shuffling destroys it.

    sample_seed, when given, draws the samples from a stream independent
    of the class prototypes, so two datasets can share class structure
    (same seed) without sharing points (different sample seeds).
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    protos = np.stack([
        np.stack([_smooth_field(rng, shape, cutoff)
                  for _ in range(prototypes_per_class)])
        for _ in range(classes)])  # (C, P, H, W)
    deform = np.stack([_smooth_field(rng, shape, cutoff * 2) for _ in range(16)])
    if sample_seed is not None:
        rng = np.random.Generator(np.random.Philox(key=sample_seed))
    labels = rng.integers(0, classes, size=n)
    which = rng.integers(0, prototypes_per_class, size=n)
    base = protos[labels, which]
    mix = rng.standard_normal((n, 16)) * 0.3
    images = base + np.einsum("nk,khw->nhw", mix, deform)
    images = images + noise * rng.standard_normal(images.shape)
    images = 1.0 / (1.0 + np.exp(-images))  # squash to (0, 1)
    if channels is not None:
        images = np.repeat(images[:, None], channels, axis=1)
    return Dataset(images.astype(np.float32), labels, classes)


def corrupt(dataset: Dataset, mode: str, seed: int) -> Dataset:
    """shuffle_labels permutes the label vector; shuffle_pixels applies one
    fixed pixel permutation to every image. Both deterministic given seed."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    if mode == "shuffle_labels":
        perm = rng.permutation(len(dataset))
        return Dataset(dataset.inputs, dataset.labels[perm],
                       dataset.num_classes, provenance="corrupted")
    if mode == "shuffle_pixels":
        flat = dataset.inputs.reshape(len(dataset), -1)
        perm = rng.permutation(flat.shape[1])
        shuffled = flat[:, perm].reshape(dataset.inputs.shape)
        return Dataset(shuffled, dataset.labels, dataset.num_classes,
                       provenance="corrupted")
    raise ValueError(f"unknown corruption mode {mode!r}")


def split_prior_holdout(dataset: Dataset, prior_fraction: float,
                        seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint (D_a, D_b): shuffle once with the split seed, then cut
    contiguously. D_a (the prior part) gets floor(frac * n) points."""
    if not (0.0 < prior_fraction < 1.0):
        raise ValueError("prior fraction must be in (0, 1)")
    rng = np.random.Generator(np.random.Philox(key=seed))
    perm = rng.permutation(len(dataset))
    cut = int(prior_fraction * len(dataset))
    if cut == 0 or cut == len(dataset):
        raise ValueError("split leaves one side empty")
    return dataset.subset(perm[:cut]), dataset.subset(perm[cut:])

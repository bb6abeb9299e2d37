"""Dataset ingestion: synthetic coarse/fine blobs, MNIST IDX, CIFAR-10 binary.

The synthetic generator builds Gaussian-blob images whose classes come in
visually similar pairs: a size-coded group blob (coarse, easy) shared by
the pair plus a small relative detail (fine, hard) that tells the pair
apart. Easy/hard structure is what gives the confidence threshold something
to separate.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """A data file failed validation (bad magic, truncation, bad label)."""


@dataclass
class Dataset:
    images: np.ndarray  # (M, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (M,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# ---------------------------------------------------------------------------
# synthetic coarse/fine blobs


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 6
    clusters_per_class: int = 2
    image_size: int = 16
    noise: float = 0.08
    train_size: int = 960
    eval_size: int = 480
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.clusters_per_class < 1:
            raise ValueError("clusters_per_class must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _blob(size: int, cy: float, cx: float, sigma: float, amp: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return amp * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2)))


def _render_sample(spec: SyntheticSpec, label: int, cluster: int,
                   rng: np.random.Generator) -> np.ndarray:
    """One image: a size-coded group blob at a random position plus a small
    detail blob at a group-specific relative direction.

    Classes pair up as (0,1), (2,3), ...: the pair's blob width encodes the
    coarse group (visible even downsampled), while the class within the pair
    is the side the detail blob sits on. The detail axis rotates with the
    group and the whole figure is translated per sample, so absolute
    position carries no class information; only relative structure does.
    Clusters vary blob amplitude and detail distance for intra-class modes.
    """
    s = spec.image_size
    group, within = divmod(label, 2)
    margin = 0.3 * s
    cy, cx = rng.uniform(margin, s - 1 - margin, size=2)

    sigma_g = s * (0.09 + 0.045 * group)
    amp_g = 0.9 - 0.15 * (cluster % 2)
    img = _blob(s, cy, cx, sigma=sigma_g, amp=amp_g)

    n_groups = (spec.num_classes + 1) // 2
    axis = np.pi * group / max(n_groups, 1)
    ang = axis + (0.0 if within == 0 else np.pi)
    dist = s * (0.24 + 0.03 * (cluster % 2))
    fy = cy + dist * np.sin(ang)
    fx = cx + dist * np.cos(ang)
    img += _blob(s, fy, fx, sigma=s / 10.0, amp=0.55)

    img += spec.noise * rng.standard_normal((s, s))
    return np.clip(img, 0.0, 1.0)


def _sample_split(spec: SyntheticSpec, count: int, rng: np.random.Generator) -> Dataset:
    labels = rng.integers(0, spec.num_classes, size=count)
    clusters = rng.integers(0, spec.clusters_per_class, size=count)
    images = np.stack([
        _render_sample(spec, int(labels[i]), int(clusters[i]), rng) for i in range(count)
    ])
    return Dataset(
        images=images[:, None, :, :].astype(np.float64),
        labels=labels.astype(np.int64),
        num_classes=spec.num_classes,
    )


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, eval) pair for a spec; same seed, same bits."""
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    train = _sample_split(spec, spec.train_size, rng)
    evalset = _sample_split(spec, spec.eval_size, rng)
    return train, evalset


# ---------------------------------------------------------------------------
# MNIST (IDX format)


def _open_maybe_gz(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise DatasetError(f"{path}: truncated IDX header, {len(raw)} bytes at offset 0")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 2051:
        raise DatasetError(f"{path}: bad magic {magic:#010x} at offset 0, expected 0x00000803")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, file ends at offset {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated IDX header, {len(raw)} bytes at offset 0")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != 2049:
        raise DatasetError(f"{path}: bad magic {magic:#010x} at offset 0, expected 0x00000801")
    if len(raw) != 8 + count:
        raise DatasetError(f"{path}: expected {8 + count} bytes, file ends at offset {len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DatasetError(f"{path}: label {labels.max()} out of range [0, 9]")
    return labels


def _find_idx_file(root: Path, stem: str) -> Path:
    for candidate in (root / stem, root / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DatasetError(f"missing {stem}[.gz] under {root}")


def load_mnist(root) -> tuple[Dataset, Dataset]:
    """Standard four-file MNIST layout; the source split is preserved."""
    root = Path(root)
    splits = []
    for img_stem, lbl_stem in (
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ):
        images = read_idx_images(_find_idx_file(root, img_stem))
        labels = read_idx_labels(_find_idx_file(root, lbl_stem))
        if len(images) != len(labels):
            raise DatasetError(f"{img_stem}: {len(images)} images vs {len(labels)} labels")
        splits.append(Dataset(images=images[:, None, :, :], labels=labels, num_classes=10))
    return splits[0], splits[1]


# ---------------------------------------------------------------------------
# CIFAR-10 (binary batches)

_CIFAR_RECORD = 1 + 3 * 32 * 32


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
        offset = (len(raw) // _CIFAR_RECORD) * _CIFAR_RECORD
        raise DatasetError(f"{path}: size {len(raw)} is not a multiple of {_CIFAR_RECORD}; bad record at offset {offset}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetError(f"{path}: label {labels[bad]} out of range at offset {bad * _CIFAR_RECORD}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(root) -> tuple[Dataset, Dataset]:
    root = Path(root)
    train_parts = []
    for i in range(1, 6):
        path = root / f"data_batch_{i}.bin"
        if not path.exists():
            raise DatasetError(f"missing {path}")
        train_parts.append(read_cifar_batch(path))
    test_path = root / "test_batch.bin"
    if not test_path.exists():
        raise DatasetError(f"missing {test_path}")
    test_images, test_labels = read_cifar_batch(test_path)
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    return (
        Dataset(images=images, labels=labels, num_classes=10),
        Dataset(images=test_images, labels=test_labels, num_classes=10),
    )


# ---------------------------------------------------------------------------
# augmentation


def augment_batch(images: np.ndarray, rng: np.random.Generator,
                  flip: bool = False, crop_pad: int = 0) -> np.ndarray:
    """Random crop (zero padding) then horizontal flip, per sample."""
    out = images
    if crop_pad > 0:
        b, c, h, w = out.shape
        padded = np.pad(out, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)))
        offsets = rng.integers(0, 2 * crop_pad + 1, size=(b, 2))
        cropped = np.empty_like(out)
        for i in range(b):
            oy, ox = offsets[i]
            cropped[i] = padded[i, :, oy:oy + h, ox:ox + w]
        out = cropped
    if flip:
        mask = rng.random(len(out)) < 0.5
        out = out.copy()
        out[mask] = out[mask, :, :, ::-1]
    return out

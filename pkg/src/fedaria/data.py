"""Datasets, IDX ingestion and the Dirichlet label-skew partitioner."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numkit
from .errors import (
    BadMagicError,
    CountMismatchError,
    InfeasiblePartitionError,
    ParseError,
    TruncatedFileError,
    ValidationError,
)
from .numkit import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_PARTITION_ATTEMPTS = 1000


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValidationError("features must be a 2-D matrix")
        if len(self.labels) != len(self.features):
            raise ValidationError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if len(self.labels) < 1:
            raise ValidationError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValidationError("labels must lie in [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, name or self.name)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes).astype(np.float64)


@dataclass
class Partition:
    client_indices: list[np.ndarray]
    alpha: float
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]


def blob_directions(num_classes: int, dim: int) -> np.ndarray:
    """Fixed unit vectors, one per class; basis vectors when dim allows."""
    if num_classes <= dim:
        return np.eye(dim)[:num_classes]
    u = numkit.gaussian(RngStream(0x5EED, 0xB10B), num_classes * dim).reshape(num_classes, dim)
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def synth_blobs(
    num_classes: int,
    dim: int,
    n_per_class: int,
    separation: float,
    noise_std: float,
    rng: RngStream,
    name: str = "blobs",
) -> Dataset:
    if min(num_classes, dim, n_per_class) < 1:
        raise ValidationError("num_classes, dim and n_per_class must be >= 1")
    if noise_std < 0:
        raise ValidationError("noise_std must be >= 0")
    centers = separation * blob_directions(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    n = len(labels)
    noise = numkit.gaussian(rng, n * dim, 0.0, noise_std).reshape(n, dim)
    features = np.clip(centers[labels] + noise, -1e6, 1e6)
    return Dataset(features, labels, max(num_classes, 2), name)


# -- IDX ---------------------------------------------------------------------


def _read_exact(buf: bytes, offset: int, n: int, what: str, path) -> bytes:
    chunk = buf[offset : offset + n]
    if len(chunk) != n:
        raise TruncatedFileError(f"{path}: truncated while reading {what}")
    return chunk


def read_idx_images(path) -> np.ndarray:
    """Return a ``(count, rows, cols)`` uint8 array."""
    buf = Path(path).read_bytes()
    if len(buf) == 0:
        raise TruncatedFileError(f"{path}: empty file")
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, "magic", path))
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"{path}: bad image magic 0x{magic:08x}")
    count, rows, cols = struct.unpack(">III", _read_exact(buf, 4, 12, "header", path))
    body = _read_exact(buf, 16, count * rows * cols, "pixels", path)
    if len(buf) != 16 + len(body):
        raise ParseError(f"{path}: {len(buf) - 16 - len(body)} trailing bytes")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) == 0:
        raise TruncatedFileError(f"{path}: empty file")
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, "magic", path))
    if magic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"{path}: bad label magic 0x{magic:08x}")
    (count,) = struct.unpack(">I", _read_exact(buf, 4, 4, "header", path))
    body = _read_exact(buf, 8, count, "labels", path)
    if len(buf) != 8 + count:
        raise ParseError(f"{path}: {len(buf) - 8 - count} trailing bytes")
    return np.frombuffer(body, dtype=np.uint8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValidationError("images must be (count, rows, cols)")
    if images.dtype != np.uint8:
        if images.min() < 0 or images.max() > 255:
            raise ValidationError("pixel values must fit in a byte")
        images = images.astype(np.uint8)
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes(order="C"))


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValidationError("labels must fit in a byte")
    header = struct.pack(">II", IDX_LABELS_MAGIC, labels.size)
    Path(path).write_bytes(header + labels.astype(np.uint8).tobytes())


def load_idx(images_path, labels_path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    """Load an image/label IDX pair; pixels are scaled into [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels"
        )
    if len(labels) == 0:
        raise ParseError(f"{images_path}: no samples")
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), k, name or Path(images_path).stem)


def export_idx(ds: Dataset, images_path, labels_path, shape: tuple[int, int] | None = None) -> None:
    """Write a dataset as IDX, quantizing features (assumed in [0, 1]) to bytes."""
    rows, cols = shape if shape is not None else (1, ds.dim)
    if rows * cols != ds.dim:
        raise ValidationError(f"shape {rows}x{cols} does not match feature dim {ds.dim}")
    pix = np.clip(np.rint(ds.features * 255.0), 0, 255).astype(np.uint8)
    write_idx_images(images_path, pix.reshape(len(ds), rows, cols))
    write_idx_labels(labels_path, ds.labels)


# -- partitioning --------------------------------------------------------------


def dirichlet_partition(
    ds: Dataset, num_clients: int, alpha: float, min_size: int = 10, rng: RngStream | None = None
) -> Partition:
    """Per-class Dirichlet allocation of sample indices to clients.

    Each class's shuffled indices are split across clients in proportions
    drawn from Dirichlet(alpha, ..., alpha). The whole draw is repeated when
    some client ends up with fewer than ``min_size`` samples.
    """
    if num_clients < 2:
        raise ValidationError("num_clients must be >= 2")
    if not alpha > 0:
        raise ValidationError("alpha must be > 0")
    if min_size < 1:
        raise ValidationError("min_size must be >= 1")
    if rng is None:
        rng = RngStream(0)
    seed = rng.seed
    if num_clients * min_size > len(ds):
        raise InfeasiblePartitionError(
            f"{len(ds)} samples cannot give {num_clients} clients {min_size} each"
        )
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
    for _ in range(MAX_PARTITION_ATTEMPTS):
        shards: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            shuffled = idx[numkit.permutation(rng, idx.size)]
            props = numkit.dirichlet(rng, np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for i, part in enumerate(np.split(shuffled, cuts)):
                shards[i].append(part)
        clients = [np.sort(np.concatenate(s)) for s in shards]
        if min(len(c) for c in clients) >= min_size:
            return Partition(clients, float(alpha), seed)
    raise InfeasiblePartitionError(
        f"no partition with min_size={min_size} after {MAX_PARTITION_ATTEMPTS} attempts "
        f"(alpha={alpha}, clients={num_clients})"
    )


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return 0.5 * float(np.abs(p - q).sum())


def _normalize(h: np.ndarray) -> np.ndarray:
    s = h.sum()
    return h / s if s > 0 else h


@dataclass
class HeterogeneityReport:
    sizes: list[int]
    histograms: np.ndarray  # clients x classes, counts
    global_histogram: np.ndarray
    tv_to_global: np.ndarray
    pairwise_tv: np.ndarray

    @property
    def mean_tv_to_global(self) -> float:
        return float(self.tv_to_global.mean())

    def format(self) -> str:
        lines = ["client  size  tv_to_global  label_histogram"]
        for i, (n, tv, h) in enumerate(zip(self.sizes, self.tv_to_global, self.histograms)):
            counts = " ".join(str(int(c)) for c in h)
            lines.append(f"{i:>6}  {n:>4}  {tv:>12.4f}  {counts}")
        lines.append(f"mean tv_to_global: {self.mean_tv_to_global:.4f}")
        return "\n".join(lines)


def heterogeneity_report(p: Partition, ds: Dataset) -> HeterogeneityReport:
    hists = np.array([np.bincount(ds.labels[ix], minlength=ds.num_classes) for ix in p.client_indices],
                     dtype=np.float64)
    glob = hists.sum(axis=0)
    dists = [_normalize(h) for h in hists]
    gdist = _normalize(glob)
    to_global = np.array([total_variation(d, gdist) for d in dists])
    k = len(dists)
    pairwise = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            pairwise[i, j] = pairwise[j, i] = total_variation(dists[i], dists[j])
    return HeterogeneityReport(p.sizes(), hists, glob, to_global, pairwise)


def train_eval_split(ds: Dataset, eval_fraction: float, rng: RngStream) -> tuple[Dataset, Dataset]:
    """Stratified split holding out round(fraction * N) rows.

    Per-class quotas use largest-remainder rounding (ties to the lower class
    index), so every class is within one row of its exact share.
    """
    if not 0 < eval_fraction < 1:
        raise ValidationError("eval_fraction must be in (0, 1)")
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
    exact = np.array([eval_fraction * idx.size for idx in by_class])
    quota = np.floor(exact).astype(np.int64)
    short = int(round(eval_fraction * len(ds))) - int(quota.sum())
    order = sorted(range(len(exact)), key=lambda c: (-(exact[c] - quota[c]), c))
    for c in order[:max(short, 0)]:
        quota[c] += 1
    train_idx, eval_idx = [], []
    for idx, k in zip(by_class, quota):
        if idx.size == 0:
            continue
        idx = idx[numkit.permutation(rng, idx.size)]
        eval_idx.append(idx[:k])
        train_idx.append(idx[k:])
    tr = np.sort(np.concatenate(train_idx))
    ev = np.sort(np.concatenate(eval_idx))
    if tr.size == 0 or ev.size == 0:
        raise ValidationError("split leaves one side empty; dataset too small")
    return ds.subset(tr, ds.name + "-train"), ds.subset(ev, ds.name + "-eval")

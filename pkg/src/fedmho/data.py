"""Datasets, IDX ingestion, synthetic blobs and Dirichlet non-IID partitioning."""

import struct
from dataclasses import dataclass

import numpy as np

from ._validation import (
    DimensionError,
    FormatError,
    ValidationError,
    as_float_array,
    check_labels,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Images in [0, 1] (one flattened row per sample) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = as_float_array(self.images, ndim=2, name="images")
        labels = check_labels(self.labels, self.num_classes)
        if images.shape[0] != labels.shape[0]:
            raise DimensionError(
                f"{images.shape[0]} images but {labels.shape[0]} labels"
            )
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValidationError("pixel values must lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self):
        return self.images.shape[1]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# --------------------------------------------------------------------------
# IDX format (MNIST family): big-endian header, unsigned-byte payload


def _read_idx(path, magic, ndim_expected, what):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated {what} file (no magic number)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(
            f"{path}: bad magic number 0x{found:08x} for {what} file, expected 0x{magic:08x}"
        )
    header_len = 4 + 4 * ndim_expected
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated {what} header (dimension sizes)")
    dims = struct.unpack(f">{ndim_expected}I", raw[4:header_len])
    n_bytes = int(np.prod(dims, dtype=np.int64))
    payload = raw[header_len:]
    if len(payload) != n_bytes:
        raise FormatError(
            f"{path}: {what} payload has {len(payload)} bytes, header declares {n_bytes}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None):
    """Read an IDX image/label file pair into a :class:`Dataset`.

    Pixels are scaled from bytes to [0, 1] and flattened per image.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"item count mismatch: {images_path} holds {images.shape[0]} images, "
            f"{labels_path} holds {labels.shape[0]} labels"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64), num_classes)


def write_idx(images_path, labels_path, images, labels, shape=None):
    """Write uint8 images (N x rows x cols, or N x D with ``shape``) and labels."""
    images = np.asarray(images)
    if shape is not None:
        images = images.reshape(images.shape[0], *shape)
    if images.ndim != 3:
        raise DimensionError("images must be N x rows x cols (pass shape= for flat rows)")
    if images.dtype != np.uint8:
        images = np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255)
        images = images.astype(np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# --------------------------------------------------------------------------
# Synthetic blobs


def make_blobs(num_classes, per_class, dim, spread, seed, center_scale=1.0,
               modes_per_class=1, mode_scale=1.0):
    """Gaussian blobs squashed into [0, 1] by a sigmoid.

    Class centres are drawn once from ``N(0, center_scale^2 I)``; samples of
    class ``c`` are ``sigmoid(center_c + spread * N(0, I))``. Rows are grouped
    by class in ascending order.

    With ``modes_per_class > 1`` each class is instead an equal-weight mixture
    of sub-blobs whose centres sit at ``center_c + N(0, mode_scale^2 I)``.
    """
    if dim < 1 or per_class < 1 or num_classes < 1 or modes_per_class < 1:
        raise ValidationError("num_classes, per_class, dim and modes_per_class must be >= 1")
    if spread < 0:
        raise ValidationError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(num_classes, dim))
    noise = rng.standard_normal((num_classes, per_class, dim))
    if modes_per_class > 1:
        offsets = rng.normal(0.0, mode_scale, size=(num_classes, modes_per_class, dim))
        mode = np.arange(per_class) % modes_per_class
        centers = centers[:, None, :] + offsets[:, mode, :]
    else:
        centers = centers[:, None, :]
    raw = centers + spread * noise
    images = 1.0 / (1.0 + np.exp(-raw.reshape(-1, dim)))
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(images, labels, num_classes)


def train_test_split_per_class(dataset, test_per_class, seed):
    """Hold out ``test_per_class`` random samples of every class."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        if len(idx) <= test_per_class:
            raise ValidationError(f"class {c} has too few samples for the hold-out")
        test.append(idx[:test_per_class])
        train.append(idx[test_per_class:])
    return dataset.subset(np.sort(np.concatenate(train))), dataset.subset(np.sort(np.concatenate(test)))


# --------------------------------------------------------------------------
# Partitioning


@dataclass(frozen=True)
class Partition:
    client_indices: list
    alpha: float
    seed: int

    @property
    def num_clients(self):
        return len(self.client_indices)


def largest_remainder(weights, total):
    """Split integer ``total`` proportionally to ``weights``.

    Floors first, then hands the leftover units to the largest fractional
    remainders; equal remainders go to the lower index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total < 0 or np.any(w < 0) or w.sum() <= 0:
        raise ValidationError("need total >= 0 and non-negative weights with positive sum")
    if np.all(w == np.round(w)):
        # integer histograms: exact arithmetic so equal remainders really tie
        wi = [int(v) for v in w]
        s = sum(wi)
        counts = np.array([v * total // s for v in wi], dtype=np.int64)
        remainders = [v * total % s for v in wi]
    else:
        exact = w / w.sum() * total
        counts = np.floor(exact).astype(np.int64)
        remainders = exact - counts
    leftover = int(total - counts.sum())
    order = sorted(range(len(w)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def dirichlet_partition(dataset, num_clients, alpha, seed):
    """Per-class Dirichlet split of ``dataset`` across ``num_clients``.

    For every class the (shuffled) indices are divided by proportions drawn
    from ``Dir(alpha * 1_K)``, rounded with the largest-remainder rule so every
    sample is assigned. A client left empty receives one sample taken from the
    end of the currently largest client.
    """
    if num_clients < 1:
        raise ValidationError("num_clients must be >= 1")
    if alpha <= 0:
        raise ValidationError("alpha must be positive")
    n = len(dataset)
    if n < num_clients:
        raise ValidationError(f"dataset of {n} samples cannot cover {num_clients} clients")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        if len(idx) == 0:
            continue
        props = rng.dirichlet(np.full(num_clients, float(alpha)))
        counts = largest_remainder(props, len(idx))
        for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[k].extend(part.tolist())
    for k in range(num_clients):
        if not buckets[k]:
            donor = max(range(num_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    return Partition([np.asarray(b, dtype=np.int64) for b in buckets], float(alpha), seed)


def label_histogram(dataset, indices=None):
    """Per-class sample counts over ``indices`` (all samples when ``None``)."""
    labels = dataset.labels
    if indices is not None:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(dataset)):
            raise ValidationError("index out of range for dataset")
        labels = labels[idx]
    return np.bincount(labels, minlength=dataset.num_classes).astype(np.int64)

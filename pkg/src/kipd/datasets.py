"""Loading, preprocessing, sampling, corruption and augmentation of datasets."""

from __future__ import annotations

import gzip
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage

from kipd.errors import FormatError, NumericError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CORRUPTION_SCHEMES = ("uniform", "zero")

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Dataset:
    """Features with mean-centered one-hot labels.

    ``image_shape`` is (H, W, channels) when rows are flattened images.
    """

    X: np.ndarray
    y: np.ndarray
    labels: np.ndarray
    num_classes: int
    image_shape: tuple | None = None

    def __post_init__(self):
        if self.X.ndim != 2:
            raise ValueError("X must be 2-D")
        if not (len(self.X) == len(self.y) == len(self.labels)):
            raise ValueError("X, y and labels differ in length")
        if self.y.shape[1] != self.num_classes:
            raise ValueError("label matrix width differs from num_classes")

    @classmethod
    def from_labels(cls, X, labels, num_classes=None, image_shape=None) -> "Dataset":
        labels = np.asarray(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        X = np.asarray(X, dtype=np.float64)
        return cls(X, one_hot_centered(labels, num_classes), labels, num_classes, image_shape)

    @property
    def n(self) -> int:
        return len(self.X)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return len(self.X)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.labels[idx], self.num_classes,
                       self.image_shape)

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]

    def validate(self) -> None:
        """Check the label invariants and row distinctness (expensive for large n)."""
        if self.n < 1:
            raise ValueError("dataset is empty")
        if np.max(np.abs(self.y.sum(axis=1))) > 1e-12:
            raise ValueError("label rows do not sum to zero")
        if np.any(np.argmax(self.y, axis=1) != self.labels):
            raise ValueError("label matrix disagrees with class indices")
        if len(np.unique(self.X, axis=0)) != self.n:
            raise ValueError("dataset rows are not distinct")


@dataclass
class CorruptionMask:
    frozen: np.ndarray
    rho: float
    scheme: str

    @property
    def count_per_row(self) -> int:
        return corrupted_count(self.rho, self.frozen.shape[1])


# ------------------------------------------------------------------- loading

def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) holding unsigned bytes."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    size = math.prod(dims)
    if size > 2**40:
        raise FormatError(f"{path}: implausible IDX dimensions {dims}")
    payload = len(raw) - header
    if payload != size:
        kind = "truncated" if payload < size else "oversized"
        raise FormatError(f"{path}: {kind} payload, expected {size} bytes, got {payload}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"),
                 stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, standardize_data: bool = True):
    """Train and test Datasets from a directory of MNIST IDX files.

    Pixels are scaled to [0, 1], then standardized with train-set statistics
    (single channel) unless ``standardize_data`` is False.
    """
    directory = Path(directory)
    parts = {k: load_idx(_find(directory, v)) for k, v in MNIST_FILES.items()}
    X_tr = parts["train_images"].reshape(len(parts["train_images"]), -1) / 255.0
    X_te = parts["test_images"].reshape(len(parts["test_images"]), -1) / 255.0
    if standardize_data:
        X_tr, (X_te,), _ = standardize(X_tr, [X_te], channels=1)
    shape = parts["train_images"].shape[1:] + (1,)
    train = Dataset.from_labels(X_tr, parts["train_labels"], 10, shape)
    test = Dataset.from_labels(X_te, parts["test_labels"], 10, shape)
    return train, test


def load_csv(path, num_classes: int | None = None, image_shape=None) -> Dataset:
    """CSV with a header row, one sample per line, integer label in the last column."""
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.shape[1] < 2:
        raise FormatError(f"{path}: need at least one feature column and a label column")
    labels = data[:, -1]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise FormatError(f"{path}: labels must be non-negative integers")
    return Dataset.from_labels(data[:, :-1], labels.astype(np.int64), num_classes, image_shape)


def resolve_data_path(name: str) -> Path:
    """A path, or a name looked up under $KIPD_DATA_ROOT."""
    path = Path(name)
    if not path.exists() and os.environ.get("KIPD_DATA_ROOT"):
        path = Path(os.environ["KIPD_DATA_ROOT"]) / name
    if not path.exists():
        raise FileNotFoundError(f"data path {name!r} not found")
    return path


# ------------------------------------------------------------- preprocessing

def standardize(X_train, X_other=(), channels: int = 1):
    """Channel-wise mean/std standardization using train statistics only.

    Features are assumed channel-last. Channels with std < 1e-12 are only
    mean-shifted. Returns ``(X_train_std, [X_other_std...], (mean, std))``.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    if X_train.size == 0:
        raise ValueError("empty training matrix")
    per_channel = X_train.reshape(len(X_train), -1, channels)
    mean = per_channel.mean(axis=(0, 1))
    std = per_channel.std(axis=(0, 1))
    scale = np.where(std < 1e-12, 1.0, std)

    def apply(X):
        X = np.asarray(X, dtype=np.float64)
        return ((X.reshape(len(X), -1, channels) - mean) / scale).reshape(X.shape)

    return apply(X_train), [apply(X) for X in X_other], (mean, std)


def zca_whiten(X_train, X_other=(), eps: float = 1e-5):
    """Regularized ZCA: (X - mu) (Sigma + eps * tr(Sigma)/d * I)^{-1/2}."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    X_train = np.asarray(X_train, dtype=np.float64)
    mu = X_train.mean(axis=0)
    centered = X_train - mu
    cov = centered.T @ centered / len(X_train)
    if not np.all(np.isfinite(cov)):
        raise NumericError("non-finite covariance")
    d = cov.shape[0]
    evals, evecs = np.linalg.eigh(cov + eps * np.trace(cov) / d * np.eye(d))
    if np.any(evals <= 0):
        raise NumericError("covariance is singular; use eps > 0")
    W = (evecs / np.sqrt(evals)) @ evecs.T
    return centered @ W, [(np.asarray(X, dtype=np.float64) - mu) @ W for X in X_other]


def one_hot_centered(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    y = np.full((len(labels), num_classes), -1.0 / num_classes)
    y[np.arange(len(labels)), labels] += 1.0
    return y


# ------------------------------------------------------------------ sampling

def per_class_counts(m: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Split m into per-class counts of floor(m/C) or ceil(m/C), extras at random."""
    counts = np.full(num_classes, m // num_classes)
    counts[rng.choice(num_classes, m % num_classes, replace=False)] += 1
    return counts


def class_balanced_indices(labels, num_classes: int, m: int, rng: np.random.Generator):
    labels = np.asarray(labels)
    counts = per_class_counts(m, num_classes, rng)
    chosen = []
    for c, k in enumerate(counts):
        pool = np.flatnonzero(labels == c)
        if len(pool) < k:
            raise ValueError(f"class {c} has {len(pool)} points, {k} requested")
        chosen.append(rng.choice(pool, k, replace=False))
    return np.concatenate(chosen)


def class_balanced_sample(D: Dataset, m: int, rng: np.random.Generator) -> Dataset:
    return D.subset(class_balanced_indices(D.labels, D.num_classes, m, rng))


class ClassBalancedSampler:
    """Draws class-balanced batches without replacement within per-class epochs.

    Each class keeps its own shuffled queue; a queue is reshuffled when it
    runs out, so batches stay balanced for any batch size.
    """

    def __init__(self, D: Dataset, rng: np.random.Generator):
        self.pools = D.class_indices()
        if any(len(p) == 0 for p in self.pools):
            raise ValueError("every class needs at least one point")
        self.rng = rng
        self.queues = [rng.permutation(p) for p in self.pools]
        self.num_classes = D.num_classes

    def _take(self, c: int, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if len(self.queues[c]) == 0:
                self.queues[c] = self.rng.permutation(self.pools[c])
            take = self.queues[c][:k]
            self.queues[c] = self.queues[c][k:]
            out.append(take)
            k -= len(take)
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)

    def indices(self, m: int) -> np.ndarray:
        counts = per_class_counts(m, self.num_classes, self.rng)
        return np.concatenate([self._take(c, k) for c, k in enumerate(counts)])


# ---------------------------------------------------------------- corruption

def corrupted_count(rho: float, d: int) -> int:
    """ceil(rho * d), robust to representation error in rho * d."""
    return int(math.ceil(round(rho * d, 9)))


def make_corruption(shape, rho: float, scheme: str, rng: np.random.Generator):
    """Freeze ceil(rho * d) random coordinates per row.

    Returns ``(mask, values)``; ``values`` holds noise in [-1, 1] (scheme
    "uniform") or zeros (scheme "zero") at frozen coordinates and 0 elsewhere.
    The draws depend only on ``shape``, ``rho`` and ``rng``.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    scheme = "uniform" if scheme == "uniform-noise" else scheme
    if scheme not in CORRUPTION_SCHEMES:
        raise ValueError(f"unknown corruption scheme {scheme!r}")
    n, d = shape
    k = corrupted_count(rho, d)
    frozen = np.zeros((n, d), dtype=bool)
    for i in range(n):
        frozen[i, rng.choice(d, k, replace=False)] = True
    noise = rng.uniform(-1.0, 1.0, size=(n, d))
    values = np.where(frozen, noise if scheme == "uniform" else 0.0, 0.0)
    return CorruptionMask(frozen, rho, scheme), values


# -------------------------------------------------------------- augmentation

@dataclass
class AugmentOptions:
    flip: bool = False
    shift_px: int = 0
    rot_deg: float = 0.0

    @classmethod
    def default_for(cls, image_shape) -> "AugmentOptions":
        return cls(flip=True, shift_px=2 if image_shape[0] <= 28 else 4, rot_deg=10.0)

    @property
    def active(self) -> bool:
        return self.flip or self.shift_px > 0 or self.rot_deg > 0


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1]


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation (down by dy, right by dx) with zero fill."""
    H, W = img.shape[:2]
    out = np.zeros_like(img)
    src = img[max(0, -dy):H - max(0, dy), max(0, -dx):W - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotation about the center, nearest-neighbor resampling, zero fill."""
    return scipy.ndimage.rotate(img, degrees, axes=(1, 0), reshape=False, order=0,
                                mode="constant", cval=0.0)


def augment(batch: Dataset, rng: np.random.Generator, options: AugmentOptions,
            image_shape=None) -> Dataset:
    """Independent random flip / shift / rotation per image; labels unchanged."""
    if not options.active:
        return batch
    shape = image_shape or batch.image_shape
    if shape is None or math.prod(shape) != batch.d:
        raise ValueError(f"cannot view {batch.d} features as an image of shape {shape}")
    imgs = batch.X.reshape((batch.n,) + tuple(shape)).copy()
    for i in range(batch.n):
        img = imgs[i]
        if options.flip and rng.random() < 0.5:
            img = flip_horizontal(img)
        if options.shift_px > 0:
            dy, dx = rng.integers(-options.shift_px, options.shift_px + 1, size=2)
            img = shift_image(img, int(dy), int(dx))
        if options.rot_deg > 0:
            img = rotate_image(img, rng.uniform(-options.rot_deg, options.rot_deg))
        imgs[i] = img
    return Dataset(imgs.reshape(batch.n, -1), batch.y, batch.labels, batch.num_classes, shape)

"""Datasets, file ingestion and deterministic batch streams."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError

_MASK64 = (1 << 64) - 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def mix_seed(seed: int, *keys: int) -> int:
    """Derive a 64-bit child seed with the splitmix64 finaliser.

    Each key is folded in with a golden-ratio increment followed by the
    splitmix avalanche, so ``mix_seed(s, k)`` for distinct ``k`` gives
    unrelated streams while staying reproducible.
    """
    z = seed & _MASK64
    for k in keys:
        z = (z + (k + 1) * 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
    return z


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(mix_seed(seed, *keys))


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float32)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or len(x) == 0:
            raise UsageError(f"inputs must be a non-empty [n, d] array, got {x.shape}")
        if y.shape != (len(x),):
            raise UsageError(f"expected {len(x)} labels, got shape {y.shape}")
        if not np.isfinite(x).all():
            raise UsageError("inputs contain non-finite values")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise UsageError(f"labels must lie in [0, {self.num_classes - 1}]")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def make_gaussian_blobs(
    K: int = 4,
    clusters_per_class: int = 2,
    n_train: int = 4096,
    n_test: int = 4096,
    d: int = 2,
    spread: float = 0.3,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Class-conditional isotropic Gaussian mixtures.

    Cluster centres are drawn once, uniformly in ``[-1, 1]^d``; every cluster
    gets the same share of points (sizes round down). Returns ``(train, test)``.
    """
    if K < 2 or d < 2:
        raise UsageError("need K >= 2 and d >= 2")
    centers = rng_for(seed, 0).uniform(-1.0, 1.0, size=(K, clusters_per_class, d))
    prov = {
        "generator": "gaussian_blobs",
        "K": K,
        "clusters_per_class": clusters_per_class,
        "d": d,
        "spread": spread,
        "seed": seed,
    }

    def sample(n, key, split):
        per = max(n // (K * clusters_per_class), 1)
        rng = rng_for(seed, key)
        lab = np.repeat(np.arange(K), clusters_per_class * per)
        mu = np.repeat(centers.reshape(-1, d), per, axis=0)
        x = mu + spread * rng.standard_normal(mu.shape)
        return Dataset(x, lab, K, split, dict(prov, n=len(lab)))

    return sample(n_train, 1, "train"), sample(n_test, 2, "test")


def blob_centers(dataset: Dataset) -> np.ndarray:
    """Centres ``[K, C, d]`` used to generate a blobs dataset."""
    p = dataset.provenance
    return rng_for(p["seed"], 0).uniform(-1.0, 1.0, size=(p["K"], p["clusters_per_class"], p["d"]))


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise FormatError(f"{path}: payload has {len(body)} bytes, header implies {expected}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Read an MNIST-style IDX image/label pair; pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[0] == 0:
        raise FormatError("IDX files hold no records")
    n, h, w = images.shape
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(
        images.reshape(n, h * w).astype(np.float32) / 255.0,
        labels.astype(np.int64),
        k,
        split,
        {"source": str(images_path), "image_shape": [h, w]},
    )


def load_csv(path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Header row, float features, integer label in the last column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise FormatError(f"{path}: expected a header and at least one row")
    try:
        body = [[float(v) for v in r[:-1]] + [int(r[-1])] for r in rows[1:] if r]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if len({len(r) for r in body}) != 1:
        raise FormatError(f"{path}: ragged rows")
    arr = np.asarray(body, dtype=np.float64)
    labels = arr[:, -1].astype(np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(arr[:, :-1], labels, k, split, {"source": str(path), "columns": rows[0]})


@dataclass
class BatchStream:
    """Seeded shuffling plus input augmentation over one dataset.

    Epoch ``e`` visits ``permutation(n)`` drawn from ``mix(shuffle_seed, e)``;
    the jitter of step ``s`` is drawn from ``mix(aug_seed, e, s)``. Flips apply
    only when the dataset records an ``image_shape``.
    """

    dataset: Dataset
    batch_size: int
    shuffle_seed: int
    aug_seed: int
    jitter: float = 0.0
    flip: bool = False
    _order_epoch: int = field(default=-1, repr=False)
    _order: np.ndarray | None = field(default=None, repr=False)

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def epoch_order(self, epoch: int) -> np.ndarray:
        if epoch != self._order_epoch:
            self._order = rng_for(self.shuffle_seed, epoch).permutation(len(self.dataset))
            self._order_epoch = epoch
        return self._order

    def indices(self, epoch: int, step: int) -> np.ndarray:
        if not 0 <= step < self.steps_per_epoch:
            raise UsageError(f"step {step} outside [0, {self.steps_per_epoch})")
        return self.epoch_order(epoch)[step * self.batch_size : (step + 1) * self.batch_size]


def next_batch(stream: BatchStream, epoch: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    idx = stream.indices(epoch, step)
    x = stream.dataset.inputs[idx]
    y = stream.dataset.labels[idx]
    if stream.jitter > 0 or stream.flip:
        rng = rng_for(stream.aug_seed, epoch, step)
        x = x.copy()
        if stream.jitter > 0:
            x += (stream.jitter * rng.standard_normal(x.shape)).astype(np.float32)
        shape = stream.dataset.provenance.get("image_shape")
        if stream.flip and shape is not None:
            flip = rng.random(len(x)) < 0.5
            h, w = shape
            imgs = x.reshape(len(x), h, w)
            imgs[flip] = imgs[flip, :, ::-1]
            x = imgs.reshape(len(x), h * w)
    return x, y

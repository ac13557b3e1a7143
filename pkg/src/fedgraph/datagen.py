"""Synthetic datasets and non-i.i.d. client partitioning."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedgraph.errors import CheckpointError, ConfigError

TASKS = ("classification", "segmentation")


@dataclass(frozen=True)
class Dataset:
    """Inputs stacked along axis 0.

    Classification targets are int64 class ids; segmentation targets are
    per-pixel binary masks of shape ``(n, hw, hw)``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    task: str
    n_classes: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if len(self.inputs) == 0:
            raise ConfigError("dataset is empty")
        if len(self.inputs) != len(self.targets):
            raise ConfigError("inputs and targets differ in length")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.targets[idx], self.task, self.n_classes)

    @property
    def labels(self) -> np.ndarray:
        """Class ids used for label-skew; segmentation data has a single class."""
        if self.task == "classification":
            return self.targets
        return np.zeros(len(self), dtype=np.int64)


@dataclass(frozen=True)
class Partition:
    shards: tuple[np.ndarray, ...]

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.shards]

    def __len__(self):
        return len(self.shards)


def make_classification(n, classes, dim, seed, separation=3.0, noise=1.0) -> Dataset:
    """Gaussian clusters around random centroids scaled by ``separation``.

    The first ``classes`` samples cover every class once; the rest draw
    labels uniformly.
    """
    if not n >= classes >= 2:
        raise ConfigError(f"need n >= classes >= 2, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    centroids = separation * rng.standard_normal((classes, dim))
    labels = np.concatenate([np.arange(classes), rng.integers(0, classes, n - classes)])
    labels = rng.permutation(labels)
    x = centroids[labels] + noise * rng.standard_normal((n, dim))
    return Dataset(x, labels.astype(np.int64), "classification", classes)


def class_centroids(ds: Dataset) -> np.ndarray:
    return np.stack([ds.inputs[ds.targets == c].mean(axis=0) for c in range(ds.n_classes)])


def disk_mask(hw, cy, cx, radius) -> np.ndarray:
    yy, xx = np.mgrid[:hw, :hw]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def make_toy_segmentation(n, hw, seed, radius=(1, None), noise=0.1) -> Dataset:
    """``hw x hw`` single-channel images each holding one bright disk.

    ``radius`` is an inclusive ``(lo, hi)`` range; ``hi=None`` means ``hw // 4``.
    A radius of 0 yields a single-pixel blob.
    """
    if hw < 8:
        raise ConfigError(f"image size must be >= 8, got {hw}")
    lo, hi = radius
    hi = hw // 4 if hi is None else hi
    if not 0 <= lo <= hi:
        raise ConfigError(f"bad radius range {radius}")
    rng = np.random.default_rng(seed)
    images = np.empty((n, hw, hw, 1))
    masks = np.empty((n, hw, hw), dtype=np.float64)
    for i in range(n):
        r = int(rng.integers(lo, hi + 1))
        cy, cx = rng.integers(r, hw - r, size=2)
        m = disk_mask(hw, cy, cx, r)
        masks[i] = m
        images[i, ..., 0] = m + noise * rng.standard_normal((hw, hw))
    return Dataset(images, masks, "segmentation")


def _split_counts(n, weights) -> np.ndarray:
    """Integer counts summing to ``n``, proportional to ``weights`` (largest remainder)."""
    w = np.asarray(weights, dtype=np.float64)
    raw = n * w / w.sum()
    counts = np.floor(raw).astype(np.int64)
    rest = n - counts.sum()
    # ties broken by lower index
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def geometric_weights(K, gamma) -> np.ndarray:
    return gamma ** np.arange(K, dtype=np.float64)


def partition_noniid(
    ds: Dataset,
    K: int,
    seed: int,
    dirichlet_beta: float | None = 0.5,
    size_skew: float | None = 1.3,
    max_retries: int = 100,
) -> Partition:
    """Split ``ds`` into ``K`` disjoint, covering, non-empty shards.

    ``size_skew`` (gamma >= 1) makes expected shard sizes a geometric
    progression; ``dirichlet_beta`` draws each class's spread over clients
    from Dirichlet(beta). Either may be ``None`` to disable it. Draws that leave
    a client empty are repeated up to ``max_retries`` times; after that, empty
    clients take one sample each from the currently largest shard.
    """
    n = len(ds)
    if K < 1 or K > n:
        raise ConfigError(f"cannot split {n} samples across K={K} clients")
    if dirichlet_beta is not None and dirichlet_beta <= 0:
        raise ConfigError(f"dirichlet beta must be > 0, got {dirichlet_beta}")
    if size_skew is not None and size_skew < 1:
        raise ConfigError(f"size skew gamma must be >= 1, got {size_skew}")

    rng = np.random.default_rng(seed)
    size_w = geometric_weights(K, size_skew) if size_skew is not None else np.ones(K)
    size_w = size_w / size_w.sum()
    labels = ds.labels

    for _ in range(max_retries):
        shards = [[] for _ in range(K)]
        if dirichlet_beta is None:
            perm = rng.permutation(n)
            bounds = np.cumsum(_split_counts(n, size_w))[:-1]
            for k, part in enumerate(np.split(perm, bounds)):
                shards[k].extend(part.tolist())
        else:
            for c in np.unique(labels):
                idx = rng.permutation(np.flatnonzero(labels == c))
                p = rng.dirichlet(np.full(K, dirichlet_beta)) * size_w
                bounds = np.cumsum(_split_counts(len(idx), p))[:-1]
                for k, part in enumerate(np.split(idx, bounds)):
                    shards[k].extend(part.tolist())
        if all(shards):
            break
    else:
        for k in range(K):
            if not shards[k]:
                donor = max(range(K), key=lambda j: (len(shards[j]), -j))
                shards[k].append(shards[donor].pop())
    return Partition(tuple(np.sort(np.asarray(s, dtype=np.int64)) for s in shards))


def train_val_split(ds: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random disjoint split with ``round(ratio * n)`` (half-up) training samples."""
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(ds)
    n_train = int(np.floor(ratio * n + 0.5))
    if not 0 < n_train < n:
        raise ConfigError(f"split of {n} samples at ratio {ratio} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def label_histogram(ds: Dataset, idx=None) -> np.ndarray:
    labels = ds.labels if idx is None else ds.labels[idx]
    return np.bincount(labels, minlength=max(ds.n_classes, 1))


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())


def write_partition_csv(ds: Dataset, part: Partition, path) -> None:
    n_cls = ds.n_classes if ds.task == "classification" else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "N_k"] + [f"class_{c}" for c in range(n_cls)])
        for k, shard in enumerate(part.shards):
            counts = label_histogram(ds, shard).tolist()[:n_cls] if n_cls else []
            w.writerow([k, len(shard)] + counts)


# ---------------------------------------------------------------- binary dump

DS_MAGIC = b"FGDS"
DS_VERSION = 1


def _pack_array(a: np.ndarray, code: str) -> bytes:
    head = struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return head + np.ascontiguousarray(a).astype(code).tobytes()


def dumps_dataset(ds: Dataset) -> bytes:
    target_code = "<i8" if ds.task == "classification" else "<f8"
    return b"".join([
        DS_MAGIC,
        struct.pack("<IBI", DS_VERSION, TASKS.index(ds.task), ds.n_classes),
        _pack_array(ds.inputs, "<f8"),
        _pack_array(ds.targets, target_code),
    ])


def loads_dataset(data: bytes) -> Dataset:
    if data[:4] != DS_MAGIC:
        raise CheckpointError("not a dataset dump (bad magic bytes)")
    try:
        version, task_tag, n_classes = struct.unpack_from("<IBI", data, 4)
        if version != DS_VERSION:
            raise CheckpointError(f"unsupported dataset version {version}")
        task = TASKS[task_tag]
        pos = 13
        arrays = []
        for code in ("<f8", "<i8" if task == "classification" else "<f8"):
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            count = int(np.prod(shape))
            if pos + 8 * count > len(data):
                raise CheckpointError("dataset dump is truncated")
            arrays.append(np.frombuffer(data, code, count, pos).reshape(shape).copy())
            pos += 8 * count
    except (struct.error, IndexError) as exc:
        raise CheckpointError(f"corrupt dataset dump: {exc}") from None
    return Dataset(arrays[0], arrays[1], task, n_classes)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())

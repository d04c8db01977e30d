"""Datasets, Dirichlet non-IID partitioning, augmentation and round batching.

Every operation here is a pure function of its inputs and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
PARTITION_HEADER = "GKT-PARTITION v1"


@dataclass
class Dataset:
    """Images in NCHW float32 (raw scale) with integer labels.

    ``mean``/``std`` are the per-channel normalization constants; the test
    split carries the constants of its training split.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        if self.mean is None:
            self.mean, self.std = channel_stats(self.images)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def normalized(self, idx=None) -> np.ndarray:
        x = self.images if idx is None else self.images[idx]
        return normalize(x, self.mean, self.std)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(x: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return ((x - mean) / std).astype(np.float32)


# -- CIFAR-10 binary format ----------------------------------------------------

def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch into uint8 images (N,3,32,32) and labels."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ValueError(f"{path}: label byte {labels.max()} out of range for 10 classes")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(path) -> tuple[Dataset, Dataset]:
    """Load ``data_batch_1..5.bin`` and ``test_batch.bin`` from ``path``."""
    root = Path(path)
    missing = [f for f in (*CIFAR_TRAIN_FILES, CIFAR_TEST_FILE) if not (root / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{root}: missing CIFAR-10 files {missing}")
    parts = [read_cifar10_file(root / f) for f in CIFAR_TRAIN_FILES]
    x = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    y = np.concatenate([p[1] for p in parts])
    xt, yt = read_cifar10_file(root / CIFAR_TEST_FILE)
    train = Dataset(x, y, 10, "train")
    test = Dataset(xt.astype(np.float32) / 255.0, yt, 10, "test", mean=train.mean, std=train.std)
    return train, test


# -- synthetic data ---------------------------------------------------------------

def synthetic_dataset(
    num_classes: int = 4,
    per_class: int = 200,
    image_size: int = 8,
    *,
    noise: float = 1.0,
    seed: int = 0,
    channels: int = 3,
    split: str = "train",
) -> Dataset:
    """Gaussian class templates plus isotropic noise.

    Templates depend only on ``seed``, so the train and test splits of the
    same seed share them; samples are drawn from a stream keyed by split.
    """
    shape = (channels, image_size, image_size)
    templates = np.random.default_rng(seed).normal(size=(num_classes, *shape))
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = np.repeat(np.arange(num_classes), per_class)
    rng.shuffle(labels)
    images = templates[labels] + noise * rng.normal(size=(len(labels), *shape))
    return Dataset(images.astype(np.float32), labels, num_classes, split)


def synthetic_pair(num_classes=4, per_class=200, image_size=8, *, noise=1.0, seed=0, test_per_class=None,
                   channels=3) -> tuple[Dataset, Dataset]:
    train = synthetic_dataset(num_classes, per_class, image_size, noise=noise, seed=seed, channels=channels)
    test = synthetic_dataset(num_classes, test_per_class or per_class, image_size, noise=noise, seed=seed,
                             channels=channels, split="test")
    test.mean, test.std = train.mean, train.std
    return train, test


# -- Dirichlet partition ----------------------------------------------------------

@dataclass
class PartitionPlan:
    indices: list
    class_counts: Optional[np.ndarray]
    alpha: float
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.indices)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.indices])

    def __eq__(self, other):
        if not isinstance(other, PartitionPlan):
            return NotImplemented
        return (
            self.alpha == other.alpha and self.seed == other.seed
            and len(self.indices) == len(other.indices)
            and all(np.array_equal(a, b) for a, b in zip(self.indices, other.indices))
        )


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing exactly to ``total``, closest to ``proportions * total``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short:
        # stable sort: ties go to the lower client index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, num_clients: int, alpha: float, seed: int = 0, num_classes: int | None = None,
                        min_size: int = 0, max_tries: int = 1000) -> PartitionPlan:
    """Split sample indices across clients with per-class Dirichlet(alpha) proportions.

    With ``min_size > 0`` the whole draw is repeated (same RNG stream) until
    every client holds at least that many samples.
    """
    if isinstance(labels, Dataset):
        num_classes = labels.num_classes if num_classes is None else num_classes
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if num_clients < 1:
        raise ValueError(f"need at least one client, got {num_clients}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if num_clients > n:
        raise ValueError(f"cannot split {n} samples over {num_clients} clients")
    if min_size * num_clients > n:
        raise ValueError(f"min_size={min_size} is infeasible for {n} samples over {num_clients} clients")
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes

    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        buckets = [[] for _ in range(num_clients)]
        counts = np.zeros((num_clients, num_classes), dtype=np.int64)
        for c in range(num_classes):
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            share = largest_remainder(rng.dirichlet(np.full(num_clients, alpha)), len(idx))
            counts[:, c] = share
            for k, part in enumerate(np.split(idx, np.cumsum(share)[:-1])):
                buckets[k].append(part)
        if counts.sum(axis=1).min() >= min_size:
            break
    else:
        raise RuntimeError(f"no partition with min_size={min_size} after {max_tries} draws")
    indices = [np.sort(np.concatenate(b)) if b else np.zeros(0, np.int64) for b in buckets]
    return PartitionPlan(indices, counts, float(alpha), int(seed))


def class_count_matrix(plan: PartitionPlan, labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([np.bincount(labels[ix], minlength=num_classes) for ix in plan.indices])


def format_partition(plan: PartitionPlan) -> str:
    lines = [PARTITION_HEADER, f"# alpha={plan.alpha!r} seed={plan.seed}"]
    for k, ix in enumerate(plan.indices):
        lines.append(f"{k}: " + ",".join(str(int(i)) for i in ix))
    return "\n".join(lines) + "\n"


def write_partition(plan: PartitionPlan, path) -> None:
    Path(path).write_text(format_partition(plan))


def read_partition(path, labels=None, num_classes: int | None = None) -> PartitionPlan:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != PARTITION_HEADER:
        raise ValueError(f"{path}: missing '{PARTITION_HEADER}' header")
    alpha, seed = float("nan"), -1
    rows = {}
    for line in text[1:]:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key == "alpha":
                    alpha = float(val)
                elif key == "seed":
                    seed = int(val)
            continue
        cid, sep, rest = line.partition(":")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        rest = rest.strip()
        rows[int(cid)] = np.array([int(v) for v in rest.split(",")] if rest else [], dtype=np.int64)
    if sorted(rows) != list(range(len(rows))):
        raise ValueError(f"{path}: client ids must be 0..K-1, got {sorted(rows)}")
    indices = [rows[k] for k in range(len(rows))]
    plan = PartitionPlan(indices, None, alpha, seed)
    if labels is not None:
        nc = num_classes if num_classes is not None else int(np.max(labels)) + 1
        plan.class_counts = class_count_matrix(plan, labels, nc)
    return plan


# -- augmentation -------------------------------------------------------------------

def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[..., ::-1].copy()


def augment(batch: np.ndarray, rng: np.random.Generator, policy: str, mean, std, pad: int = 4,
            flip_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Train: reflect-pad, random crop back to size, random flip, normalize. Eval: normalize."""
    if policy not in ("train", "eval"):
        raise ValueError(f"policy must be train or eval, got {policy!r}")
    x = np.asarray(batch, dtype=np.float32)
    if policy == "train":
        n, _, h, w = x.shape
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        oy = rng.integers(0, 2 * pad + 1, size=n)
        ox = rng.integers(0, 2 * pad + 1, size=n)
        x = np.stack([padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w] for i in range(n)])
        flips = rng.random(n) < 0.5 if flip_mask is None else np.asarray(flip_mask, dtype=bool)
        x[flips] = x[flips][..., ::-1]
    return normalize(x, mean, std)


# -- per-round batching ---------------------------------------------------------------

class BatchCursor:
    """The frozen sample order of one client for one communication round.

    Batch ``b_idx`` always denotes the same samples, so server logits keyed
    by ``b_idx`` can be mapped back to samples.
    """

    def __init__(self, order: np.ndarray, batch_size: int):
        if batch_size < 1:
            raise ValueError(f"batch size must be positive, got {batch_size}")
        self.order = np.asarray(order, dtype=np.int64)
        self.batch_size = batch_size
        self.position = 0

    def __len__(self) -> int:
        return -(-len(self.order) // self.batch_size)

    def batch(self, b_idx: int) -> np.ndarray:
        if not 0 <= b_idx < len(self):
            raise IndexError(f"batch {b_idx} out of range for {len(self)} batches")
        return self.order[b_idx * self.batch_size:(b_idx + 1) * self.batch_size]

    def __iter__(self) -> Iterator[tuple[int, np.ndarray]]:
        for b in range(len(self)):
            yield b, self.batch(b)

    def next(self) -> tuple[int, np.ndarray]:
        if self.position >= len(self):
            raise StopIteration
        b = self.position
        self.position += 1
        return b, self.batch(b)

    def reset(self) -> None:
        self.position = 0

    def batch_sizes(self) -> list[int]:
        return [len(self.batch(b)) for b in range(len(self))]


def round_batches(indices: Sequence[int], batch_size: int, seed: int, round_: int, stream: int = 0) -> BatchCursor:
    """Shuffle ``indices`` once for ``(seed, stream, round)``; keep the last partial batch."""
    order = np.array(indices, dtype=np.int64, copy=True)
    np.random.default_rng([seed, stream, round_]).shuffle(order)
    return BatchCursor(order, batch_size)

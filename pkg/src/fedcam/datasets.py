"""Synthetic labeled images and their distribution across clients.

Classes are distinct deterministic textures (stripes, checkers, rings,
dots...) rather than positioned objects, so a small conv net with global
average pooling can separate them, plus Gaussian pixel noise clamped to
[0, 1]. Partitioning supports IID equal shards and per-class Dirichlet
allocation for non-IID regimes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

_HEADER_LEN = struct.Struct("<Q")


def _stripes(hw, period, orientation):
    i, j = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    axis = {"h": i, "v": j, "d": i + j, "a": i - j}[orientation]
    return (axis % period) < period // 2


def _pattern(c: int, hw: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    mid, q = hw // 2, hw // 4
    builders = [
        lambda: _stripes(hw, 4, "h"),
        lambda: _stripes(hw, 4, "v"),
        lambda: _stripes(hw, 4, "d"),
        lambda: _stripes(hw, 4, "a"),
        lambda: ((i // 2) + (j // 2)) % 2 == 0,              # coarse checker
        lambda: (i % 4 < 2) & (j % 4 < 2),                   # dot lattice
        lambda: (abs(i - mid) < q) & (abs(j - mid) < q),     # solid center
        lambda: (np.minimum(np.minimum(i, j), np.minimum(hw - 1 - i, hw - 1 - j)) < 2),  # border ring
        lambda: (abs(i - mid) < 2) | (abs(j - mid) < 2),     # cross bands
        lambda: (i + j) % 2 == 0,                            # fine checker
        lambda: _stripes(hw, 8, "h"),
        lambda: _stripes(hw, 8, "v"),
        lambda: _stripes(hw, 8, "d"),
        lambda: _stripes(hw, 8, "a"),
        lambda: (abs(i - j) < 2) | (abs(i + j - hw + 1) < 2),  # X
        lambda: ((i // 4) + (j // 4)) % 2 == 0,              # block checker
    ]
    if c >= len(builders):
        # deterministic pseudo-random binary texture keyed by the class index
        rng = np.random.default_rng(np.random.SeedSequence([0xC1A55, c]))
        return rng.random((hw, hw)) < 0.5
    return builders[c]()


def class_template(c: int, hw: int = 16) -> np.ndarray:
    """Deterministic noise-free image for class c: 0.9 foreground on 0.1."""
    return np.where(_pattern(c, hw), 0.9, 0.1)


@dataclass
class Dataset:
    """Labeled image collection; images (n, 1, hw, hw) float64 in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels lengths differ")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_hw(self) -> int:
        return self.images.shape[-1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass
class Partition:
    """Disjoint per-client index shards over a dataset plus the data sizes
    each client reports for aggregation weighting."""

    client_indices: list[np.ndarray]
    claimed_sizes: np.ndarray

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


def generate_synthetic(num_classes: int = 10, samples_per_class: int = 265,
                       noise_sigma: float = 0.05, seed: int = 0,
                       hw: int = 16) -> Dataset:
    """Build the desk-scale dataset: per-class texture template + noise."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    templates = np.stack([class_template(c, hw) for c in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    images = templates[labels][:, None, :, :]
    if noise_sigma > 0:
        images = images + rng.normal(0.0, noise_sigma, images.shape)
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images, labels, num_classes)


def nearest_template_accuracy(dataset: Dataset) -> float:
    """Classifier that picks the closest class template; kept as a sanity
    reference for how separable the generated data is."""
    templates = np.stack([class_template(c, dataset.image_hw)
                          for c in range(dataset.num_classes)])
    flat = dataset.images[:, 0].reshape(len(dataset), -1)
    tflat = templates.reshape(dataset.num_classes, -1)
    d2 = ((flat[:, None, :] - tflat[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == dataset.labels))


def stratified_split(dataset: Dataset, test_fraction: float = 0.2,
                     seed: int = 0):
    """Per-class shuffled holdout; returns (train_indices, test_indices)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    train, test = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = rng.permutation(idx)
        n_test = int(round(len(idx) * test_fraction))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def partition_iid(dataset: Dataset, num_clients: int, seed: int = 0,
                  indices=None) -> Partition:
    """Random equal-size (+-1) disjoint shards over `indices` (default all)."""
    pool = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if num_clients > len(pool):
        raise ValueError("more clients than samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11D]))
    order = rng.permutation(pool)
    shards = [np.sort(s) for s in np.array_split(order, num_clients)]
    return Partition(shards, np.array([len(s) for s in shards]))


def partition_dirichlet(dataset: Dataset, num_clients: int, alpha: float,
                        seed: int = 0, indices=None,
                        max_tries: int = 1000) -> Partition:
    """Per-class client proportions drawn from Dirichlet(alpha); smaller
    alpha concentrates classes on fewer clients. Redraws until every client
    holds at least one sample."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    pool = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if num_clients > len(pool):
        raise ValueError("more clients than samples")
    labels = dataset.labels[pool]
    for attempt in range(max_tries):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, 0xD112, attempt]))
        shards = [[] for _ in range(num_clients)]
        for c in range(dataset.num_classes):
            cls_idx = rng.permutation(pool[labels == c])
            if len(cls_idx) == 0:
                continue
            props = rng.dirichlet(np.full(num_clients, alpha))
            counts = _largest_remainder_counts(props, len(cls_idx))
            start = 0
            for client, cnt in enumerate(counts):
                shards[client].extend(cls_idx[start:start + cnt])
                start += cnt
        if all(len(s) > 0 for s in shards):
            shards = [np.sort(np.array(s, dtype=int)) for s in shards]
            return Partition(shards, np.array([len(s) for s in shards]))
    raise RuntimeError(
        f"could not give every client a sample in {max_tries} draws; "
        f"alpha={alpha} is too small for {num_clients} clients")


def _largest_remainder_counts(proportions: np.ndarray, n: int) -> np.ndarray:
    """Integer counts summing to n, closest to proportions * n."""
    raw = proportions * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


# ---------------------------------------------------------------------------
# binary container: u64 header length, JSON header, labels (i64), images (f64)


def save_dataset(dataset: Dataset, path):
    header = json.dumps(
        {"n": len(dataset), "num_classes": dataset.num_classes,
         "shape": list(dataset.images.shape)}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER_LEN.pack(len(header)))
        fh.write(header)
        fh.write(dataset.labels.astype("<i8").tobytes())
        fh.write(dataset.images.astype("<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    (hlen,) = _HEADER_LEN.unpack_from(raw, 0)
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    n = header["n"]
    shape = tuple(header["shape"])
    off = 8 + hlen
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=off)
    off += labels.nbytes
    images = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)),
                           offset=off).reshape(shape)
    return Dataset(images.astype(np.float64), labels.astype(np.int64),
                   header["num_classes"])

"""Synthetic datasets, client partitioning, EL2N scoring and dataset pruning."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ParamSet, PromptParams, connect_head_tail
from .tensor import as_array


@dataclass
class Dataset:
    """Token-sequence samples with integer class labels."""

    features: np.ndarray  # (n, seq_len, input_dim) float64
    labels: np.ndarray    # (n,) int64
    n_classes: int

    def __post_init__(self):
        self.features = as_array(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 3 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"features {self.features.shape} inconsistent with {self.labels.shape[0]} labels"
            )
        if len(self) == 0:
            raise ValueError("dataset must be non-empty")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        return self.features[i], int(self.labels[i])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx].copy(), self.labels[idx].copy(), self.n_classes)


@dataclass
class PartitionPlan:
    """Per-client index sets into a parent dataset: disjoint, covering, non-empty."""

    client_indices: list[np.ndarray]

    def __post_init__(self):
        self.client_indices = [np.asarray(ix, dtype=np.int64) for ix in self.client_indices]

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def check(self, n_samples: int) -> None:
        all_idx = np.concatenate(self.client_indices) if self.client_indices else np.array([], dtype=np.int64)
        if len(np.unique(all_idx)) != len(all_idx):
            raise ValueError("partition has overlapping client index sets")
        if len(all_idx) != n_samples or (len(all_idx) and (all_idx.min() < 0 or all_idx.max() >= n_samples)):
            raise ValueError("partition does not cover the parent dataset exactly")
        if any(len(ix) == 0 for ix in self.client_indices):
            raise ValueError("partition assigns an empty set to some client")


def class_means(config: ModelConfig, class_separation: float, seed: int) -> np.ndarray:
    """Class centers on a sphere of radius `class_separation` (random directions)."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((config.n_classes, config.input_dim))
    return class_separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def gen_synthetic(
    n_samples: int,
    config: ModelConfig,
    class_separation: float,
    seed: int,
    means_seed: int | None = None,
) -> Dataset:
    """Per-class Gaussian token clusters.

    Tokens get unit-variance noise around the class center and labels are
    assigned round-robin, so class counts differ by at most one. Two splits of
    the same task (train/test) must share `means_seed`; it defaults to `seed`.
    """
    if n_samples < config.n_classes:
        raise ValueError(f"need n_samples >= n_classes, got {n_samples} < {config.n_classes}")
    means = class_means(config, class_separation, seed if means_seed is None else means_seed)
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples, dtype=np.int64) % config.n_classes
    noise = rng.standard_normal((n_samples, config.seq_len, config.input_dim))
    features = means[labels][:, None, :] + noise
    return Dataset(features, labels, config.n_classes)


def partition_iid(dataset: Dataset, n_clients: int, seed: int) -> PartitionPlan:
    """Random shuffle, then near-equal contiguous chunks (sizes differ by <= 1)."""
    if n_clients < 1 or n_clients > len(dataset):
        raise ValueError(f"n_clients must be in [1, {len(dataset)}], got {n_clients}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    plan = PartitionPlan(list(np.array_split(order, n_clients)))
    plan.check(len(dataset))
    return plan


def partition_dirichlet(
    dataset: Dataset, n_clients: int, concentration: float, seed: int
) -> PartitionPlan:
    """Per class, draw client proportions from a symmetric Dirichlet and allot
    that class's samples by largest-remainder rounding. Clients left empty get
    one sample moved over from whichever client is largest.
    """
    if concentration <= 0:
        raise ValueError(f"concentration must be > 0, got {concentration}")
    if n_clients < 1 or n_clients > len(dataset):
        raise ValueError(f"n_clients must be in [1, {len(dataset)}], got {n_clients}")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(dataset.n_classes):
        class_idx = np.flatnonzero(dataset.labels == c)
        if len(class_idx) == 0:
            continue
        class_idx = rng.permutation(class_idx)
        props = rng.dirichlet(np.full(n_clients, concentration))
        counts = _largest_remainder(props, len(class_idx))
        start = 0
        for k, cnt in enumerate(counts):
            buckets[k].extend(class_idx[start:start + cnt].tolist())
            start += cnt
    # repair empties: move one sample from the current largest client
    for k in range(n_clients):
        while not buckets[k]:
            donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
            if len(buckets[donor]) <= 1:
                raise ValueError("cannot repair empty client: not enough samples")
            buckets[k].append(buckets[donor].pop())
    plan = PartitionPlan([np.sort(np.asarray(b, dtype=np.int64)) for b in buckets])
    plan.check(len(dataset))
    return plan


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        remainders = raw - counts
        # ties broken toward the lower client index
        order = np.lexsort((np.arange(len(counts)), -remainders))
        counts[order[:short]] += 1
    return counts


# ---------------------------------------------------------------------------
# EL2N scoring and pruning
# ---------------------------------------------------------------------------

def el2n_from_probs(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """L2 norm of (probability vector - one-hot label) per row."""
    probs = as_array(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(f"labels must lie in [0, {probs.shape[1]})")
    err = probs.copy()
    err[np.arange(len(labels)), labels] -= 1.0
    return np.linalg.norm(err, axis=1)


def el2n_scores(
    head: ParamSet,
    tail: ParamSet,
    dataset: Dataset,
    config: ModelConfig,
    prompt: PromptParams | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Per-sample EL2N over the connected head+tail path.

    Pass prompt=None (the default) to score without prompt rows.
    """
    scores = np.empty(len(dataset))
    for start in range(0, len(dataset), batch_size):
        batch = dataset.features[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits, _ = connect_head_tail(head, tail, prompt, batch, config)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        scores[start:start + len(labels)] = el2n_from_probs(probs, labels)
    return scores


def prune_indices(scores: np.ndarray, gamma: float) -> np.ndarray:
    """Indices (ascending) of the ceil((1-gamma)*n) highest-scoring samples.

    gamma is the fraction REMOVED. Score ties break toward the lower index.
    """
    if not (0.0 <= gamma < 1.0):
        raise ValueError(f"pruning fraction gamma must lie in [0, 1), got {gamma}")
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    keep = int(np.ceil((1.0 - gamma) * n))
    order = np.lexsort((np.arange(n), -scores))  # score desc, index asc
    return np.sort(order[:keep])


def prune(dataset: Dataset, scores: np.ndarray, gamma: float) -> Dataset:
    if len(scores) != len(dataset):
        raise ValueError(f"{len(scores)} scores for {len(dataset)} samples")
    return dataset.subset(prune_indices(scores, gamma))


# ---------------------------------------------------------------------------
# dataset CSV round-trip
# ---------------------------------------------------------------------------

def save_dataset_csv(dataset: Dataset, path) -> None:
    """One row per (sample, token); floats at 17 significant digits for lossless round-trips."""
    d = dataset.features.shape[2]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "token_index"] + [f"feature_{j}" for j in range(d)] + ["label"])
        for i in range(len(dataset)):
            for t in range(dataset.features.shape[1]):
                row = [i, t] + [format(x, ".17g") for x in dataset.features[i, t]] + [int(dataset.labels[i])]
                w.writerow(row)


def load_dataset_csv(path, n_classes: int | None = None) -> Dataset:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        d = len(header) - 3
        rows = list(r)
    if not rows:
        raise ValueError(f"dataset file {path} has no samples")
    n = max(int(row[0]) for row in rows) + 1
    seq_len = max(int(row[1]) for row in rows) + 1
    features = np.zeros((n, seq_len, d))
    labels = np.zeros(n, dtype=np.int64)
    for row in rows:
        i, t = int(row[0]), int(row[1])
        features[i, t] = [float(x) for x in row[2:2 + d]]
        labels[i] = int(row[-1])
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    return Dataset(features, labels, n_classes)

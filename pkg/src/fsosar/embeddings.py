"""Datasets of labelled embedding vectors: synthetic clusters, CSV I/O, class splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Embedding:
    item_id: int
    label: int
    vector: np.ndarray


@dataclass
class Dataset:
    item_ids: np.ndarray  # (n,) int64
    labels: np.ndarray  # (n,) int64
    vectors: np.ndarray  # (n, d_in) float64
    provenance: str = "synthetic"
    _by_label: dict[int, np.ndarray] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        n = len(self.labels)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != n or self.item_ids.shape != (n,):
            raise DatasetError("item_ids, labels and vectors disagree in length")
        if np.any(self.labels < 0):
            raise DatasetError("labels must be non-negative")
        if not np.all(np.isfinite(self.vectors)):
            raise DatasetError("embedding vectors contain non-finite values")
        for lab in np.unique(self.labels):
            self._by_label[int(lab)] = np.flatnonzero(self.labels == lab)
        for arr in (self.item_ids, self.labels, self.vectors):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Embedding:
        return Embedding(int(self.item_ids[i]), int(self.labels[i]), self.vectors[i])

    @property
    def d_in(self) -> int:
        return self.vectors.shape[1]

    @property
    def label_set(self) -> list[int]:
        return sorted(self._by_label)

    def indices_of(self, label: int) -> np.ndarray:
        """Row indices of ``label`` in ascending order."""
        return self._by_label[label]


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 40
    items_per_class: int = 30
    d_in: int = 64
    inter_class_scale: float = 3.0
    intra_class_sigma: float = 1.0
    seed: int = 0

    def validate(self, k_way: int = 5) -> None:
        if self.num_classes < 2 * k_way:
            raise DatasetError(f"num_classes={self.num_classes} < 2*k_way={2 * k_way}")
        if self.items_per_class < 2:
            raise DatasetError("items_per_class must be >= 2 (one shot plus a query)")
        if self.d_in < 1:
            raise DatasetError("d_in must be positive")
        if not self.intra_class_sigma > 0:
            raise DatasetError("intra_class_sigma must be > 0")
        if self.inter_class_scale < 0:
            raise DatasetError("inter_class_scale must be >= 0")


def generate_synthetic(cfg: SyntheticConfig, k_way: int = 5) -> Dataset:
    """Gaussian clusters around class means drawn uniformly on a sphere of radius ``inter_class_scale``."""
    cfg.validate(k_way)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    means = rng.normal(size=(cfg.num_classes, cfg.d_in))
    means *= cfg.inter_class_scale / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(cfg.num_classes), cfg.items_per_class)
    noise = rng.normal(scale=cfg.intra_class_sigma, size=(len(labels), cfg.d_in))
    return Dataset(np.arange(len(labels)), labels, means[labels] + noise, provenance="synthetic")


def save_embeddings(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        f.write(",".join(["item_id", "label"] + [f"v{j}" for j in range(ds.d_in)]) + "\n")
        for iid, lab, vec in zip(ds.item_ids, ds.labels, ds.vectors):
            f.write(f"{iid},{lab}," + ",".join(f"{v:.9g}" for v in vec) + "\n")


def load_embeddings(path) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[:2] != ["item_id", "label"]:
            raise DatasetError(f"{path}:1: header must start with item_id,label")
        d = len(header) - 2
        if d < 1 or header[2:] != [f"v{j}" for j in range(d)]:
            raise DatasetError(f"{path}:1: expected vector columns v0..v{{d-1}}")
        ids, labels, rows, seen = [], [], [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise DatasetError(f"{path}:{lineno}: expected {d} vector values, got {len(row) - 2}")
            try:
                iid, lab = int(row[0]), int(row[1])
                vec = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed row ({exc})") from None
            if iid in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate item_id {iid}")
            if lab < 0 or not all(math.isfinite(v) for v in vec):
                raise DatasetError(f"{path}:{lineno}: negative label or non-finite value")
            seen.add(iid)
            ids.append(iid)
            labels.append(lab)
            rows.append(vec)
    if not rows:
        raise DatasetError(f"{path}: no embedding rows")
    return Dataset(np.array(ids), np.array(labels), np.array(rows), provenance=str(path))


@dataclass(frozen=True)
class LabelSplit:
    train_labels: tuple[int, ...]
    test_labels: tuple[int, ...]

    def __post_init__(self):
        if not self.train_labels or not self.test_labels:
            raise DatasetError("both sides of a label split must be nonempty")
        if set(self.train_labels) & set(self.test_labels):
            raise DatasetError("train and test label sets overlap")

    def side(self, name: str) -> tuple[int, ...]:
        if name == "train":
            return self.train_labels
        if name == "test":
            return self.test_labels
        raise ValueError(f"unknown split side {name!r}")


def split_labels(ds: Dataset, train_fraction: float, rng: np.random.Generator, k_way: int = 5) -> LabelSplit:
    """Random disjoint class split. The train side gets floor(fraction * |Y|) classes."""
    if not 0 < train_fraction < 1:
        raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
    labels = np.array(ds.label_set)
    n_train = int(math.floor(train_fraction * len(labels) + 1e-9))
    n_test = len(labels) - n_train
    if min(n_train, n_test) < k_way + 1:
        raise DatasetError(
            f"split gives {n_train} train / {n_test} test classes; each side needs >= k_way+1 = {k_way + 1}"
        )
    perm = rng.permutation(labels)
    return LabelSplit(tuple(sorted(int(c) for c in perm[:n_train])), tuple(sorted(int(c) for c in perm[n_train:])))

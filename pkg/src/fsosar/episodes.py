"""Sampling of known and unknown few-shot tasks from one side of a label split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import Dataset, LabelSplit

UNKNOWN = -1


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    k_way: int = 5
    n_shot: int = 1
    split_side: str = "train"

    def __post_init__(self):
        if self.k_way < 2:
            raise EpisodeError(f"k_way must be >= 2, got {self.k_way}")
        if self.n_shot < 1:
            raise EpisodeError(f"n_shot must be >= 1, got {self.n_shot}")
        if self.split_side not in ("train", "test"):
            raise EpisodeError(f"split_side must be 'train' or 'test', got {self.split_side!r}")


@dataclass
class EpisodeTask:
    """One support set plus a single query.

    ``support`` has shape (K, N, d_in); row c holds the shots of dataset class
    ``support_labels[c]``. ``query_target`` is the support index of the query
    class, or ``UNKNOWN``.
    """

    support: np.ndarray
    support_ids: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_id: int
    query_label: int
    query_target: int
    known: bool

    @property
    def k_way(self) -> int:
        return self.support.shape[0]

    @property
    def n_shot(self) -> int:
        return self.support.shape[1]


def check_task(task: EpisodeTask) -> list[str]:
    """Return the list of violated task invariants (empty when the task is valid)."""
    problems = []
    K, N = task.support_ids.shape
    if len(set(task.support_labels.tolist())) != K:
        problems.append("support labels not distinct")
    if task.support.shape[:2] != (K, N):
        problems.append("support vectors do not match the K x N id grid")
    if len(set(task.support_ids.ravel().tolist())) != K * N:
        problems.append("duplicate support item")
    if task.query_id in set(task.support_ids.ravel().tolist()):
        problems.append("query item leaked into the support set")
    if task.known:
        if not 0 <= task.query_target < K:
            problems.append("known task without a valid query target")
        elif task.support_labels[task.query_target] != task.query_label:
            problems.append("query label differs from its target support class")
    else:
        if task.query_target != UNKNOWN:
            problems.append("unknown task with a class target")
        if task.query_label in set(task.support_labels.tolist()):
            problems.append("unknown query label is in the support set")
    return problems


def _side_classes(split: LabelSplit, spec: EpisodeSpec, need: int) -> np.ndarray:
    classes = np.array(split.side(spec.split_side))
    if len(classes) < need:
        raise EpisodeError(f"{spec.split_side} side has {len(classes)} classes, task needs {need}")
    return classes


def _draw_items(ds: Dataset, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
    pool = ds.indices_of(label)
    if len(pool) < n:
        raise EpisodeError(f"class {label} has {len(pool)} items, task needs {n}")
    return rng.choice(pool, size=n, replace=False)


def _build(ds, classes, rows, q_row, target, known) -> EpisodeTask:
    rows = np.asarray(rows)
    return EpisodeTask(
        support=ds.vectors[rows],
        support_ids=ds.item_ids[rows],
        support_labels=np.asarray(classes, dtype=np.int64),
        query=ds.vectors[q_row],
        query_id=int(ds.item_ids[q_row]),
        query_label=int(ds.labels[q_row]),
        query_target=target,
        known=known,
    )


def sample_known_task(ds: Dataset, split: LabelSplit, spec: EpisodeSpec, rng: np.random.Generator) -> EpisodeTask:
    classes = _side_classes(split, spec, spec.k_way)
    chosen = rng.choice(classes, size=spec.k_way, replace=False)
    target = int(rng.integers(spec.k_way))
    rows = []
    q_row = None
    for c, label in enumerate(chosen):
        if c == target:
            items = _draw_items(ds, int(label), spec.n_shot + 1, rng)
            q_row = items[-1]
            items = items[:-1]
        else:
            items = _draw_items(ds, int(label), spec.n_shot, rng)
        rows.append(items)
    return _build(ds, chosen, rows, q_row, target, True)


def sample_unknown_task(ds: Dataset, split: LabelSplit, spec: EpisodeSpec, rng: np.random.Generator) -> EpisodeTask:
    classes = _side_classes(split, spec, spec.k_way + 1)
    chosen = rng.choice(classes, size=spec.k_way, replace=False)
    rows = [_draw_items(ds, int(label), spec.n_shot, rng) for label in chosen]
    outside = np.setdiff1d(classes, chosen)
    q_label = int(rng.choice(outside))
    q_row = rng.choice(ds.indices_of(q_label))
    return _build(ds, chosen, rows, q_row, UNKNOWN, False)


def sample_balanced_eval(
    ds: Dataset, split: LabelSplit, spec: EpisodeSpec, n_pairs: int, rng: np.random.Generator
) -> list[EpisodeTask]:
    """``n_pairs`` known and ``n_pairs`` unknown tasks, alternating known/unknown."""
    tasks = []
    for _ in range(n_pairs):
        tasks.append(sample_known_task(ds, split, spec, rng))
        tasks.append(sample_unknown_task(ds, split, spec, rng))
    return tasks


@dataclass
class TaskBatch:
    support: np.ndarray  # (B, K, N, d_in)
    query: np.ndarray  # (B, d_in)
    target: np.ndarray  # (B,), UNKNOWN for unknown tasks
    known: np.ndarray  # (B,) bool
    query_label: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.known)


def stack_tasks(tasks: list[EpisodeTask]) -> TaskBatch:
    return TaskBatch(
        support=np.stack([t.support for t in tasks]),
        query=np.stack([t.query for t in tasks]),
        target=np.array([t.query_target for t in tasks], dtype=np.int64),
        known=np.array([t.known for t in tasks], dtype=bool),
        query_label=np.array([t.query_label for t in tasks], dtype=np.int64),
    )

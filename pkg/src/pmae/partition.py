"""Class-incremental task streams and Dirichlet non-IID client partitions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError


@dataclass(frozen=True)
class Task:
    index: int
    classes: tuple[int, ...]
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def class_order(self) -> list[int]:
        """Original labels in incremental order; position = classifier row."""
        return [c for t in self.tasks for c in t.classes]


def split_tasks(train_labels, test_labels, num_tasks: int, rng: np.random.Generator) -> TaskStream:
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    classes = np.unique(np.concatenate([train_labels, test_labels]))
    if num_tasks < 1 or len(classes) % num_tasks:
        raise ConfigError(f"{len(classes)} classes cannot be split into {num_tasks} equal tasks")
    order = rng.permutation(classes)
    per = len(classes) // num_tasks
    tasks = []
    for t in range(num_tasks):
        cls = tuple(int(c) for c in order[t * per : (t + 1) * per])
        tasks.append(
            Task(
                t,
                cls,
                np.flatnonzero(np.isin(train_labels, cls)),
                np.flatnonzero(np.isin(test_labels, cls)),
            )
        )
    return TaskStream(tuple(tasks))


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; leftover units go to the largest fractional parts, ties to lower index."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    left = total - int(counts.sum())
    frac = raw - counts
    order = sorted(range(len(frac)), key=lambda i: (-frac[i], i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def dirichlet_partition(
    sample_idx: np.ndarray, labels: np.ndarray, num_clients: int, beta: float, rng: np.random.Generator
) -> dict[int, np.ndarray]:
    """Split ``sample_idx`` across clients with per-class Dirichlet(beta) proportions.

    ``labels[i]`` is the label of ``sample_idx[i]``. Clients may come out empty.
    """
    if num_clients < 1:
        raise ConfigError("need at least one client")
    if not beta > 0:
        raise ConfigError(f"Dirichlet concentration must be positive, got {beta}")
    sample_idx = np.asarray(sample_idx)
    labels = np.asarray(labels)
    parts: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        members = sample_idx[labels == c]
        members = members[rng.permutation(len(members))]
        q = rng.dirichlet(np.full(num_clients, beta))
        if not np.all(np.isfinite(q)) or q.sum() <= 0:
            # degenerate draw at tiny beta: all mass to one client
            q = np.zeros(num_clients)
            q[rng.integers(num_clients)] = 1.0
        counts = largest_remainder(q / q.sum(), len(members))
        start = 0
        for k, n in enumerate(counts):
            parts[k].extend(members[start : start + n].tolist())
            start += n
    return {k: np.sort(np.asarray(v, dtype=np.int64)) for k, v in enumerate(parts)}


def label_tv_distance(partition: dict[int, np.ndarray], label_of: np.ndarray) -> float:
    """Mean total-variation distance between each non-empty client's label mix and the pooled mix."""
    all_idx = np.concatenate([v for v in partition.values()])
    classes = np.unique(label_of[all_idx])
    glob = np.array([(label_of[all_idx] == c).mean() for c in classes])
    dists = []
    for idx in partition.values():
        if len(idx) == 0:
            continue
        local = np.array([(label_of[idx] == c).mean() for c in classes])
        dists.append(0.5 * np.abs(local - glob).sum())
    return float(np.mean(dists))

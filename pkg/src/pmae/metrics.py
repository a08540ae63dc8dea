"""Accuracy matrix and the derived incremental metrics.

``a[i][t]`` is the accuracy on task ``i`` after learning task ``t``
(0-based, ``i <= t``). ``A_t`` averages column ``t`` over seen tasks, and
the overall score averages ``A_t`` over all stages. Averages are formed in
exact rational arithmetic and rounded once, so they do not depend on
summation order.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Optional, Sequence


class MetricsError(ValueError):
    pass


def compute_metrics(matrix: Sequence[Sequence[Optional[float]]]) -> tuple[list[float], float]:
    T = len(matrix)
    if T == 0:
        raise MetricsError("empty accuracy matrix")
    stage = []
    for t in range(T):
        col = []
        for i in range(t + 1):
            v = matrix[i][t] if t < len(matrix[i]) else None
            if v is None:
                raise MetricsError(f"missing entry a[{i}][{t}]")
            col.append(Fraction(v))
        stage.append(sum(col) / (t + 1))
    mean = sum(stage) / T
    return [float(a) for a in stage], float(mean)


class MetricsLedger:
    def __init__(self, num_tasks: int):
        self.num_tasks = num_tasks
        self.matrix: list[list[Optional[float]]] = [[None] * num_tasks for _ in range(num_tasks)]

    def record(self, task_i: int, after_t: int, accuracy: float) -> None:
        if task_i > after_t:
            raise MetricsError("only tasks already seen can be scored")
        if not 0.0 <= accuracy <= 1.0:
            raise MetricsError(f"accuracy {accuracy} outside [0, 1]")
        self.matrix[task_i][after_t] = float(accuracy)

    @property
    def completed(self) -> int:
        t = 0
        while t < self.num_tasks and all(self.matrix[i][t] is not None for i in range(t + 1)):
            t += 1
        return t

    def stage_accuracy(self) -> list[float]:
        return compute_metrics(self._prefix())[0]

    def average_accuracy(self) -> float:
        return compute_metrics(self._prefix())[1]

    def _prefix(self):
        t = self.completed
        return [row[:t] for row in self.matrix[:t]]

    def to_dict(self) -> dict:
        stage, mean = compute_metrics(self._prefix())
        return {"accuracy_matrix": self.matrix, "A_t": stage, "A_bar": mean, "A_T": stage[-1]}

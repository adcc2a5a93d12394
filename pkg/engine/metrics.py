"""
Forgetting and learning measures over accuracy matrices and round curves
"""
from typing import Iterable, List, Sequence

import numpy as np

from .errors import MetricError
from .models import ProfilePoint, RunLog


def _last_row(matrix: Sequence[Sequence[float]]) -> np.ndarray:
    if not matrix or not len(matrix[-1]):
        raise MetricError("empty accuracy matrix")
    return np.asarray(matrix[-1], dtype=np.float64)


def avg_accuracy(matrix: Sequence[Sequence[float]]) -> float:
    """Mean test accuracy over all tasks after the last one"""
    return float(_last_row(matrix).mean())


def forgetting_rate(matrix: Sequence[Sequence[float]]) -> float:
    """
    Mean over tasks j < T of the largest drop from any later-or-equal row
    to the final row: max_{k>=j} A[k][j] - A[T][j].
    """
    size = len(matrix)
    if size < 2:
        raise MetricError(f"forgetting needs at least two tasks, got {size}")
    final = _last_row(matrix)
    drops = []
    for j in range(size - 1):
        column = [matrix[k][j] for k in range(j, size)]
        drops.append(max(column) - final[j])
    return float(np.mean(drops))


def lca(curve: Sequence[float]) -> float:
    """Learning-curve area: mean accuracy over equally spaced AL rounds"""
    values = np.asarray(curve, dtype=np.float64)
    if values.size == 0:
        raise MetricError("empty learning curve")
    return float(values.mean())


def lca_seen_tasks(round_curve: Sequence[Sequence[float]]) -> float:
    """LCA of the mean-over-seen-tasks accuracy recorded at each round"""
    return lca([point[1] for point in round_curve])


def current_task_lcas(log: RunLog) -> List[float]:
    if not log.round_curves or any(len(curve) == 0 for curve in log.round_curves):
        raise MetricError("run has no AL round curves; LCA is undefined")
    return [lca([point[0] for point in curve]) for curve in log.round_curves]


def profile_point(log: RunLog, label: str = "") -> ProfilePoint:
    return ProfilePoint(lca=float(np.mean(current_task_lcas(log))),
                        forgetting_rate=forgetting_rate(log.accuracy_matrix),
                        label=label)


def normalized_fr(fr_acl: float, fr_cl: float) -> float:
    if fr_cl == 0:
        raise MetricError("baseline forgetting rate is zero; ratio undefined")
    return fr_acl / fr_cl


def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    """|a & b| / |a | b|; two empty sets count as identical"""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def paired_delta(values: Sequence[float], baseline: Sequence[float]):
    """
    Mean of paired differences and the standard error of that mean
    (sample std / sqrt(n); 0 for a single pair).
    """
    if len(values) != len(baseline) or not values:
        raise MetricError("paired delta needs at least one pair and equal lengths")
    diffs = np.asarray(values, dtype=np.float64) - np.asarray(baseline, dtype=np.float64)
    if diffs.size == 1:
        return float(diffs[0]), 0.0
    return float(diffs.mean()), float(diffs.std(ddof=1) / np.sqrt(diffs.size))

"""
Dataset ingestion and task-sequence construction

IDX-format MNIST loading, permuted/split MNIST streams, synthetic Gaussian
streams for fast tests, task reordering and oracle annotation.
"""
import gzip
import logging
import struct
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BudgetError,
    ConfigError,
    ContractViolation,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
)
from .mnist_client import MnistClient
from .models import LabelledSet, Scenario, SyntheticSpec, Task, TaskStream

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def derive_seed(seed: int, *keys: int) -> int:
    """Independent child seed for a (seed, keys...) path"""
    state = np.random.SeedSequence([int(seed), *(int(k) for k in keys)]).generate_state(1)
    return int(state[0])


# ---------------------------------------------------------------- IDX files


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, header_dims: int, path) -> Tuple[Tuple[int, ...], np.ndarray]:
    header_size = 4 * (1 + header_dims)
    if len(raw) < header_size:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    found, *dims = struct.unpack(f">{1 + header_dims}I", raw[:header_size])
    if found != magic:
        raise IdxMagicError(f"{path}: magic {found} (expected {magic})")
    expected = int(np.prod(dims))
    payload = raw[header_size:]
    if len(payload) < expected:
        raise IdxTruncatedError(f"{path}: {len(payload)} payload bytes, header declares {expected}")
    return tuple(dims), np.frombuffer(payload, dtype=np.uint8, count=expected)


def load_idx(images_path, labels_path) -> LabelledSet:
    """
    Read an IDX image/label file pair (gzip when the name ends in .gz).

    Pixels are kept as uint8 and exposed as float64 / 255 through
    `LabelledSet.inputs`; images are flattened row-major.
    """
    (count, rows, cols), pixels = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, images_path)
    (label_count,), labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, labels_path)
    if count != label_count:
        raise IdxCountMismatchError(f"{count} images but {label_count} labels")
    logger.info("Loaded %d images (%dx%d) from %s", count, rows, cols, images_path)
    return LabelledSet(pixels.reshape(count, rows * cols).copy(), labels.astype(np.int64))


def load_mnist(data_dir) -> Tuple[LabelledSet, LabelledSet]:
    """Train/test sets from the standard MNIST file names (plain or .gz)"""
    data_dir = Path(data_dir)

    def locate(stem: str) -> Path:
        for name in (stem, stem + ".gz"):
            if (data_dir / name).exists():
                return data_dir / name
        raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")

    train = load_idx(locate("train-images-idx3-ubyte"), locate("train-labels-idx1-ubyte"))
    test = load_idx(locate("t10k-images-idx3-ubyte"), locate("t10k-labels-idx1-ubyte"))
    return train, test


def download_mnist(dest, client: Optional[MnistClient] = None, overwrite: bool = False) -> List[Path]:
    """Fetch the four MNIST IDX files into `dest` (gzip, as published)"""
    return (client or MnistClient()).download(dest, overwrite=overwrite)


def limit_per_class(data: LabelledSet, limit: Optional[int], seed: int) -> LabelledSet:
    """Keep at most `limit` random samples of each class (order preserved)"""
    if limit is None:
        return data
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(data.labels):
        members = np.flatnonzero(data.labels == c)
        if members.size > limit:
            members = np.sort(rng.choice(members, size=limit, replace=False))
        keep.append(members)
    return data.subset(np.sort(np.concatenate(keep)))


# ------------------------------------------------------------- generators


def _check_fractions(**fractions: float):
    for name, value in fractions.items():
        if not 0.0 < value <= 1.0 and not (name == "val_fraction" and value == 0.0):
            raise ContractViolation(f"{name} must lie in (0, 1], got {value}")


def _budget(pool_size: int, budget_fraction: float, query_fraction: float) -> Tuple[int, int]:
    budget = int(np.floor(budget_fraction * pool_size))
    query = max(1, int(np.floor(query_fraction * pool_size)))
    if budget > 0:
        query = min(query, budget)
    return budget, query


def _split_val(train: LabelledSet, val_fraction: float, rng: np.random.Generator):
    order = rng.permutation(len(train))
    n_val = int(np.floor(val_fraction * len(train)))
    return train.subset(np.sort(order[n_val:])), train.subset(np.sort(order[:n_val]))


def _make_task(task_id: int, pool: LabelledSet, val: LabelledSet, test: LabelledSet,
               classes: Sequence[int], budget_fraction: float, query_fraction: float) -> Task:
    budget, query = _budget(len(pool), budget_fraction, query_fraction)
    return Task(
        task_id=task_id,
        seed_labelled=LabelledSet.empty(pool.dim),
        _pool=pool,
        val=val,
        test=test,
        budget=budget,
        query_size=query,
        class_subset=tuple(classes),
    )


def _with_perm(data: LabelledSet, perm: Optional[np.ndarray]) -> LabelledSet:
    return LabelledSet(data.data, data.labels, perm)


def make_permuted_stream(base_train: LabelledSet, base_test: LabelledSet, num_tasks: int = 10,
                         val_fraction: float = 0.05, budget_fraction: float = 0.10,
                         query_fraction: float = 0.005, seed: int = 0) -> TaskStream:
    """Domain-IL stream: task 0 keeps pixel order, later tasks permute it"""
    if num_tasks < 1:
        raise ContractViolation("num_tasks must be >= 1")
    _check_fractions(val_fraction=val_fraction, budget_fraction=budget_fraction,
                     query_fraction=query_fraction)
    rng = np.random.default_rng(seed)
    pool, val = _split_val(base_train, val_fraction, rng)
    num_classes = int(max(base_train.labels.max(), base_test.labels.max())) + 1
    classes = list(range(num_classes))

    tasks = []
    for t in range(num_tasks):
        perm = None if t == 0 else rng.permutation(base_train.dim)
        tasks.append(_make_task(t, _with_perm(pool, perm), _with_perm(val, perm),
                                _with_perm(base_test, perm), classes,
                                budget_fraction, query_fraction))
    logger.info("Permuted stream: %d tasks, pool %d, budget %d, query %d",
                num_tasks, len(pool), tasks[0].budget, tasks[0].query_size)
    return TaskStream(tasks=tuple(tasks), scenario=Scenario.DOMAIN_IL, num_classes_total=num_classes)


def make_split_stream(base_train: LabelledSet, base_test: LabelledSet, classes_per_task: int = 2,
                      class_order: Optional[Sequence[int]] = None,
                      val_fraction: float = 0.05, budget_fraction: float = 0.10,
                      query_fraction: float = 0.005, seed: int = 0,
                      scenario: Scenario = Scenario.CLASS_IL) -> TaskStream:
    """Class/task-IL stream of consecutive class groups"""
    num_classes = int(max(base_train.labels.max(), base_test.labels.max())) + 1
    class_order = list(range(num_classes)) if class_order is None else [int(c) for c in class_order]
    if sorted(class_order) != list(range(num_classes)):
        raise ConfigError(f"class_order must permute 0..{num_classes - 1}", key="class_order")
    if classes_per_task < 1 or num_classes % classes_per_task:
        raise ConfigError(
            f"{num_classes} classes cannot be split into groups of {classes_per_task}",
            key="classes_per_task")
    scenario = Scenario(scenario)
    if scenario is Scenario.DOMAIN_IL:
        raise ContractViolation("split streams are class-IL or task-IL")
    _check_fractions(val_fraction=val_fraction, budget_fraction=budget_fraction,
                     query_fraction=query_fraction)

    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(num_classes // classes_per_task):
        classes = sorted(class_order[t * classes_per_task:(t + 1) * classes_per_task])
        train_part = base_train.subset(np.flatnonzero(np.isin(base_train.labels, classes)))
        test_part = base_test.subset(np.flatnonzero(np.isin(base_test.labels, classes)))
        pool, val = _split_val(train_part, val_fraction, rng)
        tasks.append(_make_task(t, pool, val, test_part, classes, budget_fraction, query_fraction))
    logger.info("Split stream: %d tasks of %d classes (%s)", len(tasks), classes_per_task, scenario.value)
    return TaskStream(tasks=tuple(tasks), scenario=scenario, num_classes_total=num_classes)


def make_synthetic_stream(spec: SyntheticSpec, scenario: Scenario = Scenario.CLASS_IL,
                          seed: int = 0) -> TaskStream:
    """Unit-variance Gaussian blobs; class means sit `cluster_separation` apart"""
    if min(spec.tasks, spec.classes_per_task, spec.dim, spec.samples_per_class,
           spec.test_per_class) < 1:
        raise ContractViolation("synthetic stream counts must be positive")
    scenario = Scenario(scenario)
    rng = np.random.default_rng(seed)
    shared = scenario is Scenario.DOMAIN_IL
    num_classes = spec.classes_per_task * (1 if shared else spec.tasks)

    def blob(mean: np.ndarray, count: int) -> np.ndarray:
        return mean + rng.standard_normal((count, spec.dim))

    tasks = []
    for t in range(spec.tasks):
        first = 0 if shared else t * spec.classes_per_task
        classes = list(range(first, first + spec.classes_per_task))
        directions = rng.standard_normal((len(classes), spec.dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        means = spec.cluster_separation * directions
        train_x, train_y, test_x, test_y = [], [], [], []
        for c, mean in zip(classes, means):
            train_x.append(blob(mean, spec.samples_per_class))
            train_y.append(np.full(spec.samples_per_class, c))
            test_x.append(blob(mean, spec.test_per_class))
            test_y.append(np.full(spec.test_per_class, c))
        train = LabelledSet(np.concatenate(train_x), np.concatenate(train_y))
        test = LabelledSet(np.concatenate(test_x), np.concatenate(test_y))
        pool, val = _split_val(train, spec.val_fraction, rng)
        tasks.append(_make_task(t, pool, val, test, classes,
                                spec.budget_fraction, spec.query_fraction))
    return TaskStream(tasks=tuple(tasks), scenario=scenario, num_classes_total=num_classes)


def reorder_tasks(stream: TaskStream, order: Sequence[int]) -> TaskStream:
    order = [int(i) for i in order]
    if sorted(order) != list(range(len(stream))):
        raise ContractViolation(f"{order} is not a permutation of 0..{len(stream) - 1}")
    tasks = tuple(replace(stream.tasks[src], task_id=dst) for dst, src in enumerate(order))
    return replace(stream, tasks=tasks)


def task_orders(num_tasks: int, count: int, seed: int = 0) -> List[List[int]]:
    """Identity order first, then seeded random permutations"""
    rng = np.random.default_rng(seed)
    orders = [list(range(num_tasks))]
    while len(orders) < count:
        orders.append([int(i) for i in rng.permutation(num_tasks)])
    return orders[:count]


# -------------------------------------------------------------- annotation


def annotate(task: Task, pool_indices: Sequence[int]) -> Task:
    """Reveal oracle labels for pool items; returns the updated task"""
    index = np.asarray(pool_indices, dtype=np.int64)
    if index.size != np.unique(index).size:
        raise BudgetError(f"task {task.task_id}: duplicate indices in annotation request")
    if index.size and (index.min() < 0 or index.max() >= task.initial_pool_size):
        raise BudgetError(f"task {task.task_id}: index outside the pool")
    if task.annotated[index].any():
        raise BudgetError(f"task {task.task_id}: item already labelled")
    if index.size > task.budget:
        raise BudgetError(
            f"task {task.task_id}: {index.size} annotations exceed remaining budget {task.budget}")
    annotated = task.annotated.copy()
    annotated[index] = True
    return replace(task, annotated=annotated, budget=task.budget - int(index.size))


def reveal_all(task: Task) -> Task:
    """Annotate the whole pool regardless of budget (full-data baselines)"""
    widened = replace(task, budget=task.pool_size)
    return replace(annotate(widened, widened.pool_indices), budget=0)

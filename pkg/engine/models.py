"""
Data models for the active continual learning lab
"""
import copy
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation


class Scenario(str, Enum):
    DOMAIN_IL = "domain_il"
    CLASS_IL = "class_il"
    TASK_IL = "task_il"


class CLStrategy(str, Enum):
    FT = "ft"
    EWC = "ewc"
    ER = "er"
    AGEM = "agem"
    GDUMB = "gdumb"
    DER = "der"
    DERPP = "derpp"
    ICARL = "icarl"


class ALStrategy(str, Enum):
    RANDOM = "random"
    ENTROPY = "entropy"
    MARGIN = "margin"
    BADGE = "badge"
    CORESET = "coreset"
    KMEANS = "kmeans"


class LabellingMode(str, Enum):
    SEQUENTIAL = "sequential"
    INDEPENDENT = "independent"


class BufferPolicy(str, Enum):
    PER_TASK_QUOTA = "per_task_quota"
    RESERVOIR = "reservoir"


class PseudoLabelMode(str, Enum):
    PREDICTED = "predicted"
    TRUE = "true"


class OptimizerAlgo(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


# ---------------------------------------------------------------- nn_core


@dataclass(frozen=True)
class Architecture:
    """MLP shape: input -> hidden layers (ReLU) -> logits"""
    input_dim: int = 784
    hidden_dims: Tuple[int, ...] = (100, 100)
    num_classes: int = 10
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ContractViolation(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ContractViolation(f"num_classes must be >= 2, got {self.num_classes}")
        if any(h < 1 for h in self.hidden_dims):
            raise ContractViolation(f"hidden dims must be >= 1, got {self.hidden_dims}")
        if self.activation != "relu":
            raise ContractViolation(f"unsupported activation {self.activation!r}")

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) per dense layer"""
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)

    @property
    def output_layer_offset(self) -> int:
        """Flat index where the output layer's weight block starts"""
        fan_in, fan_out = self.layer_shapes[-1]
        return self.param_count - (fan_in * fan_out + fan_out)


@dataclass(frozen=True)
class OptimizerHyper:
    algo: OptimizerAlgo = OptimizerAlgo.SGD
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(eq=False)
class ModelState:
    """Parameters + optimizer accumulators of one MLP"""
    arch: Architecture
    params: np.ndarray
    opt_state: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.params.shape != (self.arch.param_count,):
            raise ContractViolation(
                f"params length {self.params.size} != architecture count {self.arch.param_count}")

    def copy(self) -> "ModelState":
        return replace(
            self,
            params=self.params.copy(),
            opt_state={k: v.copy() for k, v in self.opt_state.items()},
        )


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    logits: np.ndarray
    penultimate: np.ndarray
    probs: np.ndarray


# ----------------------------------------------------------- task_streams


class LabelledSet:
    """
    Inputs + labels.

    Raw pixel storage (uint8 or float) is kept together with an optional
    column permutation; float64 rows are materialised on access so permuted
    tasks share one copy of the base images.
    """

    def __init__(self, data: np.ndarray, labels: np.ndarray,
                 permutation: Optional[np.ndarray] = None):
        data = np.asarray(data)
        labels = np.asarray(labels, dtype=np.int64)
        if data.ndim != 2:
            raise ContractViolation(f"inputs must be a matrix, got shape {data.shape}")
        if labels.shape != (data.shape[0],):
            raise ContractViolation(
                f"{labels.size} labels for {data.shape[0]} inputs")
        self.data = data
        self.labels = labels
        self.permutation = permutation

    def __len__(self) -> int:
        return int(self.labels.size)

    def __repr__(self):
        return f"LabelledSet(n={len(self)}, d={self.dim})"

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    @property
    def inputs(self) -> np.ndarray:
        return self._materialise(self.data)

    def rows(self, index: Sequence[int]) -> np.ndarray:
        """Float64 inputs of the selected rows only"""
        return self._materialise(self.data[np.asarray(index, dtype=np.int64)])

    def subset(self, index: Sequence[int]) -> "LabelledSet":
        index = np.asarray(index, dtype=np.int64)
        return LabelledSet(self.data[index], self.labels[index], self.permutation)

    def _materialise(self, block: np.ndarray) -> np.ndarray:
        if self.permutation is not None:
            block = block[:, self.permutation]
        if block.dtype == np.uint8:
            return block / 255.0
        return np.asarray(block, dtype=np.float64)

    @classmethod
    def empty(cls, dim: int) -> "LabelledSet":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, parts: Sequence["LabelledSet"]) -> "LabelledSet":
        parts = [p for p in parts if len(p)] or list(parts[:1])
        if not parts:
            raise ContractViolation("nothing to concatenate")
        first = parts[0]
        shared_layout = all(
            p.data.dtype == first.data.dtype and _same_perm(p.permutation, first.permutation)
            for p in parts)
        labels = np.concatenate([p.labels for p in parts])
        if shared_layout:
            return cls(np.concatenate([p.data for p in parts]), labels, first.permutation)
        return cls(np.concatenate([p.inputs for p in parts]), labels)


def _same_perm(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> bool:
    if a is None or b is None:
        return a is b
    return a is b or np.array_equal(a, b)


@dataclass(frozen=True, eq=False)
class Task:
    """
    One task of a stream: seed labels, unlabelled pool, val/test, budget.

    `_pool` holds the pool inputs together with the hidden oracle labels;
    only `task_streams.annotate` reads those labels for unannotated rows.
    """
    task_id: int
    seed_labelled: LabelledSet
    _pool: LabelledSet = field(repr=False)
    val: LabelledSet = field(repr=False)
    test: LabelledSet = field(repr=False)
    budget: int
    query_size: int
    class_subset: Tuple[int, ...]
    annotated: np.ndarray = field(default=None, repr=False)
    initial_budget: int = None

    def __post_init__(self):
        if self.annotated is None:
            object.__setattr__(self, "annotated", np.zeros(len(self._pool), dtype=bool))
        if self.initial_budget is None:
            object.__setattr__(self, "initial_budget", int(self.budget))
        object.__setattr__(self, "class_subset", tuple(sorted(int(c) for c in self.class_subset)))
        if self.budget < 0 or self.query_size < 1:
            raise ContractViolation(f"task {self.task_id}: budget/query size out of range")
        if self.initial_budget > len(self._pool):
            raise ContractViolation(
                f"task {self.task_id}: budget {self.initial_budget} exceeds pool {len(self._pool)}")

    @property
    def pool_size(self) -> int:
        """Items still unlabelled"""
        return int((~self.annotated).sum())

    @property
    def initial_pool_size(self) -> int:
        return len(self._pool)

    @property
    def pool_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.annotated)

    @property
    def annotated_indices(self) -> np.ndarray:
        return np.flatnonzero(self.annotated)

    @property
    def num_annotated(self) -> int:
        return int(self.annotated.sum())

    @property
    def dim(self) -> int:
        return self._pool.dim

    def pool_inputs(self, index: Optional[Sequence[int]] = None) -> np.ndarray:
        """Float64 pool rows (labels stay hidden); all remaining rows by default"""
        return self._pool.rows(self.pool_indices if index is None else index)

    @property
    def labelled(self) -> LabelledSet:
        """Seed set followed by annotated pool items in pool-index order"""
        return LabelledSet.concat([self.seed_labelled, self._pool.subset(self.annotated_indices)])


@dataclass(frozen=True, eq=False)
class TaskStream:
    tasks: Tuple[Task, ...]
    scenario: Scenario
    num_classes_total: int

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        for position, task in enumerate(self.tasks):
            if task.task_id != position:
                raise ContractViolation(f"task at position {position} has id {task.task_id}")
        subsets = [set(t.class_subset) for t in self.tasks]
        if self.scenario is Scenario.DOMAIN_IL:
            if any(s != subsets[0] for s in subsets):
                raise ContractViolation("domain-IL tasks must share one class subset")
        else:
            seen = set()
            for s in subsets:
                if s & seen:
                    raise ContractViolation("class/task-IL class subsets must be disjoint")
                seen |= s

    def __len__(self) -> int:
        return len(self.tasks)

    def class_mask(self, classes: Sequence[int]) -> np.ndarray:
        mask = np.zeros(self.num_classes_total, dtype=bool)
        mask[list(classes)] = True
        return mask

    def seen_classes(self, upto: int) -> List[int]:
        return sorted({c for t in self.tasks[:upto + 1] for c in t.class_subset})

    def training_masks(self) -> Optional[Dict[int, np.ndarray]]:
        """Per-task output masks used during training (task-IL only)"""
        if self.scenario is not Scenario.TASK_IL:
            return None
        return {t.task_id: self.class_mask(t.class_subset) for t in self.tasks}


@dataclass(frozen=True)
class SyntheticSpec:
    tasks: int = 3
    classes_per_task: int = 2
    dim: int = 8
    samples_per_class: int = 60
    cluster_separation: float = 10.0
    test_per_class: int = 30
    val_fraction: float = 0.0
    budget_fraction: float = 0.5
    query_fraction: float = 0.1


# ---------------------------------------------------------- cl_strategies


@dataclass(frozen=True, eq=False)
class BufferEntry:
    input: np.ndarray
    label: int
    task_id: int
    logits: Optional[np.ndarray] = None


@dataclass(eq=False)
class ReplayBuffer:
    """Capacity-bounded store of past examples"""
    capacity: int
    policy: BufferPolicy = BufferPolicy.PER_TASK_QUOTA
    entries: List[BufferEntry] = field(default_factory=list)
    items_seen: int = 0
    tasks_seen: int = 0
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractViolation(f"buffer capacity must be positive, got {self.capacity}")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    def __len__(self) -> int:
        return len(self.entries)

    def copy(self) -> "ReplayBuffer":
        return replace(self, entries=list(self.entries), rng=copy.deepcopy(self.rng))

    def task_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for entry in self.entries:
            counts[entry.task_id] = counts.get(entry.task_id, 0) + 1
        return counts


@dataclass(frozen=True, eq=False)
class ReplaySample:
    """A batch drawn from a ReplayBuffer"""
    data: LabelledSet
    task_ids: np.ndarray
    logits: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class EwcAnchor:
    anchor_params: np.ndarray
    fisher_diag: np.ndarray
    lam: float

    def __post_init__(self):
        if self.anchor_params.shape != self.fisher_diag.shape:
            raise ContractViolation("anchor and Fisher vectors differ in length")
        if self.lam < 0 or np.any(self.fisher_diag < 0):
            raise ContractViolation("EWC lambda and Fisher entries must be non-negative")


@dataclass(frozen=True)
class CLHyper:
    """Continual-learning update settings (defaults: MNIST image tasks)"""
    strategy: CLStrategy = CLStrategy.FT
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    lambda_ewc: float = 10.0
    beta_er: float = 1.0
    alpha_der: float = 0.5
    beta_derpp: float = 0.5
    der_clip: Optional[float] = 10.0
    buffer_capacity: int = 400
    patience: Optional[int] = None
    optimizer: OptimizerHyper = OptimizerHyper()

    def __post_init__(self):
        object.__setattr__(self, "strategy", CLStrategy(self.strategy))
        if self.epochs < 1 or self.batch_size < 1 or self.buffer_capacity < 1:
            raise ContractViolation("epochs, batch_size and buffer_capacity must be positive")
        for name in ("lr", "lambda_ewc", "beta_er", "alpha_der", "beta_derpp"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")
        if self.der_clip is not None and self.der_clip <= 0:
            raise ContractViolation("der_clip must be positive (or null to disable)")
        if self.optimizer.lr != self.lr:
            object.__setattr__(self, "optimizer", replace(self.optimizer, lr=self.lr))

    @property
    def buffer_policy(self) -> BufferPolicy:
        if self.strategy in (CLStrategy.DER, CLStrategy.DERPP):
            return BufferPolicy.RESERVOIR
        return BufferPolicy.PER_TASK_QUOTA


@dataclass
class ClassExemplars:
    """iCaRL memory view: exemplar buffer positions and feature means per class"""
    indices: Dict[int, List[int]]
    means: Dict[int, np.ndarray]


# ---------------------------------------------------------- al_strategies


@dataclass(frozen=True)
class QueryBatch:
    pool_indices: List[int]
    strategy_tag: ALStrategy
    scores: Optional[List[float]] = None


# ------------------------------------------------------------- acl_engine


@dataclass(frozen=True)
class RunConfig:
    cl: CLHyper
    al_strategy: ALStrategy
    labelling_mode: LabellingMode = LabellingMode.SEQUENTIAL
    scenario: Scenario = Scenario.CLASS_IL
    seeds: Tuple[int, ...] = (0,)
    eval_every_round: bool = True
    arch: Architecture = Architecture()
    milestones: Tuple[float, ...] = (0.02, 0.04, 0.06, 0.08, 0.10)

    def __post_init__(self):
        object.__setattr__(self, "al_strategy", ALStrategy(self.al_strategy))
        object.__setattr__(self, "labelling_mode", LabellingMode(self.labelling_mode))
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if self.cl.strategy is CLStrategy.ICARL and self.scenario is not Scenario.CLASS_IL:
            raise ContractViolation("iCaRL is a class-IL method")


@dataclass
class RunLog:
    """Everything one run produces; JSON-serialisable via to_dict"""
    accuracy_matrix: List[List[float]] = field(default_factory=list)
    round_curves: List[List[List[float]]] = field(default_factory=list)
    query_history: List[List[List[int]]] = field(default_factory=list)
    milestone_matrices: Dict[str, List[List[float]]] = field(default_factory=dict)
    annotations: List[int] = field(default_factory=list)
    config_echo: Dict[str, Any] = field(default_factory=dict)
    wallclock: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        # wallclock stays out so identical runs serialise identically
        return {
            "config": self.config_echo,
            "accuracy_matrix": self.accuracy_matrix,
            "round_curves": self.round_curves,
            "query_history": self.query_history,
            "milestone_matrices": self.milestone_matrices,
            "annotations": self.annotations,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunLog":
        return cls(
            accuracy_matrix=[list(map(float, row)) for row in data["accuracy_matrix"]],
            round_curves=[[list(map(float, p)) for p in curve] for curve in data["round_curves"]],
            query_history=[[list(map(int, q)) for q in rounds] for rounds in data["query_history"]],
            milestone_matrices={
                k: [list(map(float, row)) for row in m]
                for k, m in data.get("milestone_matrices", {}).items()},
            annotations=list(map(int, data.get("annotations", []))),
            config_echo=dict(data.get("config", {})),
        )


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class ProfilePoint:
    lca: float
    forgetting_rate: float
    label: str = ""


# ------------------------------------------------------------ harness_cli


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    scenario: Scenario
    cl: Tuple[CLStrategy, ...]
    al: Tuple[ALStrategy, ...]
    modes: Tuple[LabellingMode, ...] = (LabellingMode.SEQUENTIAL,)
    seeds: Tuple[int, ...] = (0,)
    task_orders: Tuple[Tuple[int, ...], ...] = ()
    data_dir: str = "data/mnist"
    num_tasks: int = 10
    classes_per_task: int = 2
    class_order: Tuple[int, ...] = tuple(range(10))
    val_fraction: float = 0.05
    budget_fraction: float = 0.10
    query_fraction: float = 0.005
    hyper: CLHyper = CLHyper()
    arch: Architecture = Architecture()
    synthetic: SyntheticSpec = SyntheticSpec()
    include_baseline: bool = False
    ceilings: Tuple[str, ...] = ()
    milestones: Tuple[float, ...] = (0.02, 0.04, 0.06, 0.08, 0.10)
    train_limit: Optional[int] = None
    output_dir: str = "results"


@dataclass(frozen=True)
class ResultRecord:
    fingerprint: str
    descriptor: Dict[str, Any]
    run_path: Optional[str] = None
    summary: Dict[str, Optional[float]] = field(default_factory=dict)
    status: str = "ok"
    error: Optional[str] = None
    log: Optional[RunLog] = field(default=None, repr=False, compare=False)

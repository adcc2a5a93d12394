"""
Active continual learning loop

For every task: build a proxy, spend the annotation budget in query
rounds (retraining the proxy after each), then retrain the task model from
the previous checkpoint on everything labelled. Also hosts the supervised
full-data baseline and the Indiv / MTL ceilings.
"""
import hashlib
import logging
import time
from dataclasses import asdict, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .al_strategies import PoolView, global_query, query
from .cl_strategies import build_class_exemplars, fit_supervised, icarl_classify_batch, train_task
from .errors import ContractViolation
from .models import (
    ALStrategy,
    Architecture,
    ClassExemplars,
    CLHyper,
    CLStrategy,
    EwcAnchor,
    LabellingMode,
    LabelledSet,
    ModelState,
    ReplayBuffer,
    RunConfig,
    RunLog,
    Scenario,
    Task,
    TaskStream,
)
from .nn_core import init_model, predict
from .task_streams import annotate, derive_seed, reveal_all

logger = logging.getLogger(__name__)

# derive_seed keys
INIT, TASK, PROXY, QUERY, FINAL, MILESTONE, MEMORY = 10, 11, 12, 13, 14, 15, 16


def to_plain(value: Any) -> Any:
    """Dataclass/enum/tuple tree -> JSON-friendly dicts, lists and scalars"""
    if hasattr(value, "__dataclass_fields__"):
        return to_plain(asdict(value))
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def milestone_key(fraction: float) -> str:
    return f"{fraction:g}"


# -------------------------------------------------------------- evaluation


def _eval_mask(stream: TaskStream, task: Task, upto: int) -> Optional[np.ndarray]:
    if stream.scenario is Scenario.TASK_IL:
        return stream.class_mask(task.class_subset)
    if stream.scenario is Scenario.CLASS_IL:
        return stream.class_mask(stream.seen_classes(upto))
    return None


def evaluate(model: ModelState, stream: TaskStream, upto: int,
             exemplars: Optional[ClassExemplars] = None) -> List[float]:
    """
    Test accuracy of every task 0..upto.

    Class-IL predicts among the classes seen so far, task-IL among the
    task's own classes, domain-IL over the shared label set. With
    `exemplars` (iCaRL) the nearest class mean decides instead of argmax.
    """
    if not 0 <= upto < len(stream):
        raise ContractViolation(f"upto={upto} outside a stream of {len(stream)} tasks")
    accuracies = []
    for task in stream.tasks[:upto + 1]:
        if len(task.test) == 0:
            raise ContractViolation(f"task {task.task_id} has no test data")
        inputs = task.test.inputs
        if exemplars is not None and exemplars.means:
            preds = icarl_classify_batch(model, inputs, exemplars)
        else:
            preds = predict(model, inputs, _eval_mask(stream, task, upto))
        accuracies.append(float(np.mean(preds == task.test.labels)))
    return accuracies


def _check_compatible(stream: TaskStream, arch: Architecture):
    if stream.tasks[0].dim != arch.input_dim:
        raise ContractViolation(f"stream inputs have {stream.tasks[0].dim} features, model expects {arch.input_dim}")
    if stream.num_classes_total != arch.num_classes:
        raise ContractViolation(
            f"stream has {stream.num_classes_total} classes, model outputs {arch.num_classes}")


# ------------------------------------------------------------ the ACL loop


class ACLRunner:
    """One (stream, config, seed) run; holds the CL state between tasks"""

    def __init__(self, stream: TaskStream, config: RunConfig, seed: int):
        if config.scenario is not stream.scenario:
            raise ContractViolation(
                f"config scenario {config.scenario.value} != stream scenario {stream.scenario.value}")
        _check_compatible(stream, config.arch)
        self.stream = stream
        self.config = config
        self.hyper: CLHyper = config.cl
        self.seed = seed
        self.masks = stream.training_masks()

        self.checkpoint: ModelState = init_model(config.arch, derive_seed(seed, INIT, 0))
        self.buffer = ReplayBuffer(capacity=self.hyper.buffer_capacity,
                                   policy=self.hyper.buffer_policy,
                                   seed=derive_seed(seed, MEMORY))
        self.anchor: Optional[EwcAnchor] = None
        self.log = RunLog(config_echo=self.describe())

    def describe(self) -> Dict[str, Any]:
        echo = to_plain(self.config)
        echo.pop("seeds", None)
        echo["seed"] = self.seed
        echo["num_tasks"] = len(self.stream)
        return echo

    # ---- training helpers

    def _query_mask(self, task: Task) -> Optional[np.ndarray]:
        return None if self.masks is None else self.masks[task.task_id]

    def _can_train(self, task: Task) -> bool:
        if len(task.labelled):
            return True
        return self.hyper.strategy is CLStrategy.GDUMB and len(self.buffer) > 0

    def retrain(self, start: ModelState, task: Task, seed: int
                ) -> Tuple[ModelState, ReplayBuffer, Optional[EwcAnchor]]:
        """CL update from `start` on the task's current labelled set"""
        if not self._can_train(task):
            logger.warning("task %d: nothing labelled yet, keeping the starting model", task.task_id)
            return start, self.buffer, self.anchor
        return train_task(self.hyper, start, task, self.buffer, self.anchor, seed, self.masks)

    def proxy_start(self, task_index: int) -> ModelState:
        if self.config.labelling_mode is LabellingMode.INDEPENDENT:
            return init_model(self.config.arch, derive_seed(self.seed, INIT, task_index))
        return self.checkpoint

    def _exemplars(self, model: ModelState, memory: ReplayBuffer) -> Optional[ClassExemplars]:
        if self.hyper.strategy is not CLStrategy.ICARL or not memory.entries:
            return None
        return build_class_exemplars(model, memory)

    def _accuracy_row(self, model: ModelState, memory: ReplayBuffer, upto: int) -> List[float]:
        return evaluate(model, self.stream, upto, self._exemplars(model, memory))

    def _curve_point(self, model: ModelState, memory: ReplayBuffer, upto: int) -> List[float]:
        row = self._accuracy_row(model, memory, upto)
        return [row[upto], float(np.mean(row))]

    # ---- one task

    def _milestone_targets(self, task: Task) -> Dict[str, int]:
        return {milestone_key(f): max(1, int(np.floor(f * task.initial_pool_size)))
                for f in self.config.milestones}

    def run_task(self, index: int, task: Task, milestones: Dict[str, List[List[float]]]) -> Task:
        task_seed = derive_seed(self.seed, TASK, index)
        start = self.proxy_start(index)
        proxy, proxy_memory, _ = self.retrain(start, task, derive_seed(task_seed, PROXY, 0))
        curve = [self._curve_point(proxy, proxy_memory, index)]
        history: List[List[int]] = []
        pending = self._milestone_targets(task)

        rounds = 0
        while task.budget > 0 and task.pool_size > 0:
            k = min(task.query_size, task.budget, task.pool_size)
            batch = query(self.config.al_strategy, proxy, task, k,
                          derive_seed(task_seed, QUERY, rounds), self._query_mask(task))
            task = annotate(task, batch.pool_indices)
            history.append(list(batch.pool_indices))
            rounds += 1
            proxy, proxy_memory, _ = self.retrain(start, task, derive_seed(task_seed, PROXY, rounds))
            last_round = task.budget == 0 or task.pool_size == 0
            if self.config.eval_every_round or last_round:
                curve.append(self._curve_point(proxy, proxy_memory, index))

            reached = [key for key, target in pending.items() if task.num_annotated >= target]
            for position, key in enumerate(reached):
                model, memory = proxy, proxy_memory
                if self.config.labelling_mode is LabellingMode.INDEPENDENT:
                    model, memory, _ = self.retrain(
                        self.checkpoint, task, derive_seed(task_seed, MILESTONE, rounds, position))
                milestones.setdefault(key, []).append(self._accuracy_row(model, memory, index))
                del pending[key]
            logger.debug("task %d round %d: %d annotated, current acc %.4f",
                         index, rounds, task.num_annotated, curve[-1][0])

        self.checkpoint, self.buffer, self.anchor = self.retrain(
            self.checkpoint, task, derive_seed(task_seed, FINAL))
        row = self._accuracy_row(self.checkpoint, self.buffer, index)
        self.log.accuracy_matrix.append(row)
        self.log.round_curves.append(curve)
        self.log.query_history.append(history)
        self.log.annotations.append(task.num_annotated)
        logger.info("task %d done: %d rounds, %d labels, avg acc %.4f",
                    index, rounds, task.num_annotated, float(np.mean(row)))
        return task

    def run(self) -> RunLog:
        started = time.perf_counter()
        milestones: Dict[str, List[List[float]]] = {}
        for index, task in enumerate(self.stream.tasks):
            self.run_task(index, task, milestones)
        # only milestones reached on every task give a full matrix
        self.log.milestone_matrices = {
            key: rows for key, rows in milestones.items() if len(rows) == len(self.stream)}
        self.log.wallclock = time.perf_counter() - started
        return self.log

    def run_supervised(self) -> RunLog:
        started = time.perf_counter()
        for index, task in enumerate(self.stream.tasks):
            task = reveal_all(task)
            task_seed = derive_seed(self.seed, TASK, index)
            self.checkpoint, self.buffer, self.anchor = self.retrain(
                self.checkpoint, task, derive_seed(task_seed, FINAL))
            self.log.accuracy_matrix.append(self._accuracy_row(self.checkpoint, self.buffer, index))
            self.log.annotations.append(task.num_annotated)
            logger.info("task %d (full data): avg acc %.4f",
                        index, float(np.mean(self.log.accuracy_matrix[-1])))
        self.log.wallclock = time.perf_counter() - started
        return self.log


def run_acl(stream: TaskStream, config: RunConfig, seed: int) -> RunLog:
    return ACLRunner(stream, config, seed).run()


def run_supervised_cl(stream: TaskStream, config: RunConfig, seed: int) -> RunLog:
    """Every pool pre-annotated, no AL rounds; round curves stay empty"""
    return ACLRunner(stream, config, seed).run_supervised()


# --------------------------------------------------------------- ceilings


def task_fingerprint(task: Task) -> int:
    """Content hash of a task (class subset, pool size, leading pool rows)"""
    digest = hashlib.sha256()
    digest.update(repr(task.class_subset).encode())
    digest.update(str(task.initial_pool_size).encode())
    digest.update(task.pool_inputs(np.arange(min(16, task.initial_pool_size))).tobytes())
    return int.from_bytes(digest.digest()[:4], "big")


def _joint_data(tasks: List[Task], masks) -> Tuple[LabelledSet, Optional[np.ndarray]]:
    parts = [t.labelled for t in tasks]
    data = LabelledSet.concat(parts)
    row_masks = None
    if masks is not None:
        row_masks = np.concatenate([
            np.broadcast_to(masks[t.task_id], (len(p), masks[t.task_id].size))
            for t, p in zip(tasks, parts)])
    return data, row_masks


def _mtl_core(stream: TaskStream, al_strategy: ALStrategy, hyper: CLHyper, seed: int,
              arch: Architecture) -> List[float]:
    """One model on the union of labelled sets; budget-gated joint queries"""
    _check_compatible(stream, arch)
    al_strategy = ALStrategy(al_strategy)
    run_seed = derive_seed(seed, *sorted(task_fingerprint(t) for t in stream.tasks))
    masks = stream.training_masks()
    fresh = init_model(arch, derive_seed(run_seed, INIT))
    tasks = list(stream.tasks)

    def train(rounds: int) -> ModelState:
        data, row_masks = _joint_data(tasks, masks)
        if len(data) == 0:
            return fresh
        return fit_supervised(fresh, data.inputs, data.labels, row_masks, hyper,
                              derive_seed(run_seed, PROXY, rounds))

    model = train(0)
    rounds = 0
    while True:
        active = [t for t in tasks if t.budget > 0 and t.pool_size > 0]
        if not active:
            break
        views = [PoolView(t, t.pool_indices, None if masks is None else masks[t.task_id])
                 for t in active]
        allowance = {t.task_id: min(t.budget, t.pool_size) for t in active}
        round_size = sum(t.query_size for t in active)
        picked = global_query(al_strategy, model, views, allowance, round_size,
                              derive_seed(run_seed, QUERY, rounds))
        if not any(picked.values()):
            break
        tasks = [annotate(t, picked[t.task_id]) if picked.get(t.task_id) else t for t in tasks]
        rounds += 1
        model = train(rounds)

    final_classes = stream.seen_classes(len(stream) - 1)
    accuracies = []
    for task in stream.tasks:
        if stream.scenario is Scenario.TASK_IL:
            mask = stream.class_mask(task.class_subset)
        elif stream.scenario is Scenario.CLASS_IL:
            mask = stream.class_mask(final_classes)
        else:
            mask = None
        accuracies.append(float(np.mean(predict(model, task.test.inputs, mask) == task.test.labels)))
    logger.info("MTL ceiling over %d task(s): %d rounds, mean acc %.4f",
                len(stream), rounds, float(np.mean(accuracies)))
    return accuracies


def run_ceiling_mtl(stream: TaskStream, al_strategy: ALStrategy, hyper: CLHyper, seed: int,
                    arch: Optional[Architecture] = None) -> List[float]:
    return _mtl_core(stream, al_strategy, hyper, seed, arch or Architecture())


def run_ceiling_indiv(stream: TaskStream, al_strategy: ALStrategy, hyper: CLHyper, seed: int,
                      arch: Optional[Architecture] = None) -> List[float]:
    """A separate model and AL loop per task; evaluated within the task's classes"""
    arch = arch or Architecture()
    accuracies = []
    for task in stream.tasks:
        single = TaskStream(tasks=(replace(task, task_id=0),), scenario=stream.scenario,
                            num_classes_total=stream.num_classes_total)
        accuracies.extend(_mtl_core(single, al_strategy, hyper, seed, arch))
    return accuracies

"""
Replay memory: per-task quota insertion, reservoir insertion, sampling
"""
import logging
import math
from dataclasses import replace
from typing import Optional, Union

import numpy as np

from .errors import ContractViolation
from .models import BufferEntry, BufferPolicy, LabelledSet, ReplayBuffer, ReplaySample, Task

logger = logging.getLogger(__name__)

RngLike = Union[int, np.random.Generator]


def _rng(seed: RngLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def buffer_insert_task_end(buffer: ReplayBuffer, task: Task, seed: int) -> ReplayBuffer:
    """
    Quota update after a task finishes: every stored task keeps at most
    ceil(m / tasks_seen) uniformly drawn entries, then the new task fills
    its quota from its labelled data. Returns a new buffer.
    """
    if BufferPolicy(buffer.policy) is not BufferPolicy.PER_TASK_QUOTA:
        raise ContractViolation("task-end insertion needs a per_task_quota buffer")
    rng = np.random.default_rng(seed)
    tasks_seen = buffer.tasks_seen + 1
    quota = math.ceil(buffer.capacity / tasks_seen)

    kept = []
    for task_id in sorted(buffer.task_counts()):
        owned = [e for e in buffer.entries if e.task_id == task_id]
        if len(owned) > quota:
            keep = np.sort(rng.choice(len(owned), size=quota, replace=False))
            owned = [owned[i] for i in keep]
        kept.extend(owned)

    labelled = task.labelled
    room = min(quota, len(labelled), buffer.capacity - len(kept))
    if room > 0:
        chosen = np.sort(rng.choice(len(labelled), size=room, replace=False))
        inputs = labelled.rows(chosen)
        for row, index in zip(inputs, chosen):
            kept.append(BufferEntry(input=row, label=int(labelled.labels[index]), task_id=task.task_id))

    logger.debug("Buffer after task %d: %d entries, quota %d", task.task_id, len(kept), quota)
    return replace(buffer, entries=kept, tasks_seen=tasks_seen,
                   items_seen=buffer.items_seen + len(labelled))


def buffer_reservoir_insert(buffer: ReplayBuffer, item: BufferEntry) -> ReplayBuffer:
    """
    Classic reservoir step, applied in place: the k-th item seen replaces a
    uniform slot with probability m/k once the buffer is full.
    """
    if BufferPolicy(buffer.policy) is not BufferPolicy.RESERVOIR:
        raise ContractViolation("reservoir insertion needs a reservoir buffer")
    buffer.items_seen += 1
    if len(buffer.entries) < buffer.capacity:
        buffer.entries.append(item)
    else:
        slot = int(buffer.rng.integers(0, buffer.items_seen))
        if slot < buffer.capacity:
            buffer.entries[slot] = item
    return buffer


def replay_batch(buffer: ReplayBuffer, k: int, seed: RngLike,
                 exclude_task: Optional[int] = None) -> ReplaySample:
    """k uniform draws with replacement; optionally skipping one task's entries"""
    entries = buffer.entries
    if exclude_task is not None:
        entries = [e for e in entries if e.task_id != exclude_task]
    if not entries:
        raise ContractViolation("replay from an empty buffer")
    if k < 1:
        raise ContractViolation(f"replay batch size must be positive, got {k}")
    picks = _rng(seed).integers(0, len(entries), size=k)
    chosen = [entries[i] for i in picks]
    data = LabelledSet(np.stack([e.input for e in chosen]), np.array([e.label for e in chosen]))
    logits = None
    if all(e.logits is not None for e in chosen):
        logits = np.stack([e.logits for e in chosen])
    return ReplaySample(data=data, task_ids=np.array([e.task_id for e in chosen]), logits=logits)


def buffer_as_labelled(buffer: ReplayBuffer) -> LabelledSet:
    """All stored entries in insertion order"""
    if not buffer.entries:
        raise ContractViolation("buffer is empty")
    return LabelledSet(np.stack([e.input for e in buffer.entries]),
                       np.array([e.label for e in buffer.entries]))


def has_replay(buffer: Optional[ReplayBuffer], exclude_task: Optional[int] = None) -> bool:
    if buffer is None:
        return False
    return any(e.task_id != exclude_task for e in buffer.entries)

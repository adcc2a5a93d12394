"""
Continual-learning updates: train a checkpoint on the current task's
labelled data with a strategy-specific loss

FT, EWC, ER, AGEM, GDumb, DER, DER++ and iCaRL share one minibatch loop;
the strategies differ in the gradient they add per step and in how the
replay memory / EWC anchor is refreshed at task end.
"""
import logging
import math
from dataclasses import replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .buffer import (
    buffer_as_labelled,
    buffer_insert_task_end,
    buffer_reservoir_insert,
    has_replay,
    replay_batch,
)
from .errors import ContractViolation
from .models import (
    Architecture,
    BufferEntry,
    ClassExemplars,
    CLHyper,
    CLStrategy,
    EwcAnchor,
    LabelledSet,
    ModelState,
    ReplayBuffer,
    ReplaySample,
    Task,
)
from .nn_core import (
    backprop_logits,
    forward,
    init_model,
    loss_and_grad,
    optimizer_step,
    squared_grad_mean,
)
from .task_streams import derive_seed

logger = logging.getLogger(__name__)

# derive_seed keys
SHUFFLE, REPLAY, MEMORY = 1, 2, 3

Masks = Optional[Dict[int, np.ndarray]]
# (model, batch inputs, batch labels) -> (extra loss, extra grad) or None
StepHook = Callable[[ModelState, np.ndarray, np.ndarray], Optional[Tuple[float, np.ndarray]]]


def _row_masks(masks: Masks, task_ids: np.ndarray) -> Optional[np.ndarray]:
    if masks is None:
        return None
    return np.stack([masks[int(t)] for t in task_ids])


# ------------------------------------------------------------------ EWC


def ewc_fisher_diag(model: ModelState, data: LabelledSet,
                    class_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Diagonal empirical Fisher: mean squared per-sample CE gradient"""
    if len(data) == 0:
        raise ContractViolation("Fisher estimate needs data")
    return squared_grad_mean(model, data.inputs, data.labels, class_mask)


def ewc_penalty(model: ModelState, anchor: EwcAnchor) -> Tuple[float, np.ndarray]:
    if anchor.anchor_params.shape != model.params.shape:
        raise ContractViolation(
            f"anchor length {anchor.anchor_params.size} != model length {model.params.size}")
    diff = model.params - anchor.anchor_params
    weighted = anchor.fisher_diag * diff
    return float(anchor.lam * np.dot(weighted, diff)), 2.0 * anchor.lam * weighted


# ------------------------------------------------------------ replay terms


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Drop the component of g that conflicts with the reference gradient"""
    g = np.asarray(g, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    if g.shape != g_ref.shape:
        raise ContractViolation("gradient lengths differ")
    dot = float(np.dot(g, g_ref))
    if dot >= 0.0:
        return g
    return g - (dot / float(np.dot(g_ref, g_ref))) * g_ref


def der_loss_terms(model: ModelState, replay: ReplaySample, alpha: float, beta_derpp: float,
                   class_mask: Optional[np.ndarray] = None,
                   max_grad_norm: Optional[float] = None) -> Tuple[float, np.ndarray]:
    """
    Logit matching on replayed samples (DER) plus optional replay CE (DER++).

    loss = alpha * mean ||z - z_stored||^2 + beta_derpp * CE(replay labels)

    The squared term has curvature growing with ||x||^2, so on large inputs
    a plain step overshoots and diverges. max_grad_norm rescales the
    logit-matching gradient to at most that L2 norm; None leaves it exact.
    """
    if replay.logits is None:
        raise ContractViolation("DER replay needs stored logits")
    loss, grad = 0.0, np.zeros_like(model.params)
    inputs = replay.data.inputs
    n = inputs.shape[0]
    if alpha > 0.0:
        diff = forward(model, inputs).logits - replay.logits
        loss += alpha * float(np.sum(diff ** 2)) / n
        match = backprop_logits(model, inputs, (2.0 * alpha / n) * diff)
        if max_grad_norm is not None:
            norm = float(np.linalg.norm(match))
            if norm > max_grad_norm:
                match *= max_grad_norm / norm
        grad += match
    if beta_derpp > 0.0:
        ce_loss, ce_grad = loss_and_grad(model, inputs, replay.data.labels, class_mask)
        loss += beta_derpp * ce_loss
        grad += beta_derpp * ce_grad
    return loss, grad


# ------------------------------------------------------------- main loop


def _mean_loss(model: ModelState, data: LabelledSet, class_mask) -> float:
    loss, _ = loss_and_grad(model, data.inputs, data.labels, class_mask)
    return loss


def fit_supervised(model: ModelState, inputs: np.ndarray, labels: np.ndarray,
                   row_masks: Optional[np.ndarray], hyper: CLHyper, seed: int,
                   hook: Optional[StepHook] = None,
                   project: Optional[Callable[[ModelState, np.ndarray], np.ndarray]] = None,
                   val: Optional[LabelledSet] = None,
                   val_mask: Optional[np.ndarray] = None) -> ModelState:
    """Minibatch SGD/Adam over (inputs, labels) for hyper.epochs epochs"""
    n = inputs.shape[0]
    shuffle = np.random.default_rng(derive_seed(seed, SHUFFLE))
    watch = hyper.patience is not None and val is not None and len(val) > 0
    best_loss, best_params, stale = math.inf, None, 0

    for epoch in range(hyper.epochs):
        order = shuffle.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            x, y = inputs[batch], labels[batch]
            mask = None if row_masks is None else row_masks[batch]
            loss, grad = loss_and_grad(model, x, y, mask)
            if hook is not None:
                extra = hook(model, x, y)
                if extra is not None:
                    loss += extra[0]
                    grad = grad + extra[1]
            if project is not None:
                grad = project(model, grad)
            model = optimizer_step(model, grad, hyper.optimizer)
            epoch_loss += loss * len(batch)
        logger.debug("epoch %d: train loss %.4f", epoch, epoch_loss / max(n, 1))

        if watch:
            val_loss = _mean_loss(model, val, val_mask)
            if val_loss < best_loss:
                best_loss, best_params, stale = val_loss, model.params.copy(), 0
            else:
                stale += 1
                if stale >= hyper.patience:
                    logger.debug("early stop after epoch %d (val loss %.4f)", epoch, best_loss)
                    break
    if watch and best_params is not None:
        model = replace(model, params=best_params)
    return model


def train_task(hyper: CLHyper, start: ModelState, task: Task, buffer: Optional[ReplayBuffer] = None,
               ewc: Optional[EwcAnchor] = None, seed: int = 0, masks: Masks = None,
               ) -> Tuple[ModelState, Optional[ReplayBuffer], Optional[EwcAnchor]]:
    """
    One application of the CL update to `start` on `task.labelled`.

    `masks` maps task ids to output masks (task-IL); replayed rows use the
    mask of the task that stored them. The incoming buffer is never
    modified; the returned one reflects this task's insertions.

    Returns:
        (trained model, updated buffer, EWC anchor for the next task)
    """
    strategy = hyper.strategy
    if strategy is CLStrategy.GDUMB:
        if buffer is None:
            raise ContractViolation("GDumb needs a replay buffer")
        memory = buffer_insert_task_end(buffer, task, derive_seed(seed, MEMORY))
        if not memory.entries:
            raise ContractViolation("GDumb has nothing to train on")
        return gdumb_train(memory, start.arch, hyper, seed, masks), memory, ewc

    data = task.labelled
    if len(data) == 0:
        raise ContractViolation(f"task {task.task_id}: empty labelled set")
    if ewc is not None and ewc.anchor_params.shape != start.params.shape:
        raise ContractViolation("EWC anchor does not match the model")
    needs_buffer = strategy in (CLStrategy.ER, CLStrategy.AGEM, CLStrategy.DER,
                                CLStrategy.DERPP, CLStrategy.ICARL)
    if needs_buffer and buffer is None:
        raise ContractViolation(f"{strategy.value} needs a replay buffer")

    current_mask = None if masks is None else masks[task.task_id]
    row_masks = None if masks is None else np.broadcast_to(current_mask, (len(data), current_mask.size))
    replay_rng = np.random.default_rng(derive_seed(seed, REPLAY))
    memory = buffer.copy() if buffer is not None else None
    hook, project = None, None

    if strategy is CLStrategy.EWC and ewc is not None and ewc.lam > 0.0:
        def hook(model, x, y):
            return ewc_penalty(model, ewc)

    elif strategy in (CLStrategy.ER, CLStrategy.ICARL) and hyper.beta_er > 0.0 and has_replay(memory):
        def hook(model, x, y):
            replay = replay_batch(memory, len(y), replay_rng)
            loss, grad = loss_and_grad(model, replay.data.inputs, replay.data.labels,
                                       _row_masks(masks, replay.task_ids))
            return hyper.beta_er * loss, hyper.beta_er * grad

    elif strategy is CLStrategy.AGEM and has_replay(memory):
        def project(model, grad):
            replay = replay_batch(memory, hyper.batch_size, replay_rng)
            _, g_ref = loss_and_grad(model, replay.data.inputs, replay.data.labels,
                                     _row_masks(masks, replay.task_ids))
            return agem_project(grad, g_ref)

    elif strategy in (CLStrategy.DER, CLStrategy.DERPP):
        beta = hyper.beta_derpp if strategy is CLStrategy.DERPP else 0.0
        replay_on = hyper.alpha_der > 0.0 or beta > 0.0

        def hook(model, x, y):
            extra = None
            if replay_on and has_replay(memory, exclude_task=task.task_id):
                replay = replay_batch(memory, len(y), replay_rng, exclude_task=task.task_id)
                extra = der_loss_terms(model, replay, hyper.alpha_der, beta,
                                       _row_masks(masks, replay.task_ids),
                                       max_grad_norm=hyper.der_clip)
            for row, label, logits in zip(x, y, forward(model, x).logits):
                buffer_reservoir_insert(memory, BufferEntry(
                    input=row, label=int(label), task_id=task.task_id, logits=logits))
            return extra

    model = replace(start, params=start.params.copy(), opt_state={}, step=0)
    model = fit_supervised(model, data.inputs, data.labels, row_masks, hyper, seed, hook, project,
                           val=task.val, val_mask=current_mask)

    anchor = ewc
    if strategy is CLStrategy.EWC:
        anchor = EwcAnchor(anchor_params=model.params.copy(),
                           fisher_diag=ewc_fisher_diag(model, data, current_mask),
                           lam=hyper.lambda_ewc)
    elif strategy in (CLStrategy.ER, CLStrategy.AGEM):
        memory = buffer_insert_task_end(memory, task, derive_seed(seed, MEMORY))
    elif strategy is CLStrategy.ICARL:
        memory = icarl_update_memory(model, memory, task)
    return model, memory, anchor


def gdumb_train(buffer: ReplayBuffer, arch: Architecture, hyper: CLHyper, seed: int,
                masks: Masks = None) -> ModelState:
    """Fresh model trained on the memory contents only"""
    if not buffer.entries:
        raise ContractViolation("GDumb needs a non-empty buffer")
    data = buffer_as_labelled(buffer)
    row_masks = _row_masks(masks, np.array([e.task_id for e in buffer.entries]))
    return fit_supervised(init_model(arch, seed), data.inputs, data.labels, row_masks, hyper, seed)


# ------------------------------------------------------------------ iCaRL


def icarl_herding(features: np.ndarray, m: int) -> list:
    """Greedy exemplar order keeping the running mean close to the class mean"""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 1 <= m <= n:
        raise ContractViolation(f"cannot herd {m} exemplars from {n} samples")
    mu = features.mean(axis=0)
    chosen, total = [], np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    for k in range(1, m + 1):
        gaps = np.linalg.norm(mu - (total + features) / k, axis=1)
        gaps[~available] = np.inf
        pick = int(np.argmin(gaps))
        chosen.append(pick)
        available[pick] = False
        total += features[pick]
    return chosen


def icarl_update_memory(model: ModelState, buffer: ReplayBuffer, task: Task) -> ReplayBuffer:
    """Class-balanced exemplar memory: floor(m / classes seen) per class"""
    old = sorted({e.label for e in buffer.entries})
    classes = sorted(set(old) | set(task.class_subset))
    quota = buffer.capacity // len(classes)

    entries = []
    for c in old:
        entries.extend([e for e in buffer.entries if e.label == c][:quota])

    data = task.labelled
    for c in task.class_subset:
        members = np.flatnonzero(data.labels == c)
        take = min(quota, members.size)
        if take == 0:
            continue
        inputs = data.rows(members)
        for pick in icarl_herding(forward(model, inputs).penultimate, take):
            entries.append(BufferEntry(input=inputs[pick], label=int(c), task_id=task.task_id))
    logger.debug("iCaRL memory: %d classes, %d exemplars each at most", len(classes), quota)
    return replace(buffer, entries=entries, tasks_seen=buffer.tasks_seen + 1,
                   items_seen=buffer.items_seen + len(data))


def build_class_exemplars(model: ModelState, buffer: ReplayBuffer) -> ClassExemplars:
    """Per-class exemplar positions and their mean penultimate features"""
    if not buffer.entries:
        raise ContractViolation("no exemplars stored")
    indices: Dict[int, list] = {}
    for position, entry in enumerate(buffer.entries):
        indices.setdefault(entry.label, []).append(position)
    features = forward(model, buffer_as_labelled(buffer).inputs).penultimate
    means = {c: features[idx].mean(axis=0) for c, idx in sorted(indices.items())}
    return ClassExemplars(indices=dict(sorted(indices.items())), means=means)


def icarl_classify_batch(model: ModelState, inputs: np.ndarray, exemplars: ClassExemplars) -> np.ndarray:
    """Nearest class mean in feature space; lowest class id wins ties"""
    if not exemplars.means:
        raise ContractViolation("no class means to compare against")
    classes = np.array(sorted(exemplars.means))
    centres = np.stack([exemplars.means[c] for c in classes])
    features = forward(model, inputs).penultimate
    return classes[np.argmin(cdist(features, centres), axis=1)]


def icarl_classify(model: ModelState, input: np.ndarray, exemplars: ClassExemplars) -> int:
    x = np.asarray(input, dtype=np.float64).reshape(1, -1)
    return int(icarl_classify_batch(model, x, exemplars)[0])

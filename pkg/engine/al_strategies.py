"""
Acquisition functions: score or select unlabelled pool items

Uncertainty scores (entropy, min-margin) rank by the proxy's predictive
distribution; BADGE, coreset and embedding k-means pick diverse subsets of
gradient or penultimate-feature embeddings.
"""
import logging
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import entr
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .errors import BudgetError, ContractViolation
from .models import ALStrategy, ModelState, QueryBatch, Task
from .nn_core import forward, per_sample_output_grads

logger = logging.getLogger(__name__)

# n_pool x e penultimate features, or n_pool x C*(h+1) gradient embeddings
PoolEmbedding = np.ndarray

UNCERTAINTY = (ALStrategy.ENTROPY, ALStrategy.MARGIN)
KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


def _check_distributions(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ContractViolation(f"expected a probability matrix, got shape {probs.shape}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ContractViolation("rows must be probability distributions")
    return probs


def score_entropy(probs: np.ndarray) -> np.ndarray:
    """Natural-log predictive entropy per row (0 log 0 = 0)"""
    return entr(_check_distributions(probs)).sum(axis=1)


def score_margin(probs: np.ndarray) -> np.ndarray:
    """Negative gap between the two most probable classes"""
    probs = _check_distributions(probs)
    if probs.shape[1] < 2:
        raise ContractViolation("margin needs at least two classes")
    top2 = np.sort(probs, axis=1)[:, -2:]
    return top2[:, 0] - top2[:, 1]


def select_top_k(scores: Sequence[float], k: int) -> List[int]:
    """Indices of the k largest scores, descending; lower index wins ties"""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= k <= scores.size:
        raise ContractViolation(f"cannot select {k} of {scores.size}")
    return [int(i) for i in np.argsort(-scores, kind="stable")[:k]]


def _check_k(n: int, k: int):
    if not 0 <= k <= n:
        raise ContractViolation(f"cannot select {k} of {n} pool items")


def kmeanspp_seed(embeddings: PoolEmbedding, k: int, rng: np.random.Generator) -> List[int]:
    """
    D^2 sampling: first index uniform, each next one drawn with probability
    proportional to its squared distance to the nearest chosen index.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    _check_k(n, k)
    if k == 0:
        return []
    chosen = [int(rng.integers(n))]
    closest = cdist(embeddings, embeddings[chosen], "sqeuclidean").ravel()
    while len(chosen) < k:
        closest[chosen] = 0.0
        total = closest.sum()
        if total > 0.0:
            pick = int(rng.choice(n, p=closest / total))
        else:
            # every remaining point coincides with a centre
            remaining = np.setdiff1d(np.arange(n), chosen)
            pick = int(rng.choice(remaining))
        chosen.append(pick)
        closest = np.minimum(closest, cdist(embeddings, embeddings[pick:pick + 1], "sqeuclidean").ravel())
    return chosen


def badge_select(grad_embeddings: PoolEmbedding, k: int, seed: int) -> List[int]:
    return kmeanspp_seed(grad_embeddings, k, np.random.default_rng(seed))


def _min_distances(points: np.ndarray, reference: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty(points.shape[0])
    for start in range(0, points.shape[0], chunk):
        out[start:start + chunk] = cdist(points[start:start + chunk], reference).min(axis=1)
    return out


def coreset_select(pool_emb: PoolEmbedding, labelled_emb: Optional[np.ndarray], k: int) -> List[int]:
    """Greedy k-center; starts at index 0 when nothing is labelled"""
    pool_emb = np.asarray(pool_emb, dtype=np.float64)
    n = pool_emb.shape[0]
    _check_k(n, k)
    if labelled_emb is not None and len(labelled_emb):
        mins = _min_distances(pool_emb, np.asarray(labelled_emb, dtype=np.float64))
    else:
        mins = np.full(n, np.inf)
    chosen = []
    for _ in range(k):
        pick = int(np.argmax(mins))
        chosen.append(pick)
        mins = np.minimum(mins, cdist(pool_emb, pool_emb[pick:pick + 1]).ravel())
        mins[chosen] = -1.0
    return chosen


def sklearn_tol(pool_emb: np.ndarray, shift: float = KMEANS_TOL) -> float:
    """
    sklearn stops when the summed squared centre shift falls below
    tol * mean feature variance; this returns the tol that makes that
    test equal to an absolute centre shift below `shift`.
    """
    scale = float(np.var(pool_emb, axis=0).mean())
    return shift ** 2 / scale if scale > 0.0 else 0.0


def kmeans_select(pool_emb: PoolEmbedding, k: int, seed: int) -> List[int]:
    """
    Lloyd's k-means (k-means++ init under seed); the pool item nearest each
    centroid is taken, falling back to the next nearest when already used.
    """
    pool_emb = np.asarray(pool_emb, dtype=np.float64)
    n = pool_emb.shape[0]
    _check_k(n, k)
    if k == 0:
        return []
    if k == n:
        return list(range(n))
    init = pool_emb[kmeanspp_seed(pool_emb, k, np.random.default_rng(seed))]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=k, init=init, n_init=1, max_iter=KMEANS_MAX_ITER,
                    tol=sklearn_tol(pool_emb), algorithm="lloyd", random_state=seed).fit(pool_emb)
    distances = cdist(km.cluster_centers_, pool_emb)
    taken, chosen = set(), []
    for row in distances:
        for candidate in np.argsort(row, kind="stable"):
            if int(candidate) not in taken:
                taken.add(int(candidate))
                chosen.append(int(candidate))
                break
    return chosen


# ----------------------------------------------------------- pool scoring


@dataclass
class PoolView:
    """Unlabelled rows of one task as seen by an acquisition function"""
    task: Task
    indices: np.ndarray
    class_mask: Optional[np.ndarray] = None


def _pool_features(strategy: ALStrategy, proxy: ModelState, views: Sequence[PoolView],
                   chunk: int = 4096) -> np.ndarray:
    """Scores (uncertainty) or embeddings (diversity), in canonical pool order"""
    blocks = []
    for view in views:
        for start in range(0, view.indices.size, chunk):
            x = view.task.pool_inputs(view.indices[start:start + chunk])
            if strategy is ALStrategy.BADGE:
                blocks.append(per_sample_output_grads(proxy, x, view.class_mask))
                continue
            trace = forward(proxy, x, view.class_mask)
            if strategy is ALStrategy.ENTROPY:
                blocks.append(score_entropy(trace.probs))
            elif strategy is ALStrategy.MARGIN:
                blocks.append(score_margin(trace.probs))
            else:
                blocks.append(trace.penultimate)
    return np.concatenate(blocks)


def _labelled_features(proxy: ModelState, tasks: Sequence[Task]) -> Optional[np.ndarray]:
    parts = [forward(proxy, t.labelled.inputs).penultimate for t in tasks if len(t.labelled)]
    return np.concatenate(parts) if parts else None


def _select(strategy: ALStrategy, features: np.ndarray, k: int, seed: int,
            labelled: Optional[np.ndarray]) -> List[int]:
    if strategy is ALStrategy.RANDOM:
        _check_k(features.shape[0], k)
        return [int(i) for i in np.random.default_rng(seed).choice(features.shape[0], size=k, replace=False)]
    if strategy in UNCERTAINTY:
        return select_top_k(features, k)
    if strategy is ALStrategy.BADGE:
        return badge_select(features, k, seed)
    if strategy is ALStrategy.CORESET:
        return coreset_select(features, labelled, k)
    return kmeans_select(features, k, seed)


def query(strategy: ALStrategy, proxy: ModelState, task: Task, k: int, seed: int,
          class_mask: Optional[np.ndarray] = None) -> QueryBatch:
    """Pick k unlabelled items of `task`; returned indices address its initial pool"""
    strategy = ALStrategy(strategy)
    pool = task.pool_indices
    if pool.size == 0:
        raise BudgetError(f"task {task.task_id}: pool is empty")
    if k < 1 or k > min(pool.size, task.budget):
        raise BudgetError(
            f"task {task.task_id}: query of {k} with pool {pool.size} and budget {task.budget}")

    if strategy is ALStrategy.RANDOM:
        features = np.zeros((pool.size, 0))
    else:
        features = _pool_features(strategy, proxy, [PoolView(task, pool, class_mask)])
    labelled = _labelled_features(proxy, [task]) if strategy is ALStrategy.CORESET else None
    picks = _select(strategy, features, k, seed, labelled)
    scores = [float(features[i]) for i in picks] if strategy in UNCERTAINTY else None
    logger.debug("task %d: %s picked %d of %d", task.task_id, strategy.value, len(picks), pool.size)
    return QueryBatch(pool_indices=[int(pool[i]) for i in picks], strategy_tag=strategy, scores=scores)


def global_query(strategy: ALStrategy, proxy: ModelState, views: Sequence[PoolView],
                 allowance: Dict[int, int], round_size: int, seed: int) -> Dict[int, List[int]]:
    """
    Rank the pools of several tasks jointly and walk the ranking, skipping
    items whose task has used up its allowance, until `round_size` items
    are taken. Returns initial-pool indices per task id.
    """
    strategy = ALStrategy(strategy)
    owners = np.concatenate([np.full(v.indices.size, v.task.task_id) for v in views])
    positions = np.concatenate([v.indices for v in views])
    n = positions.size
    round_size = min(round_size, n, sum(allowance.values()))

    if strategy is ALStrategy.RANDOM:
        features = np.zeros((n, 0))
    else:
        features = _pool_features(strategy, proxy, views)
    labelled = _labelled_features(proxy, [v.task for v in views]) if strategy is ALStrategy.CORESET else None

    def gate(ranking: Sequence[int]) -> List[int]:
        left = dict(allowance)
        accepted = []
        for i in ranking:
            owner = int(owners[i])
            if left.get(owner, 0) > 0:
                left[owner] -= 1
                accepted.append(int(i))
                if len(accepted) == round_size:
                    break
        return accepted

    if strategy in UNCERTAINTY or strategy is ALStrategy.RANDOM:
        accepted = gate(_select(strategy, features, n, seed, labelled))
    else:
        request = round_size
        while True:
            accepted = gate(_select(strategy, features, request, seed, labelled))
            if len(accepted) >= round_size or request == n:
                break
            request = min(n, request + round_size - len(accepted))

    picked: Dict[int, List[int]] = {v.task.task_id: [] for v in views}
    for i in accepted:
        picked[int(owners[i])].append(int(positions[i]))
    return picked

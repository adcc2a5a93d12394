"""
Dense MLP classifier with analytic backprop and first-order optimizers

Parameters live in one flat float64 vector, layer-major (W1, b1, W2, b2, ...),
with each W stored row-major as (fan_in, fan_out) so a layer computes
`x @ W + b`.
"""
import logging
from dataclasses import replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import ContractViolation
from .models import (
    Architecture,
    ForwardTrace,
    ModelState,
    OptimizerAlgo,
    OptimizerHyper,
    PseudoLabelMode,
)

logger = logging.getLogger(__name__)


def init_model(arch: Architecture, seed: int) -> ModelState:
    """Glorot-uniform weights, zero biases; deterministic in (arch, seed)"""
    rng = np.random.default_rng(seed)
    blocks = []
    for fan_in, fan_out in arch.layer_shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        blocks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        blocks.append(np.zeros(fan_out))
    return ModelState(arch=arch, params=np.concatenate(blocks), rng_seed=seed)


def unpack(arch: Architecture, flat: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(W, b) views into a flat parameter (or gradient) vector"""
    layers, offset = [], 0
    for fan_in, fan_out in arch.layer_shapes:
        w = flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = flat[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _check_inputs(model: ModelState, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.arch.input_dim:
        raise ContractViolation(
            f"expected inputs of shape (n, {model.arch.input_dim}), got {inputs.shape}")
    return inputs


def _check_mask(model: ModelState, class_mask: Optional[np.ndarray], n: int) -> Optional[np.ndarray]:
    """Normalise a shared (C,) or row-wise (n, C) mask to (n, C) or None"""
    if class_mask is None:
        return None
    mask = np.asarray(class_mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (n, mask.size))
    if mask.shape != (n, model.arch.num_classes):
        raise ContractViolation(
            f"class mask shape {mask.shape} does not match ({n}, {model.arch.num_classes})")
    if not mask.any(axis=1).all():
        raise ContractViolation("class mask must allow at least one class")
    return mask


def _masked(logits: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return logits
    return np.where(mask, logits, -np.inf)


def _propagate(model: ModelState, inputs: np.ndarray):
    """Forward pass keeping every post-activation for backprop"""
    layers = unpack(model.arch, model.params)
    activations = [inputs]
    h = inputs
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        activations.append(h)
    w, b = layers[-1]
    return activations, h @ w + b


def _deltas(model: ModelState, activations: List[np.ndarray], dlogits: np.ndarray) -> List[np.ndarray]:
    """Per-sample error signals at each layer's pre-activation, output first"""
    layers = unpack(model.arch, model.params)
    deltas = [dlogits]
    delta = dlogits
    for layer in range(len(layers) - 1, 0, -1):
        w, _ = layers[layer]
        delta = (delta @ w.T) * (activations[layer] > 0.0)
        deltas.append(delta)
    deltas.reverse()
    return deltas


def _assemble(activations: List[np.ndarray], deltas: List[np.ndarray]) -> np.ndarray:
    blocks = []
    for a, d in zip(activations, deltas):
        blocks.append((a.T @ d).ravel())
        blocks.append(d.sum(axis=0))
    return np.concatenate(blocks)


def forward(model: ModelState, inputs: np.ndarray,
            class_mask: Optional[np.ndarray] = None) -> ForwardTrace:
    inputs = _check_inputs(model, inputs)
    mask = _check_mask(model, class_mask, inputs.shape[0])
    activations, logits = _propagate(model, inputs)
    probs = softmax(_masked(logits, mask), axis=1)
    return ForwardTrace(logits=logits, penultimate=activations[-1], probs=probs)


def _check_labels(model: ModelState, labels: np.ndarray, mask: Optional[np.ndarray], n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ContractViolation(f"{labels.size} labels for {n} inputs")
    if n and (labels.min() < 0 or labels.max() >= model.arch.num_classes):
        raise ContractViolation("label outside the model's class range")
    if mask is not None and n and not mask[np.arange(n), labels].all():
        raise ContractViolation("label outside the class mask")
    return labels


def loss_and_grad(model: ModelState, inputs: np.ndarray, labels: np.ndarray,
                  class_mask: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Mean masked-softmax cross-entropy and its gradient"""
    inputs = _check_inputs(model, inputs)
    n = inputs.shape[0]
    if n == 0:
        raise ContractViolation("empty batch")
    mask = _check_mask(model, class_mask, n)
    labels = _check_labels(model, labels, mask, n)
    activations, logits = _propagate(model, inputs)
    log_probs = log_softmax(_masked(logits, mask), axis=1)
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    grad = _assemble(activations, _deltas(model, activations, dlogits))
    return loss, grad


def backprop_logits(model: ModelState, inputs: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Parameter gradient of sum(dlogits * logits(inputs))"""
    inputs = _check_inputs(model, inputs)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != (inputs.shape[0], model.arch.num_classes):
        raise ContractViolation(f"logit cotangent has shape {dlogits.shape}")
    activations, _ = _propagate(model, inputs)
    return _assemble(activations, _deltas(model, activations, dlogits))


def squared_grad_mean(model: ModelState, inputs: np.ndarray, labels: np.ndarray,
                      class_mask: Optional[np.ndarray] = None, chunk: int = 1024) -> np.ndarray:
    """
    Mean over samples of the squared per-sample CE gradient.

    For a dense layer the per-sample weight gradient is an outer product
    a_i d_j, so its square sums to (a**2).T @ (d**2) without materialising
    one gradient per sample.
    """
    inputs = _check_inputs(model, inputs)
    n = inputs.shape[0]
    if n == 0:
        raise ContractViolation("empty data")
    mask = _check_mask(model, class_mask, n)
    labels = _check_labels(model, labels, mask, n)
    total = np.zeros(model.arch.param_count)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        activations, logits = _propagate(model, inputs[start:stop])
        sub_mask = None if mask is None else mask[start:stop]
        dlogits = softmax(_masked(logits, sub_mask), axis=1)
        dlogits[np.arange(stop - start), labels[start:stop]] -= 1.0
        deltas = _deltas(model, activations, dlogits)
        total += _assemble([a ** 2 for a in activations], [d ** 2 for d in deltas])
    return total / n


def per_sample_output_grads(model: ModelState, inputs: np.ndarray,
                            class_mask: Optional[np.ndarray] = None,
                            labels: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Output-layer gradient embeddings, one row per input.

    Row layout matches the flat parameter order of the output layer:
    outer(penultimate, p - e_y) row-major, then p - e_y. With `labels`
    omitted the predicted class is used as y.
    """
    trace = forward(model, inputs, class_mask)
    n = trace.probs.shape[0]
    if labels is None:
        labels = trace.probs.argmax(axis=1)
    residual = trace.probs.copy()
    residual[np.arange(n), np.asarray(labels, dtype=np.int64)] -= 1.0
    weights = np.einsum("ni,nj->nij", trace.penultimate, residual).reshape(n, -1)
    return np.concatenate([weights, residual], axis=1)


def per_sample_output_grad(model: ModelState, input: np.ndarray,
                           pseudo_label_mode: PseudoLabelMode = PseudoLabelMode.PREDICTED,
                           label: Optional[int] = None,
                           class_mask: Optional[np.ndarray] = None) -> np.ndarray:
    mode = PseudoLabelMode(pseudo_label_mode)
    if mode is PseudoLabelMode.TRUE and label is None:
        raise ContractViolation("true-label mode needs a label")
    x = np.asarray(input, dtype=np.float64).reshape(1, -1)
    labels = None if mode is PseudoLabelMode.PREDICTED else np.array([label])
    return per_sample_output_grads(model, x, class_mask, labels)[0]


def optimizer_step(model: ModelState, grad: np.ndarray,
                   hyper: OptimizerHyper = OptimizerHyper()) -> ModelState:
    """One SGD or Adam update; returns a new state"""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.params.shape:
        raise ContractViolation(f"gradient length {grad.size} != {model.params.size}")
    if not np.all(np.isfinite(grad)):
        raise ContractViolation("non-finite gradient")

    step = model.step + 1
    algo = OptimizerAlgo(hyper.algo)
    if algo is OptimizerAlgo.SGD:
        params = model.params - hyper.lr * grad
        opt_state = model.opt_state
    else:
        m = model.opt_state.get("m", np.zeros_like(grad))
        v = model.opt_state.get("v", np.zeros_like(grad))
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * grad
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * grad ** 2
        m_hat = m / (1.0 - hyper.beta1 ** step)
        v_hat = v / (1.0 - hyper.beta2 ** step)
        params = model.params - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        opt_state = {"m": m, "v": v}

    if not np.all(np.isfinite(params)):
        raise ContractViolation(f"non-finite parameters after step {step}")
    return replace(model, params=params, opt_state=opt_state, step=step)


def predict(model: ModelState, inputs: np.ndarray,
            class_mask: Optional[np.ndarray] = None, chunk: int = 4096) -> np.ndarray:
    """Argmax class per row, evaluated in chunks"""
    inputs = np.asarray(inputs)
    out = np.empty(inputs.shape[0], dtype=np.int64)
    for start in range(0, inputs.shape[0], chunk):
        stop = min(start + chunk, inputs.shape[0])
        sub_mask = class_mask
        if class_mask is not None and np.ndim(class_mask) == 2:
            sub_mask = class_mask[start:stop]
        out[start:stop] = forward(model, inputs[start:stop], sub_mask).probs.argmax(axis=1)
    return out

"""A tiny fully convolutional mask head with hand-written backpropagation.

Architecture (per sample)::

    image (1, S, S)
      -> conv3x3 1->8  + ReLU
      -> conv3x3 8->8  + ReLU
      -> area-average pool S -> M
      -> conv1x1 8->K  (only the requested class channel is evaluated)
      -> sigmoid                                  => mask (M, M)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .grid import (InvalidInputError, as_grid, avg_pool, avg_pool_backward, conv2d_channels,
                   conv2d_channels_backward)

HIDDEN = 8
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

Params = Dict[str, np.ndarray]


@dataclass
class MaskHead:
    params: Params
    mask_size: int
    n_classes: int = 3

    @property
    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "MaskHead":
        return MaskHead({k: v.copy() for k, v in self.params.items()}, self.mask_size, self.n_classes)


@dataclass
class ActivationCache:
    image: np.ndarray
    class_id: int
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    pooled: np.ndarray
    pred: np.ndarray
    factor: int


def param_shapes(n_classes: int = 3) -> Dict[str, Tuple[int, ...]]:
    return {
        "w1": (HIDDEN, 1, 3, 3), "b1": (HIDDEN,),
        "w2": (HIDDEN, HIDDEN, 3, 3), "b2": (HIDDEN,),
        "w3": (n_classes, HIDDEN), "b3": (n_classes,),
    }


def zeros_head(mask_size: int, n_classes: int = 3) -> MaskHead:
    return MaskHead({k: np.zeros(s) for k, s in param_shapes(n_classes).items()}, mask_size, n_classes)


def init_weights(seed: int, mask_size: int = 28, n_classes: int = 3) -> MaskHead:
    """Xavier-uniform kernels, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    head = zeros_head(mask_size, n_classes)
    for name in ("w1", "w2", "w3"):
        shape = head.params[name].shape
        receptive = int(np.prod(shape[2:])) if len(shape) == 4 else 1
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        head.params[name] = rng.uniform(-limit, limit, size=shape)
    return head


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def forward(head: MaskHead, image, class_id: int):
    """Predict the mask of ``class_id`` for ``image``; returns ``(pred_mask, cache)``."""
    if not 0 <= class_id < head.n_classes:
        raise InvalidInputError(f"class_id {class_id} outside [0, {head.n_classes})")
    image = as_grid(image, "image")
    if image.shape[0] != image.shape[1] or image.shape[0] % head.mask_size:
        raise InvalidInputError(
            f"image {image.shape} must be square with side a multiple of {head.mask_size}")
    factor = image.shape[0] // head.mask_size
    p = head.params
    z1 = conv2d_channels(image[None], p["w1"], p["b1"])
    a1 = np.maximum(z1, 0.0)
    z2 = conv2d_channels(a1, p["w2"], p["b2"])
    pooled = avg_pool(np.maximum(z2, 0.0), factor)
    logits = np.tensordot(p["w3"][class_id], pooled, axes=1) + p["b3"][class_id]
    pred = _sigmoid(logits)
    return pred, ActivationCache(image, class_id, z1, a1, z2, pooled, pred, factor)


def backward(head: MaskHead, cache: ActivationCache, grad_wrt_pred) -> Params:
    """Gradients of a scalar loss for every parameter, given d(loss)/d(pred_mask)."""
    g = np.asarray(grad_wrt_pred, dtype=np.float64)
    if g.shape != cache.pred.shape:
        raise InvalidInputError(f"grad shape {g.shape} != prediction shape {cache.pred.shape}")
    p = head.params
    c = cache.class_id
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    g_logit = g * cache.pred * (1.0 - cache.pred)
    grads["w3"][c] = np.tensordot(cache.pooled, g_logit, axes=([1, 2], [0, 1]))
    grads["b3"][c] = g_logit.sum()
    g_pooled = p["w3"][c][:, None, None] * g_logit[None]
    g_z2 = avg_pool_backward(g_pooled, cache.factor) * (cache.z2 > 0)
    g_a1, grads["w2"], grads["b2"] = conv2d_channels_backward(cache.a1, p["w2"], g_z2)
    g_z1 = g_a1 * (cache.z1 > 0)
    _, grads["w1"], grads["b1"] = conv2d_channels_backward(
        cache.image[None], p["w1"], g_z1, need_input_grad=False)
    return grads


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: Optional[Params] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")


def sgd_step(params: Params, grads: Params, state: OptimizerState):
    """SGD with momentum and L2 weight decay; returns ``(new_params, new_state)``.

    ``v <- momentum * v + grad + weight_decay * param``;  ``param <- param - lr * v``.
    """
    if set(params) != set(grads):
        raise InvalidInputError("params and grads have different keys")
    velocity = state.velocity or {k: np.zeros_like(v) for k, v in params.items()}
    new_params, new_vel = {}, {}
    for k in params:
        if params[k].shape != grads[k].shape or velocity[k].shape != params[k].shape:
            raise InvalidInputError(f"shape mismatch for parameter {k}")
        v = state.momentum * velocity[k] + grads[k] + state.weight_decay * params[k]
        new_vel[k] = v
        new_params[k] = params[k] - state.learning_rate * v
    return new_params, OptimizerState(state.learning_rate, state.momentum, state.weight_decay, new_vel)


def save_checkpoint(path, head: MaskHead, seed: int, step: int) -> None:
    """Plain-text checkpoint: header lines, then per parameter a ``param <name> <dims...>`` line
    followed by one line of row-major values."""
    with open(path, "w") as fh:
        fh.write("# edgeagree mask head checkpoint v1\n")
        fh.write(f"seed {seed}\nstep {step}\nmask_size {head.mask_size}\nn_classes {head.n_classes}\n")
        for name in PARAM_NAMES:
            arr = head.params[name]
            fh.write(f"param {name} {' '.join(map(str, arr.shape))}\n")
            fh.write(" ".join(repr(float(v)) for v in arr.ravel()) + "\n")


def load_checkpoint(path):
    """Returns ``(head, seed, step)``."""
    meta, params = {}, {}
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if parts[0] == "param":
            shape = tuple(int(t) for t in parts[2:])
            params[parts[1]] = np.array(lines[i + 1].split(), dtype=np.float64).reshape(shape)
            i += 2
        else:
            meta[parts[0]] = int(parts[1])
            i += 1
    if set(params) != set(PARAM_NAMES):
        raise InvalidInputError(f"{path}: missing parameters")
    head = MaskHead(params, meta["mask_size"], meta["n_classes"])
    return head, meta["seed"], meta["step"]

"""
Reverse-mode autodiff over numpy arrays, limited to what the spine-age network needs.

Layout is channels-first: volumes are [N, C, D, H, W]. Every op returns a new
Tensor holding a closure that maps the output gradient to one gradient per parent.
"""
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_grad_mode = threading.local()


class ShapeException(Exception):
    pass


class Tensor:
    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return "Tensor(name={}, shape={}, dtype={})".format(self.name, self.shape, self.dtype)

    def zero_grad(self):
        self.grad = None

    def _topological_order(self):
        order = []
        visited = set()
        stack = [(self, False)]

        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        return order

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)

        pending = {id(self): grad}
        for node in reversed(self._topological_order()):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue

            node.grad = node_grad if node.grad is None else node.grad + node_grad
            if node._backward is None:
                continue

            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        if other.shape != self.shape:
            raise ShapeException("add needs equal shapes, got {} and {}".format(self.shape, other.shape))
        return _result(self.data + other.data, (self, other), lambda grad: (grad, grad))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.shape != self.shape:
                raise ShapeException("mul needs equal shapes, got {} and {}".format(self.shape, other.shape))
            return _result(self.data * other.data, (self, other),
                           lambda grad: (grad * other.data, grad * self.data))

        constant = np.asarray(other, dtype=self.dtype)
        return _result(self.data * constant, (self,), lambda grad: (grad * constant,))

    def sum(self):
        return _result(self.data.sum(), (self,), lambda grad: (np.full_like(self.data, grad),))


def grad_enabled():
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _result(data, parents, backward):
    requires_grad = grad_enabled() and any(parent.requires_grad for parent in parents)
    return Tensor(data, requires_grad=requires_grad, parents=parents if requires_grad else (),
                  backward=backward if requires_grad else None)


def parameter(data, name=None):
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _pad_spatial(data, pad):
    if pad == 0:
        return data
    return np.pad(data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with 'same' zero padding (kernel 3 -> pad 1, kernel 1 -> pad 0)."""
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ShapeException("conv3d needs [N,C,D,H,W] input and [Cout,Cin,k,k,k] weight")
    out_channels, in_channels, kernel = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[1] != in_channels:
        raise ShapeException("conv3d expects {} input channels, got {}".format(in_channels, x.shape[1]))
    if weight.shape[2:] != (kernel, kernel, kernel) or kernel % 2 != 1:
        raise ShapeException("conv3d needs a cubic odd kernel, got {}".format(weight.shape[2:]))
    if bias.shape != (out_channels,):
        raise ShapeException("conv3d bias must have shape ({},)".format(out_channels))

    pad = kernel // 2
    window = (kernel, kernel, kernel)
    patches = sliding_window_view(_pad_spatial(x.data, pad), window, axis=(2, 3, 4))
    out = np.tensordot(patches, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, 4, 1) + bias.data[None, :, None, None, None]

    def backward(grad):
        grad_bias = grad.sum(axis=(0, 2, 3, 4))
        grad_weight = np.tensordot(grad, patches, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        grad_patches = sliding_window_view(_pad_spatial(grad, pad), window, axis=(2, 3, 4))
        flipped = weight.data[:, :, ::-1, ::-1, ::-1]
        grad_input = np.moveaxis(np.tensordot(grad_patches, flipped, axes=([1, 5, 6, 7], [0, 2, 3, 4])), 4, 1)
        return grad_input, grad_weight, grad_bias

    return _result(np.ascontiguousarray(out), (x, weight, bias), backward)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels, dtype=np.float64):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training=True) -> Tensor:
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeException("batchnorm3d expects per-channel gamma/beta of size {}".format(channels))

    axes = (0, 2, 3, 4)
    count = x.data.size // channels

    def per_channel(values):
        return values[None, :, None, None, None]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_mean = ((1 - state.momentum) * state.running_mean + state.momentum * mean).astype(
            state.running_mean.dtype)
        state.running_var = ((1 - state.momentum) * state.running_var + state.momentum * unbiased).astype(
            state.running_var.dtype)
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + state.eps)
    normalized = (x.data - per_channel(mean)) * per_channel(inv_std)
    out = per_channel(gamma.data) * normalized + per_channel(beta.data)

    def backward(grad):
        grad_gamma = (grad * normalized).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_normalized = grad * per_channel(gamma.data)
        if training:
            grad_input = per_channel(inv_std / count) * (
                count * grad_normalized
                - per_channel(grad_normalized.sum(axis=axes))
                - normalized * per_channel((grad_normalized * normalized).sum(axis=axes))
            )
        else:
            grad_input = grad_normalized * per_channel(inv_std)
        return grad_input, grad_gamma, grad_beta

    return _result(out.astype(x.dtype), (x, gamma, beta), backward)


def pool_window(shape, window=(2, 2, 2)):
    """Per-axis window; an axis already of size 1 is pooled with window 1."""
    return tuple(1 if dim == 1 else size for dim, size in zip(shape, window))


def maxpool3d(x: Tensor, window=(2, 2, 2)) -> Tensor:
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    window = pool_window(spatial, window)
    pooled = tuple(dim // size for dim, size in zip(spatial, window))
    if min(pooled) < 1:
        raise ShapeException("maxpool3d window {} is larger than input {}".format(window, spatial))

    (wd, wh, ww), (pd, ph, pw) = window, pooled
    cropped = x.data[:, :, :pd * wd, :ph * wh, :pw * ww]
    blocks = cropped.reshape(n, c, pd, wd, ph, wh, pw, ww).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, pd, ph, pw, wd * wh * ww)
    # argmax returns the first maximum in window scan order
    winners = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winners[..., None], axis=-1)[..., 0]

    def backward(grad):
        routed = np.zeros(blocks.shape, dtype=grad.dtype)
        np.put_along_axis(routed, winners[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(n, c, pd, ph, pw, wd, wh, ww).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        routed = routed.reshape(n, c, pd * wd, ph * wh, pw * ww)
        grad_input = np.zeros(x.shape, dtype=grad.dtype)
        grad_input[:, :, :pd * wd, :ph * wh, :pw * ww] = routed
        return (grad_input,)

    return _result(out, (x,), backward)


def global_maxpool3d(x: Tensor) -> Tensor:
    """Max over all spatial positions: [N, C, D, H, W] -> [N, C]."""
    n, c = x.shape[:2]
    flat = x.data.reshape(n, c, -1)
    winners = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, winners[..., None], axis=-1)[..., 0]

    def backward(grad):
        routed = np.zeros(flat.shape, dtype=grad.dtype)
        np.put_along_axis(routed, winners[..., None], grad[..., None], axis=-1)
        return (routed.reshape(x.shape),)

    return _result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _result(np.where(active, x.data, 0).astype(x.dtype), (x,), lambda grad: (grad * active,))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeException("linear expects [N,{}] input, got {}".format(
            weight.shape[1] if weight.data.ndim == 2 else "?", x.shape))
    if bias.shape != (weight.shape[0],):
        raise ShapeException("linear bias must have shape ({},)".format(weight.shape[0]))

    out = x.data @ weight.data.T + bias.data[None, :]

    def backward(grad):
        return grad @ weight.data, grad.T @ x.data, grad.sum(axis=0)

    return _result(out, (x, weight, bias), backward)


def _check_loss_inputs(pred, target):
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeException("Loss needs equal shapes, got {} and {}".format(pred.shape, target.shape))
    if pred.data.size == 0:
        raise ShapeException("Loss of an empty batch is undefined")
    return target


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _check_loss_inputs(pred, target)
    diff = pred.data - target
    count = diff.size
    return _result(np.mean(diff ** 2), (pred,), lambda grad: (grad * 2.0 * diff / count,))


def smooth_l1_loss(pred: Tensor, target) -> Tensor:
    target = _check_loss_inputs(pred, target)
    diff = pred.data - target
    count = diff.size
    small = np.abs(diff) < 1.0
    loss = np.where(small, 0.5 * diff ** 2, np.abs(diff) - 0.5).mean()
    return _result(loss, (pred,), lambda grad: (grad * np.where(small, diff, np.sign(diff)) / count,))


LOSSES = {"mse": mse_loss, "smooth_l1": smooth_l1_loss}


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState):
    """One in-place Adam update with bias correction; names without a gradient are skipped."""
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step

    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != value.shape:
            raise ShapeException("Gradient for {} has shape {}, expected {}".format(name, grad.shape, value.shape))

        first = state.first_moment.setdefault(name, np.zeros_like(value))
        second = state.second_moment.setdefault(name, np.zeros_like(value))
        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * grad * grad

        update = state.lr * (first / correction1) / (np.sqrt(second / correction2) + state.eps)
        value -= update.astype(value.dtype)

    return params


@dataclass
class PlateauScheduler:
    factor: float = 0.3
    patience: int = 5
    min_lr: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0


def scheduler_step(scheduler: PlateauScheduler, state: AdamState, metric):
    """Returns the (possibly reduced) learning rate after one epoch's validation metric."""
    if metric < scheduler.best:
        scheduler.best = float(metric)
        scheduler.bad_epochs = 0
    else:
        scheduler.bad_epochs += 1

    if scheduler.bad_epochs >= scheduler.patience:
        reduced = max(state.lr * scheduler.factor, scheduler.min_lr)
        if reduced < state.lr:
            logger.info("Reducing learning rate from %g to %g", state.lr, reduced)
        state.lr = reduced
        scheduler.bad_epochs = 0

    return state.lr

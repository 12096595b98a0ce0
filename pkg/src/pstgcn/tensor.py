"""Operators with explicit backward rules.

Every differentiable op comes as a ``*_forward`` returning ``(out, cache)``
and a ``*_backward`` taking the upstream gradient and the cache. Parameter
gradients are accumulated into ``Parameter.grad``; gradients for inputs are
returned. Models chain these pairs in a fixed order, which is all the
reverse-mode machinery the network needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    trainable: bool = True

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ValueError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0


@dataclass(eq=False)
class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        return cls(
            gamma=Parameter(np.ones(channels, dtype=dtype)),
            beta=Parameter(np.zeros(channels, dtype=dtype)),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.size

    def set_identity(self, channels=slice(None)):
        """Make the eval-mode transform exactly ``y = x`` on the given channels."""
        self.gamma.value[channels] = 1
        self.beta.value[channels] = 0
        self.running_mean[channels] = 0
        self.running_var[channels] = 1 - self.eps


def _check_shape(name, got, expected):
    if tuple(got) != tuple(expected):
        raise ValueError(f"{name}: shape {tuple(got)} does not match expected {tuple(expected)}")


# ------------------------------------------------------------------ conv2d


def conv2d_forward(x: np.ndarray, kernel: Parameter, stride_t: int = 1, pad_t: int = 0):
    """Convolution over the (time, joint) axes of an N x C x T x V input.

    Time is zero-padded by ``pad_t`` on both ends and strided by
    ``stride_t``; the joint axis is never padded.
    """
    if x.ndim != 4 or kernel.value.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    N, C, T, V = x.shape
    O, Ck, Kt, Kv = kernel.shape
    if Ck != C:
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    if Kt > T + 2 * pad_t or Kv > V:
        raise ValueError(f"conv2d: kernel shape {kernel.shape} larger than padded input {x.shape}")
    if stride_t < 1 or pad_t < 0:
        raise ValueError("conv2d: stride must be positive and padding nonnegative")
    out = kernels.conv_forward(x, kernel.value, stride_t, pad_t)
    return out, (x, kernel, stride_t, pad_t)


def conv2d_backward(dout: np.ndarray, cache):
    x, kernel, stride_t, pad_t = cache
    dx, dw = kernels.conv_backward(dout, x, kernel.value, stride_t, pad_t)
    if kernel.trainable:
        kernel.grad += dw
    return dx


# ------------------------------------------------------------------ batch norm


def batchnorm2d_forward(x: np.ndarray, state: BatchNormState, training: bool):
    """Per-channel normalization of an N x C x T x V tensor over (N, T, V)."""
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ValueError(f"batchnorm: input shape {x.shape} does not have {state.channels} channels")
    gamma = state.gamma.value[None, :, None, None]
    beta = state.beta.value[None, :, None, None]
    if not training:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        return gamma * xhat + beta, ("eval", xhat, inv_std, state)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise ValueError("batchnorm in training mode needs at least 2 values per channel")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std[None, :, None, None]
    m = state.momentum
    state.running_mean[...] = (1 - m) * state.running_mean + m * mean
    # running variance tracks the unbiased estimate
    state.running_var[...] = (1 - m) * state.running_var + m * var * (count / (count - 1))
    return gamma * xhat + beta, ("train", xhat, inv_std, state)


def batchnorm2d_backward(dout: np.ndarray, cache):
    mode, xhat, inv_std, state = cache
    axes = (0, 2, 3)
    if state.gamma.trainable:
        state.gamma.grad += (dout * xhat).sum(axis=axes)
    if state.beta.trainable:
        state.beta.grad += dout.sum(axis=axes)
    g = state.gamma.value[None, :, None, None]
    dxhat = dout * g
    if mode == "eval":
        return dxhat * inv_std[None, :, None, None]
    mean_d = dxhat.mean(axis=axes)[None, :, None, None]
    mean_dx = (dxhat * xhat).mean(axis=axes)[None, :, None, None]
    return (dxhat - mean_d - xhat * mean_dx) * inv_std[None, :, None, None]


# ------------------------------------------------------------------ pointwise and head


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask):
    return dout * mask


def global_avg_pool_forward(x: np.ndarray):
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects N x C x T x V, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout: np.ndarray, shape):
    N, C, T, V = shape
    return np.broadcast_to((dout / (T * V))[:, :, None, None], shape).copy()


def affine_forward(x: np.ndarray, weight: Parameter, bias: Parameter):
    """``x @ weight.T + bias`` for an N x C input."""
    if x.ndim != 2 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError(
            f"affine: input {x.shape}, weight {weight.shape}, bias {bias.shape} do not agree"
        )
    return x @ weight.value.T + bias.value, (x, weight, bias)


def affine_backward(dout: np.ndarray, cache):
    x, weight, bias = cache
    if weight.trainable:
        weight.grad += dout.T @ x
    if bias.trainable:
        bias.grad += dout.sum(axis=0)
    return dout @ weight.value


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    N, K = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"expected {N} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        bad = labels[(labels < 0) | (labels >= K)][0]
        raise ValueError(f"label {int(bad)} outside [0, {K})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(N)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1
    return loss, grad / N

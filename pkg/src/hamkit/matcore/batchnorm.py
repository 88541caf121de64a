"""Batch normalization over the rows (channels) of a channels x positions matrix."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import ShapeError


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5, dtype=np.float64):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
            self.running_var.copy(), self.momentum, self.epsilon, self.mode,
        )


@dataclass
class BatchNormCache:
    mode: str
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray = field(repr=False)


def batchnorm_forward(x: np.ndarray, state: BatchNormState):
    """Normalize each row of ``x`` (channels x positions).

    In train mode the batch statistics are used (biased variance) and the
    running statistics are updated in place with ``state.momentum``
    (unbiased variance, as is customary).
    """
    if x.ndim != 2 or x.shape[0] != state.channels:
        raise ShapeError(f"batchnorm expects ({state.channels}, m), got {x.shape}")
    if state.mode == "train":
        m = x.shape[1]
        mean = x.mean(axis=1)
        var = x.var(axis=1)
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mean
        unbiased = var * m / (m - 1) if m > 1 else var
        state.running_var = (1 - mom) * state.running_var + mom * unbiased
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean[:, None]) * inv_std[:, None]
    out = state.gamma[:, None] * xhat + state.beta[:, None]
    return out, BatchNormCache(state.mode, xhat, inv_std, state.gamma.copy())


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache):
    """Gradients of the train-mode normalization: (grad_in, grad_gamma, grad_beta)."""
    if cache.mode != "train":
        raise RuntimeError("batchnorm_backward needs a train-mode cache")
    m = grad_out.shape[1]
    grad_beta = grad_out.sum(axis=1)
    grad_gamma = (grad_out * cache.xhat).sum(axis=1)
    g_xhat = grad_out * cache.gamma[:, None]
    grad_in = (cache.inv_std[:, None] / m) * (
        m * g_xhat - g_xhat.sum(axis=1, keepdims=True) - cache.xhat * (g_xhat * cache.xhat).sum(axis=1, keepdims=True)
    )
    return grad_in, grad_gamma, grad_beta


def batchnorm_backward_eval(grad_out: np.ndarray, cache: BatchNormCache):
    """Gradients when running statistics were used (an affine map)."""
    grad_beta = grad_out.sum(axis=1)
    grad_gamma = (grad_out * cache.xhat).sum(axis=1)
    grad_in = grad_out * (cache.gamma * cache.inv_std)[:, None]
    return grad_in, grad_gamma, grad_beta

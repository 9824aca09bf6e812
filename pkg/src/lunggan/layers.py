"""Activations, batch normalization, weight initialization and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .tensor import ShapeError, Tensor, get_default_dtype, make_node

__all__ = [
    "BatchNormState",
    "AdamState",
    "Adam",
    "batchnorm",
    "leaky_relu",
    "relu",
    "sigmoid",
    "init_weights",
]


def _require_finite(x: Tensor, op: str) -> None:
    if not np.isfinite(x.data).all():
        raise ValueError(f"{op}: input contains NaN or Inf")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    _require_finite(x, "leaky_relu")
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_node(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    _require_finite(x, "relu")
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) in the working precision."""
    _require_finite(x, "sigmoid")
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    one = d.dtype.type(1)
    s = np.clip(s, np.finfo(d.dtype).tiny, np.nextafter(one, d.dtype.type(0)))
    return make_node(s, (x,), lambda g: (g * s * (1 - s),))


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics.

    ``gamma`` and ``beta`` are the trainable tensors; running statistics are
    plain arrays updated as ``running = momentum * running + (1 - momentum) * batch``.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn") -> "BatchNormState":
        dt = get_default_dtype()
        return cls(
            gamma=Tensor(np.ones(channels, dt), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dt), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dt),
            running_var=np.ones(channels, dt),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train", track_stats: bool = True) -> Tensor:
    """Normalize each channel of an NCHW tensor, then scale by gamma and shift by beta.

    In ``"train"`` mode the batch statistics are used (and folded into the
    running statistics when ``track_stats``); in ``"infer"`` mode only the
    running statistics are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects NCHW input, got {x.shape}")
    if x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm: input has {x.shape[1]} channels, state has {state.channels}")
    gamma, beta = state.gamma, state.beta
    gd = gamma.data[None, :, None, None]
    bd = beta.data[None, :, None, None]
    axes = (0, 2, 3)

    if mode == "infer":
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(x.dtype)[None, :, None, None]
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv
        out = gd * xhat + bd

        def backward(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)

    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ShapeError("batchnorm in train mode needs at least two values per channel (N*H*W >= 2)")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(state.eps))
    xhat = xc * inv
    out = gd * xhat + bd

    if track_stats:
        mom = state.momentum
        state.running_mean = (mom * state.running_mean + (1 - mom) * mu.reshape(-1)).astype(state.running_mean.dtype)
        state.running_var = (mom * state.running_var + (1 - mom) * var.reshape(-1)).astype(state.running_var.dtype)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        dx = gd * inv * (g - gm - xhat * gxm)
        return dx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), backward)


def init_weights(shape, seed, mean: float = 0.0, std: float = 0.02, name: Optional[str] = None) -> Tensor:
    """Draw a trainable tensor from N(mean, std**2); identical for identical seeds."""
    rng = np.random.default_rng(seed)
    data = rng.normal(mean, std, size=tuple(shape)).astype(get_default_dtype())
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam with bias correction over a named set of parameter tensors.

    Gradients are consumed by :meth:`step`; calling it again before the next
    backward raises.
    """

    def __init__(self, params: Mapping[str, Tensor], lr=0.0002, beta1=0.5, beta2=0.999, eps=1e-8,
                 state: Optional[AdamState] = None):
        self.params = dict(params)
        self.state = state or AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for k, p in self.params.items():
            self.state.m.setdefault(k, np.zeros_like(p.data))
            self.state.v.setdefault(k, np.zeros_like(p.data))

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        if grads is None:
            missing = [k for k, p in self.params.items() if p.grad is None]
            if missing:
                raise RuntimeError(f"Adam.step called without gradients for {len(missing)} parameters "
                                   f"(first: {missing[0]}); run backward first")
            grads = {k: p.grad for k, p in self.params.items()}
        for k, p in self.params.items():
            if grads[k].shape != p.shape:
                raise ShapeError(f"gradient for {k} has shape {grads[k].shape}, parameter has {p.shape}")
        s = self.state
        s.t += 1
        bc1 = 1.0 - s.beta1 ** s.t
        bc2 = 1.0 - s.beta2 ** s.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = s.m[k], s.v[k]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.data -= (s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)).astype(p.dtype, copy=False)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


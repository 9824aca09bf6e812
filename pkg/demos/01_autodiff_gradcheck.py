"""
Reverse-mode autodiff and a finite-difference check
====================================================

Build a tiny conv -> batchnorm -> leaky_relu -> sigmoid chain, take its
gradient with one backward pass, and compare against central differences.
"""

import numpy as np

from lunggan import tensor as T
from lunggan.layers import BatchNormState, batchnorm, leaky_relu, sigmoid
from lunggan.tensor import Graph, Tensor, precision

rng = np.random.default_rng(0)

# work in float64 so finite differences are meaningful
with precision(np.float64):
    x = Tensor(rng.normal(size=(2, 1, 6, 6)))
    w = Tensor(rng.normal(scale=0.5, size=(3, 1, 3, 3)), requires_grad=True)
    bn = BatchNormState.create(3)


    def forward(weight):
        h = T.conv2d(x, weight, stride=1, padding=1)
        h = batchnorm(h, bn, track_stats=False)
        return T.mean(sigmoid(leaky_relu(h, 0.2)))


    # operations inside the Graph context are recorded on a tape
    with Graph() as g:
        loss = forward(w)
    g.backward(loss)
    print("loss:", loss.item())
    print("analytic grad shape:", w.grad.shape)

    # central differences, one weight at a time
    eps = 1e-6
    fd = np.zeros_like(w.data)
    for idx in np.ndindex(*w.data.shape):
        plus, minus = w.data.copy(), w.data.copy()
        plus[idx] += eps
        minus[idx] -= eps
        fd[idx] = (forward(Tensor(plus)).item() - forward(Tensor(minus)).item()) / (2 * eps)

rel = np.abs(w.grad - fd) / np.maximum(np.abs(w.grad) + np.abs(fd), 1e-8)
print("max relative error:", rel.max())

# a graph is consumed by its backward pass
try:
    g.backward(loss)
except Exception as exc:
    print("second backward ->", type(exc).__name__, exc)

"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Operations are recorded onto the innermost active :class:`Graph`. Outside any
graph nothing is recorded, which is how inference and detached forwards work::

    with Graph() as g:
        loss = mean(conv2d(x, w, b, stride=2, padding=1))
    g.backward(loss)          # w.grad, b.grad populated; g is now consumed
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "ShapeError",
    "GraphError",
    "Tensor",
    "Graph",
    "make_node",
    "precision",
    "get_default_dtype",
    "conv2d",
    "conv_transpose2d",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "absolute",
    "log",
    "clip",
    "sum",
    "mean",
    "concat",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of a recorded graph (e.g. a second backward)."""


_DTYPE = np.float32
_LOCAL = threading.local()  # each thread records onto its own graph stack


def _graph_stack() -> list:
    if not hasattr(_LOCAL, "stack"):
        _LOCAL.stack = []
    return _LOCAL.stack


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    Only intended for oracle tests (float64); models train in float32.
    """
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


class Tensor:
    """A dense array plus an optional gradient buffer.

    Convolution and normalization ops require 4-D (N, C, H, W) data; reductions
    produce 0-d tensors.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "graph", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.graph: Optional[Graph] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self, params: Optional[Iterable["Tensor"]] = None) -> None:
        if self.graph is None:
            raise GraphError("tensor was not produced inside a recording Graph")
        self.graph.backward(self, params)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: Optional[Callable]


class Graph:
    """An ordered tape of recorded operations.

    Nodes are appended as operations execute, so every operand precedes its
    consumer. :meth:`backward` walks the tape in reverse once and then frees it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Graph":
        if self.consumed:
            raise GraphError("cannot record onto a consumed graph")
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t.graph is not self:
                self._leaves.setdefault(id(t), t)
        output.node_id = len(self.nodes)
        output.graph = self
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def backward(self, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
        """Populate ``.grad`` of every leaf with d(loss)/d(leaf).

        Leaves recorded in this graph but not reachable from ``loss`` receive a
        zero gradient, as does every tensor in ``params`` that never entered the
        graph.
        """
        if self.consumed:
            raise GraphError("backward already ran on this graph")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.graph is not self:
            raise GraphError("loss was not recorded on this graph")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        leaves = dict(self._leaves)
        for p in params or ():
            leaves.setdefault(id(p), p)
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype, copy=False)

        self.consumed = True
        for node in self.nodes:
            node.backward = None
            node.output.graph = None
        self.nodes.clear()
        self._leaves.clear()


def _active_graph() -> Optional[Graph]:
    stack = _graph_stack()
    return stack[-1] if stack else None


def make_node(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record it if any input needs a gradient.

    ``backward`` maps the upstream gradient to a tuple with one entry (array or
    None) per input.
    """
    out = Tensor(data, dtype=data.dtype)
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(out, inputs, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# convolution kernels on raw arrays


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, (int, np.integer)) else tuple(v)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided (N, C, kh, kw, Ho, Wo) view of a padded input."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, (n, c, kh, kw, ho, wo), (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _corr(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    _, _, h, wd = x.shape
    _, _, kh, kw = w.shape
    ho, wo = _conv_out_size(h, kh, stride, padding), _conv_out_size(wd, kw, stride, padding)
    cols = _windows(_pad(x, padding), kh, kw, stride, ho, wo)
    out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # (O, N, Ho, Wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _corr_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padding: int, in_hw: tuple) -> np.ndarray:
    """Adjoint of :func:`_corr` with respect to its input."""
    n, _, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    hp = max(h + 2 * padding, (ho - 1) * stride + kh)
    wp = max(wd + 2 * padding, (wo - 1) * stride + kw)
    dcols = np.tensordot(w, g, axes=([0], [1]))  # (C, kh, kw, N, Ho, Wo)
    dxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += dcols[:, i, j]
    dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))


def _corr_weight_grad(g: np.ndarray, x: np.ndarray, stride: int, padding: int, k_hw: tuple) -> np.ndarray:
    kh, kw = k_hw
    ho, wo = g.shape[2:]
    cols = _windows(_pad(x, padding), kh, kw, stride, ho, wo)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # (O, C, kh, kw)


def _check_conv_args(stride: int, padding: int) -> None:
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    if int(padding) != padding or padding < 0:
        raise ValueError(f"padding must be a non-negative integer, got {padding}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, kH, kW)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_conv_args(stride, padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin} (weight {weight.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    ho, wo = _conv_out_size(h, kh, stride, padding), _conv_out_size(wd, kw, stride, padding)
    if kh > h + 2 * padding or kw > wd + 2 * padding or ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}")

    out = _corr(x.data, weight.data, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = _corr_input_grad(g, weight.data, stride, padding, (h, wd)) if x.requires_grad else None
        gw = _corr_weight_grad(g, x.data, stride, padding, (kh, kw)) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, inputs, backward)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution; ``weight`` is (Cin, Cout, kH, kW).

    Output size is ``(H - 1) * stride - 2 * padding + kH + output_padding``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_conv_args(stride, padding)
    if not 0 <= output_padding < max(stride, 2) or int(output_padding) != output_padding:
        raise ValueError(f"output_padding must be 0 or 1 and smaller than stride, got {output_padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels but weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} does not match {cout} output channels")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (wd - 1) * stride - 2 * padding + kw + output_padding
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: computed output size {ho}x{wo} is not positive")

    out = _corr_input_grad(x.data, weight.data, stride, padding, (ho, wo))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = _corr(g, weight.data, stride, padding) if x.requires_grad else None
        gw = _corr_weight_grad(x.data, g, stride, padding, (kh, kw)) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, inputs, backward)


# ---------------------------------------------------------------------------
# elementwise, reductions, shape


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        return make_node(a.data + b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    a = _as_tensor(a)
    _check_same(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    if not isinstance(a, Tensor):
        return scale(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return make_node(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    """|a|; the subgradient at exactly 0 is 0."""
    a = _as_tensor(a)
    sgn = np.sign(a.data)
    return make_node(np.abs(a.data), (a,), lambda g: (g * sgn,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape, dt = a.shape, a.dtype
    return make_node(np.asarray(a.data.sum(dtype=dt)), (a,), lambda g: (np.full(shape, g, dtype=dt),))


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    shape, dt, n = a.shape, a.dtype, a.size
    return make_node(np.asarray(a.data.mean(dtype=dt)), (a,), lambda g: (np.full(shape, g / n, dtype=dt),))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat expects 4-D tensors, got {a.shape} and {b.shape}")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat: N,H,W of {a.shape} and {b.shape} differ")
    ca = a.shape[1]
    return make_node(np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :ca], g[:, ca:]))

"""Dense tensors with reverse-mode automatic differentiation.

Only the primitives needed to train a small VGG-style network are provided.
Every primitive is a :class:`Function` subclass with a numpy ``forward`` and
``backward``; calling :meth:`Tensor.backward` on a scalar walks the recorded
graph once in reverse topological order.
"""
from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigurationError,
    DimensionError,
    GraphStateError,
    NonFiniteError,
)

logger = logging.getLogger(__name__)


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A real-valued array with an optional gradient buffer.

    Non-finite values are rejected at construction so that a diverging
    computation fails where it diverges rather than several layers later.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, _node=None):
        arr = _as_float_array(data)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} contains NaN or Inf".replace("  ", " "))
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Function] = _node
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic needed by the losses and the tests
    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def mean(self) -> "Tensor":
        return Mul.apply(Sum.apply(self), constant=1.0 / self.data.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return Mul.apply(self, other)
        return Mul.apply(self, constant=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        return Mul.apply(self, constant=1.0 / float(other))

    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf that requires it."""
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        graph = Graph.from_output(self)
        graph.run_backward(np.ones_like(self.data))


class Graph:
    """Topologically ordered record of the primitive calls behind a tensor."""

    def __init__(self, output: Tensor, nodes: list, leaves: list):
        self.output = output
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        if output._node is None:
            if output.requires_grad:
                return cls(output, [], [output])
            raise GraphStateError("no graph recorded for this tensor")
        if output._node.consumed:
            raise GraphStateError("backward already ran on this graph; re-run the forward pass")
        order: list = []
        leaves: list = []
        seen: set = set()
        seen_leaves: set = set()
        # iterative post-order DFS
        stack = [(output._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in node.inputs:
                if t._node is not None:
                    if t._node.consumed:
                        raise GraphStateError("graph contains a consumed node")
                    if id(t._node) not in seen:
                        stack.append((t._node, False))
                elif t.requires_grad and id(t) not in seen_leaves:
                    seen_leaves.add(id(t))
                    leaves.append(t)
        order.reverse()
        return cls(output, order, leaves)

    def run_backward(self, seed_grad: np.ndarray) -> None:
        if not self.nodes:
            leaf = self.output
            leaf.grad = seed_grad.copy() if leaf.grad is None else leaf.grad + seed_grad
            return
        pending = {id(self.nodes[0]): seed_grad}
        for node in self.nodes:
            g = pending.pop(id(node), None)
            if g is None:
                node.release()
                continue
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t._node)
                    pending[key] = gi if key not in pending else pending[key] + gi
            node.release()


class Function:
    """One primitive operation recorded in a graph."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.needs = tuple(t.requires_grad for t in inputs)
        self.consumed = False

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if any(fn.needs):
            return Tensor(out, requires_grad=True, _node=fn)
        return Tensor(out)

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    def release(self) -> None:
        self.consumed = True
        for attr in list(vars(self)):
            if attr not in ("inputs", "needs", "consumed"):
                setattr(self, attr, None)


class Sum(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.in_shape).astype(grad.dtype, copy=True),)


class Mul(Function):
    """Elementwise product of two same-shape tensors, or scaling by a constant."""

    def forward(self, x, y=None, constant=None):
        if y is None:
            self.constant = constant
            return x * x.dtype.type(constant)
        if x.shape != y.shape:
            raise DimensionError(f"mul operands differ in shape: {x.shape} vs {y.shape}")
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        if len(self.inputs) == 1:
            return (grad * grad.dtype.type(self.constant),)
        gx = grad * self.y if self.needs[0] else None
        gy = grad * self.x if self.needs[1] else None
        return gx, gy


class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad):
        return (grad * self.mask,)


class Dense(Function):
    def forward(self, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
            raise DimensionError(f"dense expects [B,D]x[D,K]+[K], got {x.shape}, {w.shape}, {b.shape}")
        if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
            raise DimensionError(f"dense inner dimensions disagree: {x.shape}, {w.shape}, {b.shape}")
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, grad):
        gx = grad @ self.w.T if self.needs[0] else None
        gw = self.x.T @ grad if self.needs[1] else None
        gb = grad.sum(axis=0) if self.needs[2] else None
        return gx, gw, gb


def _out_extent(size: int, k: int, stride: int, padding: int, what: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"{what}: extent {size} with window {k}, stride {stride}, padding {padding} "
            "does not give an integer output size"
        )
    return span // stride + 1


class Conv2d(Function):
    """Cross-correlation (no kernel flip) via an im2col matrix product."""

    def forward(self, x, w, b, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
            raise DimensionError(f"conv2d expects [B,C,H,W], [F,C,kh,kw], [F]; got {x.shape}, {w.shape}, {b.shape}")
        B, C, H, W = x.shape
        F, C2, kh, kw = w.shape
        if C != C2 or b.shape[0] != F:
            raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}, bias {b.shape}")
        if stride < 1 or padding < 0:
            raise ConfigurationError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
        Ho = _out_extent(H, kh, stride, padding, "conv2d height")
        Wo = _out_extent(W, kw, stride, padding, "conv2d width")
        cols = _im2col(x, kh, kw, stride, padding, Ho, Wo)
        # columns are ordered (kh, kw, C) to keep the channel axis contiguous
        wmat = w.transpose(0, 2, 3, 1).reshape(F, -1)
        out = cols @ wmat.T
        out += b
        self.geom = (x.shape, kh, kw, stride, padding, Ho, Wo)
        self.w, self.wmat = w, wmat
        self.cols = cols if self.needs[1] else None
        return np.ascontiguousarray(out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2))

    def backward(self, grad):
        (B, C, H, W), kh, kw, s, p, Ho, Wo = self.geom
        F = self.w.shape[0]
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = None
        if self.needs[1]:
            gw = (g2.T @ self.cols).reshape(F, kh, kw, C).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0) if self.needs[2] else None
        gx = None
        if self.needs[0]:
            if s == 1 and p <= kh - 1 and p <= kw - 1 and kh == kw:
                # input gradient of a stride-1 correlation is a full correlation
                # of the output gradient with the flipped, channel-swapped kernel
                flipped = self.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                q = kh - 1 - p
                dcols = _im2col(grad, kh, kw, 1, q, H, W)
                fmat = flipped.transpose(0, 2, 3, 1).reshape(C, -1)
                gx = np.ascontiguousarray((dcols @ fmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2))
            else:
                dcols = (g2 @ self.wmat).reshape(B, Ho, Wo, kh, kw, C)
                dcols = dcols.transpose(0, 5, 3, 4, 1, 2)  # B,C,kh,kw,Ho,Wo
                dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=grad.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, :, i, j]
                gx = dxp[:, :, p:p + H, p:p + W] if p else dxp
        return gx, gw, gb


def _im2col(x, kh, kw, stride, padding, Ho, Wo):
    """[B,C,H,W] -> [B*Ho*Wo, kh*kw*C] patch matrix."""
    B, C = x.shape[:2]
    xh = x.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xh = np.ascontiguousarray(xh)
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)


class MaxPool2d(Function):
    """Max over square windows; ties resolve to the first element in row-major order."""

    def forward(self, x, window=2, stride=2):
        if x.ndim != 4:
            raise DimensionError(f"maxpool2d expects [B,C,H,W], got {x.shape}")
        if window < 1 or stride < 1:
            raise ConfigurationError(f"maxpool2d needs window, stride >= 1, got {window}, {stride}")
        B, C, H, W = x.shape
        Ho = _out_extent(H, window, stride, 0, "maxpool2d height")
        Wo = _out_extent(W, window, stride, 0, "maxpool2d width")
        win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        win = win.reshape(B, C, Ho, Wo, window * window)
        arg = win.argmax(axis=-1)
        self.geom = (x.shape, window, stride, Ho, Wo)
        self.arg = arg
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        (B, C, H, W), k, s, Ho, Wo = self.geom
        rows = np.arange(Ho)[:, None] * s + self.arg // k
        cols = np.arange(Wo)[None, :] * s + self.arg % k
        plane = np.arange(B * C).reshape(B, C, 1, 1) * (H * W)
        flat = (plane + rows * W + cols).ravel()
        gx = np.bincount(flat, weights=grad.ravel(), minlength=B * C * H * W)
        return (gx.astype(grad.dtype, copy=False).reshape(B, C, H, W),)


class ChannelScale(Function):
    """out[b,f,h,w] = x[b,f,h,w] * s[f]."""

    def forward(self, x, s):
        if x.ndim != 4 or s.ndim != 1 or x.shape[1] != s.shape[0]:
            raise DimensionError(f"channel scale needs [B,F,H,W] and [F], got {x.shape}, {s.shape}")
        self.x, self.s = x, s
        return x * s[None, :, None, None]

    def backward(self, grad):
        gx = grad * self.s[None, :, None, None] if self.needs[0] else None
        gs = np.einsum("bfhw,bfhw->f", grad, self.x) if self.needs[1] else None
        return gx, gs


class SoftmaxXent(Function):
    """Per-row cross-entropy of softmax(logits) against integer labels."""

    def forward(self, logits, labels=None):
        if logits.ndim != 2:
            raise DimensionError(f"softmax_xent expects [B,K] logits, got {logits.shape}")
        labels = np.asarray(labels)
        B, K = logits.shape
        if labels.shape != (B,):
            raise DimensionError(f"expected {B} labels, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= K):
            raise IndexError(f"label out of range [0, {K})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(B)
        self.probs = np.exp(shifted - logz[:, None])
        self.rows, self.labels = rows, labels
        return logz - shifted[rows, labels]

    def backward(self, grad):
        g = self.probs.copy()
        g[self.rows, self.labels] -= 1
        return (g * grad[:, None],)


class WeightedMean(Function):
    """sum_i weights[i] * x[i] / denominator, weights held constant."""

    def forward(self, x, weights=None, denominator=None):
        weights = np.asarray(weights, dtype=x.dtype)
        if weights.shape != x.shape:
            raise DimensionError(f"weights {weights.shape} do not match values {x.shape}")
        self.scale = weights / x.dtype.type(denominator)
        return np.asarray((self.scale * x).sum(), dtype=x.dtype)

    def backward(self, grad):
        return (self.scale * grad,)


# functional surface

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    return MaxPool2d.apply(x, window=window, stride=stride)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Dense.apply(x, weight, bias)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    return ChannelScale.apply(x, scale)


def softmax_xent(logits: Tensor, labels) -> Tensor:
    return SoftmaxXent.apply(logits, labels=labels)


def weighted_mean(values: Tensor, weights, denominator: Optional[float] = None) -> Tensor:
    if denominator is None:
        denominator = values.data.size
    return WeightedMean.apply(values, weights=weights, denominator=denominator)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)

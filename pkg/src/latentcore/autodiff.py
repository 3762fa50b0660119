"""Small reverse-mode differentiation engine over a fixed set of numpy ops.

Each op returns a :class:`Node`. When any input requires a gradient the
node remembers its parents and a closure that pushes the output gradient
back to them; :func:`backward` walks the graph in reverse topological order.
Only first derivatives are supported.
"""
from __future__ import annotations

from typing import Callable, Iterable, List, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import DimensionMismatchError, FrozenParameterError

__all__ = [
    "Node",
    "constant",
    "parameter",
    "build_tape",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "getitem",
    "sum_all",
    "mode_product",
    "conv2d",
    "batch_norm",
    "relu",
    "adaptive_avg_pool",
    "linear",
    "softmax_cross_entropy",
    "frobenius_sq",
    "sgd_step",
    "SGD",
]


class Node:
    """A value in the computation graph.

    Leaves with ``requires_grad=True`` are trainable parameters; their
    ``grad`` accumulates across calls to :func:`backward` until cleared.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "frozen")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Node"] = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.frozen = False

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    @property
    def is_leaf(self):
        return not self.parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def constant(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def parameter(x) -> Node:
    return Node(np.array(x, dtype=np.float64), requires_grad=True)


def _make(data, parents: Sequence[Node], op: str, backward_fn) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(data, True, op, parents, backward_fn)
    return Node(data, False, op)


def build_tape(root: Node) -> List[Node]:
    """Nodes reachable from ``root`` that need gradients, in topological order."""
    order: List[Node] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    if loss.data.size != 1:
        raise DimensionMismatchError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        if not node.is_leaf:
            node.grad = None


def _accumulate(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if g.shape != node.data.shape:
        g = _unbroadcast(g, node.data.shape)
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise and linear-algebra ops --------------------------------------

def add(a, b) -> Node:
    a, b = constant(a), constant(b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), "add", back)


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), "sub", back)


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", back)


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def back(g):
        _accumulate(a, c * g)

    return _make(c * a.data, (a,), "scale", back)


def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionMismatchError(f"matmul shapes {a.shape} and {b.shape}")

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", back)


def transpose(a: Node) -> Node:
    if a.ndim != 2:
        raise DimensionMismatchError("transpose expects a matrix")

    def back(g):
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), "transpose", back)


def getitem(a: Node, idx) -> Node:
    def back(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        _accumulate(a, full)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), "getitem", back)


def sum_all(a: Node) -> Node:
    def back(g):
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(np.sum(a.data), (a,), "sum", back)


def frobenius_sq(a: Node) -> Node:
    def back(g):
        _accumulate(a, 2.0 * g * a.data)

    return _make(np.sum(a.data * a.data), (a,), "frobenius_sq", back)


class kink_trace:
    """Context manager recording the activation pattern of every ``relu``
    evaluated inside it (in call order)."""

    _active: List[List[np.ndarray]] = []

    def __enter__(self) -> List[np.ndarray]:
        self.masks: List[np.ndarray] = []
        kink_trace._active.append(self.masks)
        return self.masks

    def __exit__(self, *exc) -> None:
        kink_trace._active.remove(self.masks)


def relu(a: Node) -> Node:
    mask = a.data > 0
    for masks in kink_trace._active:
        masks.append(mask)

    def back(g):
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), "relu", back)


def mode_product(x, m, n: int) -> Node:
    x, m = constant(x), constant(m)
    out = T.mode_product(x.data, m.data, n)

    def back(g):
        if x.requires_grad:
            _accumulate(x, T.mode_product(g, m.data.T, n))
        if m.requires_grad:
            _accumulate(m, T.unfold(g, n).matrix @ T.unfold(x.data, n).matrix.T)

    return _make(out, (x, m), "mode_product", back)


# -- network ops ------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw)."""
    x, w = constant(x), constant(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionMismatchError(f"conv2d input {x.shape} incompatible with kernel {w.shape}")
    kh, kw = w.shape[2:]
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise DimensionMismatchError("kernel larger than padded input")
    win = _windows(xp, kh, kw, stride)
    n, ho, wo = x.shape[0], win.shape[2], win.shape[3]
    o, c = w.shape[0], w.shape[1]
    # im2col: one row per output pixel, columns ordered (C, kh, kw) like the kernel
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    w_mat = w.data.reshape(o, -1)
    out = (cols @ w_mat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if w.requires_grad:
            _accumulate(w, (g_mat.T @ cols).reshape(w.shape))
        if x.requires_grad:
            g_o = g.transpose(1, 0, 2, 3).reshape(o, -1)
            gcols = (w_mat.T @ g_o).reshape(c, kh, kw, n, ho, wo)
            # accumulate channel-major so every strided add is over contiguous slabs
            gxp = np.zeros((c, n) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            if p:
                gxp = gxp[:, :, p:-p, p:-p]
            gxp = np.ascontiguousarray(gxp)
            _accumulate(x, gxp)

    return _make(np.ascontiguousarray(out), (x, w), "conv2d", back)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5,
               update_stats: bool = True) -> Node:
    """Per-channel batch normalisation of ``x`` (N, C, H, W).

    In training mode the batch statistics are used and, when
    ``update_stats`` is set, the running buffers are updated in place
    (unbiased variance, PyTorch convention).
    """
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionMismatchError(f"batch_norm parameters must have shape ({c},)")
    bshape = (1, c, 1, 1)
    if training:
        axes = (0, 2, 3)
        count = x.data.size // c
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            unbiased = var * count / max(count - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def back(g):
        _accumulate(gamma, np.sum(g * xhat, axis=(0, 2, 3)))
        _accumulate(beta, np.sum(g, axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gx = g * gamma.data.reshape(bshape)
        if training:
            m = x.data.size // c
            s1 = gx.sum(axis=(0, 2, 3)).reshape(bshape)
            s2 = (gx * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
            gx = (gx - s1 / m - xhat * s2 / m) * inv_std.reshape(bshape)
        else:
            gx = gx * inv_std.reshape(bshape)
        _accumulate(x, gx)

    return _make(out, (x, gamma, beta), "batch_norm", back)


def adaptive_avg_pool(x: Node) -> Node:
    """Average over the spatial dims: (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape

    def back(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())

    return _make(x.data.mean(axis=(2, 3)), (x,), "avg_pool", back)


def linear(x, w, b) -> Node:
    x, w, b = constant(x), constant(w), constant(b)
    if x.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise DimensionMismatchError(f"linear shapes x={x.shape} w={w.shape} b={b.shape}")

    def back(g):
        _accumulate(x, g @ w.data)
        _accumulate(w, g.T @ x.data)
        _accumulate(b, g.sum(axis=0))

    return _make(x.data @ w.data.T + b.data, (x, w, b), "linear", back)


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionMismatchError(f"logits {z.shape} vs labels {labels.shape}")
    rows = np.arange(z.shape[0])
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(lse - shifted[rows, labels])

    def back(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, labels] -= 1.0
        _accumulate(logits, g * probs / z.shape[0])

    return _make(loss, (logits,), "cross_entropy", back)


# -- optimisation -------------------------------------------------------------

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: Sequence[np.ndarray] | None = None):
    """One SGD-with-momentum step.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``. Returns ``(new_params, new_velocity)``.
    """
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity, strict=True):
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionMismatchError(f"sgd_step shapes {p.shape}, {g.shape}, {v.shape}")
        v = momentum * v + g + weight_decay * p
        new_params.append(p - lr * v)
        new_velocity.append(v)
    return new_params, new_velocity


class SGD:
    """Momentum SGD over a fixed list of parameter nodes.

    Frozen nodes are rejected at construction, so no state is ever
    allocated for them.
    """

    def __init__(self, params: Iterable[Node], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        for p in self.params:
            if p.frozen:
                raise FrozenParameterError("frozen parameter passed to optimizer")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.frozen:
                raise FrozenParameterError("attempt to update a frozen parameter")
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.velocity = sgd_step([p.data for p in self.params], grads, self.lr,
                                      self.momentum, self.weight_decay, self.velocity)
        for p, d in zip(self.params, new):
            p.data = d

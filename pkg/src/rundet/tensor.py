"""Minimal reverse-mode autograd over numpy arrays.

Only the layer set the detector needs is provided: conv2d, deconv2d,
maxpool2d, relu, l2norm_channels, add, concat_channels, affine, to_rows,
softmax_ce and smooth_l1. Everything is double precision unless a caller
explicitly passes float32 data (benchmark mode).
"""
from __future__ import annotations

import numpy as np

from . import kernels

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class GraphError(RuntimeError):
    """Raised when backward is called on something that is not a scalar loss."""


class Tensor:
    """A value in the computation graph.

    ``grad`` is ``None`` for intermediates until backward reaches them.
    Leaves created as :class:`Param` always carry a gradient buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "tag")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), tag=None):
        if not (isinstance(data, np.ndarray) and data.dtype == np.float32):
            data = np.asarray(data, dtype=DTYPE)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = tuple(parents)
        self._backward = None
        self.tag = tag

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)


class Param(Tensor):
    """Trainable leaf with a hierarchical name and a freeze flag."""

    __slots__ = ("name", "frozen", "velocity")

    def __init__(self, data, name, frozen=False):
        super().__init__(data, requires_grad=not frozen, op="param")
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)
        self.velocity = None
        self.tag = name

    def freeze(self, frozen=True):
        self.frozen = frozen
        self.requires_grad = not frozen

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Param({self.name}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _node(data, op, parents, backward_fn, tag=None):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 op=op, parents=parents, tag=tag)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    # grads are never updated in place, so aliasing g is safe
    t.grad = g if t.grad is None else t.grad + g


# --- convolution family -------------------------------------------------------

def conv_output_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def deconv_output_size(n, k, stride, pad):
    return (n - 1) * stride - 2 * pad + k


def conv2d(x, w, b=None, stride=1, pad=0, tag=None):
    """Cross-correlation of ``x`` (B,C,H,W) with ``w`` (O,C,K,K)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    O, Cw, K, K2 = w.shape
    if C != Cw or K != K2:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Cw}x{K}x{K2}")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    if K > H + 2 * pad or K > W + 2 * pad:
        raise DimensionError(f"conv2d: kernel {K} larger than padded input {H}x{W}+{pad}")
    Ho, Wo = conv_output_size(H, K, stride, pad), conv_output_size(W, K, stride, pad)
    cols = kernels.im2col(np.ascontiguousarray(x.data), K, stride, pad)
    wmat = w.data.reshape(O, -1)
    out = wmat @ cols
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))
    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
        if w.requires_grad:
            _accumulate(w, (g2 @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=1))
        if x.requires_grad:
            dcols = wmat.T @ g2
            _accumulate(x, kernels.col2im(dcols, B, C, H, W, K, stride, pad))

    return _node(out, "conv2d", parents, backward_fn, tag)


def deconv2d(x, w, b=None, stride=1, pad=0, tag=None):
    """Transposed convolution of ``x`` (B,C,H,W) with ``w`` (C,O,K,K).

    Without bias this is the exact adjoint of :func:`conv2d` using the same
    kernel array, stride and padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    Cw, O, K, K2 = w.shape
    if C != Cw or K != K2:
        raise DimensionError(f"deconv2d: input has {C} channels, kernel expects {Cw}")
    Ho, Wo = deconv_output_size(H, K, stride, pad), deconv_output_size(W, K, stride, pad)
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"deconv2d: non-positive output size {Ho}x{Wo}")
    xmat = x.data.transpose(1, 0, 2, 3).reshape(C, -1)
    wmat = w.data.reshape(C, -1)
    cols = np.ascontiguousarray(wmat.T @ xmat)
    out = kernels.col2im(cols, B, O, Ho, Wo, K, stride, pad)
    if b is not None:
        b = as_tensor(b)
        out += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(g):
        gcols = kernels.im2col(np.ascontiguousarray(g), K, stride, pad)
        if w.requires_grad:
            _accumulate(w, (xmat @ gcols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = (wmat @ gcols).reshape(C, B, H, W).transpose(1, 0, 2, 3)
            _accumulate(x, np.ascontiguousarray(dx))

    return _node(out, "deconv2d", parents, backward_fn, tag)


def maxpool2d(x, window=2, stride=None, tag=None):
    x = as_tensor(x)
    stride = window if stride is None else stride
    B, C, H, W = x.shape
    if window > H or window > W:
        raise DimensionError(f"maxpool2d: window {window} larger than input {H}x{W}")
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(x.data), window, stride)

    def backward_fn(g):
        _accumulate(x, kernels.maxpool_backward(np.ascontiguousarray(g), arg, H, W))

    return _node(out, "maxpool2d", (x,), backward_fn, tag)


# --- elementwise and channel ops -----------------------------------------------

def relu(x, tag=None):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False)

    def backward_fn(g):
        _accumulate(x, g * mask)

    return _node(out, "relu", (x,), backward_fn, tag)


def l2norm_channels(x, gamma, eps=1e-10, tag=None):
    """Scale each spatial position's channel vector to unit norm, times ``gamma``."""
    x, gamma = as_tensor(x), as_tensor(gamma)
    if x.shape[1] != gamma.shape[0]:
        raise DimensionError("l2norm_channels: gamma length must equal channel count")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    unit = x.data / norm
    gk = gamma.data[None, :, None, None]
    out = unit * gk

    def backward_fn(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * unit).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gg = g * gk
            proj = (gg * unit).sum(axis=1, keepdims=True)
            _accumulate(x, (gg - unit * proj) / norm)

    return _node(out, "l2norm", (x, gamma), backward_fn, tag)


def add(*xs, tag=None):
    """Elementwise sum, evaluated left to right."""
    xs = tuple(as_tensor(x) for x in xs)
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise DimensionError(f"add: shape mismatch {shape} vs {x.shape}")
    out = xs[0].data
    for x in xs[1:]:
        out = out + x.data

    def backward_fn(g):
        for x in xs:
            _accumulate(x, g)

    return _node(out, "add", xs, backward_fn, tag)


def concat_channels(xs, tag=None):
    xs = tuple(as_tensor(x) for x in xs)
    out = np.concatenate([x.data for x in xs], axis=1)
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward_fn(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            _accumulate(x, np.ascontiguousarray(g[:, lo:hi]))

    return _node(out, "concat", xs, backward_fn, tag)


def affine(x, scale=1.0, shift=0.0, tag=None):
    """``scale * x + shift`` with scalar constants."""
    x = as_tensor(x)
    out = x.data * scale + shift

    def backward_fn(g):
        _accumulate(x, g * scale)

    return _node(out, "affine", (x,), backward_fn, tag)


def to_rows(maps, k, tag=None):
    """Flatten per-level (B, A*k, H, W) maps into (B, rows, k) rows.

    Rows are ordered (level, row, column, anchor), anchors being the
    slowest-varying channel group.
    """
    maps = tuple(as_tensor(m) for m in maps)
    B = maps[0].shape[0]
    pieces, counts = [], []
    for m in maps:
        b, ch, H, W = m.shape
        if b != B or ch % k:
            raise DimensionError(f"to_rows: map of shape {m.shape} not divisible into {k}-wide rows")
        pieces.append(m.data.transpose(0, 2, 3, 1).reshape(B, -1, k))
        counts.append(pieces[-1].shape[1])
    out = np.concatenate(pieces, axis=1)
    bounds = np.cumsum([0] + counts)

    def backward_fn(g):
        for m, lo, hi in zip(maps, bounds[:-1], bounds[1:]):
            b, ch, H, W = m.shape
            piece = g[:, lo:hi].reshape(b, H, W, ch).transpose(0, 3, 1, 2)
            _accumulate(m, np.ascontiguousarray(piece))

    return _node(out, "to_rows", maps, backward_fn, tag)


# --- losses --------------------------------------------------------------------

def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_ce(logits, target, mask=None, tag=None):
    """Summed cross-entropy of ``logits`` (..., K) against integer ``target``.

    ``mask`` selects which rows contribute; omitted means all rows.
    """
    logits = as_tensor(logits)
    K = logits.shape[-1]
    z = logits.data.reshape(-1, K)
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise DimensionError("softmax_ce: one target per logit row required")
    if t.size and (t.min() < 0 or t.max() >= K):
        raise IndexError(f"softmax_ce: target out of range for {K} classes")
    m = np.ones(t.shape[0], dtype=bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    logp = log_softmax(z)
    rows = np.arange(t.shape[0])
    loss = -(logp[rows, t] * m).sum()

    def backward_fn(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= m[:, None] * g
        _accumulate(logits, d.reshape(logits.shape))

    return _node(np.asarray(loss), "softmax_ce", (logits,), backward_fn, tag)


def smooth_l1(pred, target, mask=None, tag=None):
    """Summed Huber loss with unit threshold; ``mask`` broadcasts over ``pred``."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"smooth_l1: shape mismatch {pred.shape} vs {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    small = ad < 1.0
    elem = np.where(small, 0.5 * d * d, ad - 0.5)
    m = np.ones(d.shape) if mask is None else np.broadcast_to(np.asarray(mask, dtype=d.dtype), d.shape)
    loss = (elem * m).sum()

    def backward_fn(g):
        _accumulate(pred, np.where(small, d, np.sign(d)) * m * g)

    return _node(np.asarray(loss), "smooth_l1", (pred,), backward_fn, tag)


# --- graph traversal -----------------------------------------------------------

def topological_order(root):
    """Nodes reachable from ``root``, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(param) into every reachable ``Param.grad``."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        if not isinstance(node, Param):
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # free intermediate buffers; params keep theirs
    for node in order:
        if not isinstance(node, Param) and node is not loss and node.parents:
            node.grad = None


def sgd_step(params, lr, momentum=0.9, weight_decay=5e-4):
    """``v = momentum*v + grad + wd*w``; ``w -= lr*v``. Frozen params are skipped."""
    for p in params:
        if p.frozen:
            continue
        step = p.grad + weight_decay * p.data if weight_decay else p.grad
        if momentum:
            p.velocity = step.copy() if p.velocity is None else momentum * p.velocity + step
            step = p.velocity
        p.data = p.data - lr * step


def zero_grad(params):
    for p in params:
        p.zero_grad()

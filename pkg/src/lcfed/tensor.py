"""Minimal dense tensor with reverse-mode automatic differentiation.

Every value flowing through the model (features, embeddings, segmentation
maps, losses) is a ``Tensor`` wrapping a numpy array.  Ops that take part in
gradient computation record their inputs and a closure that pushes the output
gradient back to them; ``backward()`` on a scalar replays those closures once
each in reverse topological order and then discards the graph.

Conventions:
  * gradients accumulate (+=) into ``.grad``; call ``zero_grad()`` between
    optimizer steps,
  * conv2d is cross-correlation (no kernel flip),
  * dtype follows the input arrays; tests run in float64, training may run
    in float32.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "graph_node",
    "stop_gradient",
    "relu",
    "sigmoid",
    "concat",
    "global_average_pool",
    "matmul",
    "linear",
    "conv2d",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._grad_fn = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(np.asarray(g), self.data.shape)

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Propagate gradients from this scalar to every ancestor.

        The recorded graph is discarded afterwards; a second backward from
        the same root raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {self.data.shape}")
        if self._consumed:
            raise RuntimeError("backward already ran for this root; rebuild the graph")

        topo: list[Tensor] = []
        visited = {id(self)}
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, idx = stack.pop()
            if idx < len(node._parents):
                stack.append((node, idx + 1))
                child = node._parents[idx]
                if id(child) not in visited:
                    visited.add(id(child))
                    stack.append((child, 0))
            else:
                topo.append(node)

        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._grad_fn is not None:
                node._grad_fn(node.grad)
        # per-forward record: drop edges so the graph is garbage-collected
        for node in topo:
            node._parents = ()
            node._grad_fn = None
        self._consumed = True

    # -- arithmetic ----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data

        def grad_fn(g):
            self.accumulate_grad(g)
            other.accumulate_grad(g)

        return graph_node(out_data, (self, other), grad_fn)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        out_data = self.data - other.data

        def grad_fn(g):
            self.accumulate_grad(g)
            other.accumulate_grad(-g)

        return graph_node(out_data, (self, other), grad_fn)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data

        def grad_fn(g):
            self.accumulate_grad(g * other.data)
            other.accumulate_grad(g * self.data)

        return graph_node(out_data, (self, other), grad_fn)

    __rmul__ = __mul__

    def __neg__(self):
        def grad_fn(g):
            self.accumulate_grad(-g)

        return graph_node(-self.data, (self,), grad_fn)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def grad_fn(g):
            self.accumulate_grad(g.reshape(src_shape))

        return graph_node(out_data, (self,), grad_fn)

    def __truediv__(self, other):
        other = self._coerce(other)
        out_data = self.data / other.data

        def grad_fn(g):
            self.accumulate_grad(g / other.data)
            other.accumulate_grad(-g * out_data / other.data)

        return graph_node(out_data, (self, other), grad_fn)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None):
        if axis is None:
            def grad_fn(g):
                self.accumulate_grad(np.full_like(self.data, float(g)))

            return graph_node(np.asarray(self.data.sum(), dtype=self.data.dtype), (self,), grad_fn)

        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        out_data = self.data.sum(axis=axes)
        keep_shape = tuple(1 if a in axes or a - self.data.ndim in axes else s
                           for a, s in enumerate(self.data.shape))

        def grad_fn(g):
            self.accumulate_grad(np.broadcast_to(g.reshape(keep_shape), self.data.shape))

        return graph_node(out_data, (self,), grad_fn)

    def mean(self, axis=None):
        if axis is None:
            n = self.data.size

            def grad_fn(g):
                self.accumulate_grad(np.full_like(self.data, float(g) / n))

            return graph_node(np.asarray(self.data.mean(), dtype=self.data.dtype), (self,), grad_fn)

        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        scale = 1.0
        for a in axes:
            scale *= self.data.shape[a]
        return self.sum(axis=axes) * (1.0 / scale)

    def abs(self):
        sign = np.sign(self.data)

        def grad_fn(g):
            self.accumulate_grad(g * sign)

        return graph_node(np.abs(self.data), (self,), grad_fn)

    def sqrt(self):
        out_data = np.sqrt(self.data)
        # derivative at exactly 0 is clamped to 0 to keep gradients finite
        safe = np.where(out_data > 0, out_data, 1.0)

        def grad_fn(g):
            self.accumulate_grad(np.where(out_data > 0, g / (2.0 * safe), 0.0))

        return graph_node(out_data, (self,), grad_fn)


def graph_node(data: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    """Create a tensor from an op result, wiring it into the graph when any
    parent tracks gradients."""
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out.grad = None  # allocated lazily during backward
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values, zero map on gradients: detaches x from the graph."""
    return Tensor(x.data)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g):
        x.accumulate_grad(g * mask)

    return graph_node(np.where(mask, x.data, 0), (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)
    # keep the output in the open interval even where exp saturates
    one = d.dtype.type(1)
    np.clip(out_data, np.nextafter(d.dtype.type(0), one), np.nextafter(one, 0), out=out_data)

    def grad_fn(g):
        x.accumulate_grad(g * out_data * (1.0 - out_data))

    return graph_node(out_data, (x,), grad_fn)


def concat(tensors: list, axis: int = 1) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.accumulate_grad(piece)

    return graph_node(out_data, tuple(tensors), grad_fn)


def global_average_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise ValueError(f"expected B x C x H x W input, got shape {x.shape}")
    _, _, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        x.accumulate_grad(np.broadcast_to(g[:, :, None, None], x.shape) / (h * w))

    return graph_node(out_data, (x,), grad_fn)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"matmul inner dims differ: {x.shape} vs {w.shape}")
    out_data = x.data @ w.data

    def grad_fn(g):
        x.accumulate_grad(g @ w.data.T)
        w.accumulate_grad(x.data.T @ g)

    return graph_node(out_data, (x, w), grad_fn)


def linear(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """y = x W + bias for x: (B, Cin), w: (Cin, Cout), bias: (Cout,)."""
    return matmul(x, w) + bias


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of (B, Cin, H, W) with (Cout, Cin, k, k) kernels.

    Default padding k//2 preserves spatial size at stride 1.  Implemented as
    im2col plus one batched GEMM; the backward pass reuses the column buffer.
    """
    b, cin, h, w = x.shape
    cout, kc, kh, kw = kernels.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    if kc != cin:
        raise ValueError(f"channel mismatch: input has {cin}, kernels expect {kc}")
    k = kh
    pad = k // 2 if padding is None else padding

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    # cols[b, c, t, i*wo+j] = xp[b, c, i*stride+di, j*stride+dj], t = di*k+dj
    cols = np.empty((b, cin, k * k, ho * wo), dtype=xp.dtype)
    cv = cols.reshape(b, cin, k, k, ho, wo)
    for di in range(k):
        for dj in range(k):
            cv[:, :, di, dj] = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
    cols2 = cols.reshape(b, cin * k * k, ho * wo)

    wm = kernels.data.reshape(cout, cin * k * k)
    out_data = np.matmul(wm[None], cols2).reshape(b, cout, ho, wo)
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    def grad_fn(g):
        g2 = g.reshape(b, cout, ho * wo)
        kernels.accumulate_grad(
            np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape))
        if bias is not None:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        dcols = np.matmul(wm.T[None], g2).reshape(b, cin, k, k, ho, wo)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                dxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += dcols[:, :, di, dj]
        x.accumulate_grad(dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return graph_node(out_data, parents, grad_fn)

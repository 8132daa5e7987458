"""Composable layers on top of the tensor engine.

A layer owns named parameter tensors and carries a group tag that decides how
federation treats it: ``body`` parameters are averaged globally, ``pcs``
parameters belong to the channel-selection generator (shared by default,
optionally personal), and ``head`` parameters always stay local to a site.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, graph_node, relu

GROUP_BODY = "body"
GROUP_PCS = "pcs"
GROUP_HEAD = "head"
GROUPS = (GROUP_BODY, GROUP_PCS, GROUP_HEAD)


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                  eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance, optionally with affine params.

    (B, C, H, W) inputs normalize each sample-channel plane over H*W;
    (B, C) inputs normalize each sample over its C entries.  The affine
    scale/shift, when given, is per channel in both cases.
    """
    d = x.data
    if d.ndim == 4:
        axes = (2, 3)
        m = d.shape[2] * d.shape[3]
    elif d.ndim == 2:
        axes = (1,)
        m = d.shape[1]
    else:
        raise ValueError(f"instance_norm expects 2-D or 4-D input, got {d.ndim}-D")
    if m < 2:
        raise ValueError("normalization group has a single element; variance undefined")

    mu = d.mean(axis=axes, keepdims=True)
    var = d.var(axis=axes, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (d - mu) / sigma

    if gamma is not None:
        gshape = (1, -1) if d.ndim == 2 else (1, -1, 1, 1)
        out_data = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)
    else:
        out_data = xhat

    def grad_fn(g):
        if gamma is not None:
            reduce_axes = (0,) if d.ndim == 2 else (0, 2, 3)
            gamma.accumulate_grad((g * xhat).sum(axis=reduce_axes))
            beta.accumulate_grad(g.sum(axis=reduce_axes))
            gy = g * gamma.data.reshape(gshape)
        else:
            gy = g
        gmean = gy.mean(axis=axes, keepdims=True)
        xmean = (gy * xhat).mean(axis=axes, keepdims=True)
        x.accumulate_grad((gy - gmean - xhat * xmean) / sigma)

    parents = (x,) if gamma is None else (x, gamma, beta)
    return graph_node(out_data, parents, grad_fn)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x downsample by max pooling; gradient routes to the argmax only."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even for 2x2 max pool, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        dwin = np.zeros((b, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        x.accumulate_grad(
            dwin.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w))

    return graph_node(out_data, (x,), grad_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """2x nearest-neighbor upsampling; gradient sums over each 2x2 block."""
    b, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def grad_fn(g):
        x.accumulate_grad(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return graph_node(out_data, (x,), grad_fn)


def per_pixel_linear(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Apply the same linear map (C -> N) at every pixel of a (B, C, H, W) map.

    Equivalent to a 1x1 convolution but cheaper: one batched GEMM.
    """
    b, c, h, w_sp = x.shape
    cin, n = w.shape
    if cin != c:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {cin}")
    xr = x.data.reshape(b, c, h * w_sp)
    out_data = (np.matmul(w.data.T[None], xr) + bias.data[None, :, None]).reshape(b, n, h, w_sp)

    def grad_fn(g):
        g2 = g.reshape(b, n, h * w_sp)
        w.accumulate_grad(np.matmul(xr, g2.transpose(0, 2, 1)).sum(axis=0))
        bias.accumulate_grad(g2.sum(axis=(0, 2)))
        x.accumulate_grad(np.matmul(w.data[None], g2).reshape(x.shape))

    return graph_node(out_data, (x, w, bias), grad_fn)


# ---------------------------------------------------------------------------
# parameter-carrying layers
# ---------------------------------------------------------------------------

class Layer:
    """Base for layers owning named parameters tagged with a federation group."""

    def __init__(self, group: str):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        self.group = group
        self._params: list[tuple[str, Tensor]] = []

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params.append((name, t))
        return t

    def parameters(self):
        return list(self._params)


class Conv2d(Layer):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 group: str = GROUP_BODY, dtype=np.float64):
        super().__init__(group)
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = self._register("w", (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype))
        self.bias = self._register("b", np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor, stride: int = 1) -> Tensor:
        from .tensor import conv2d
        return conv2d(x, self.weight, self.bias, stride=stride)


class Linear(Layer):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 group: str = GROUP_BODY, dtype=np.float64):
        super().__init__(group)
        std = np.sqrt(2.0 / cin)
        self.weight = self._register("w", (rng.standard_normal((cin, cout)) * std).astype(dtype))
        self.bias = self._register("b", np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import linear
        return linear(x, self.weight, self.bias)


class InstanceNorm(Layer):
    def __init__(self, channels: int, group: str = GROUP_BODY, dtype=np.float64, eps: float = 1e-5):
        super().__init__(group)
        self.eps = eps
        self.gamma = self._register("g", np.ones(channels, dtype=dtype))
        self.beta = self._register("o", np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gamma, self.beta, eps=self.eps)


class PerPixelLinear(Layer):
    def __init__(self, cin: int, n: int, rng: np.random.Generator,
                 group: str = GROUP_HEAD, dtype=np.float64):
        super().__init__(group)
        std = np.sqrt(1.0 / cin)
        self.weight = self._register("w", (rng.standard_normal((cin, n)) * std).astype(dtype))
        self.bias = self._register("b", np.zeros(n, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return per_pixel_linear(x, self.weight, self.bias)


class ConvBlock(Layer):
    """conv3x3 -> instance norm -> relu."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 group: str = GROUP_BODY, dtype=np.float64):
        super().__init__(group)
        self.conv = Conv2d(cin, cout, 3, rng, group, dtype)
        self.norm = InstanceNorm(cout, group, dtype)
        for name, t in self.conv.parameters():
            self._params.append((f"conv.{name}", t))
        for name, t in self.norm.parameters():
            self._params.append((f"norm.{name}", t))

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.conv(x)))

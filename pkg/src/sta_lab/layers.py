"""Neural network layers on top of :mod:`sta_lab.tensor`.

Convolutions use the cross-correlation convention (no kernel flip) and
NCHW layout throughout. Weight layouts follow the usual framework
conventions: ``Cout×Cin/groups×K×K`` for convolutions and ``Cin×Cout×K×K``
for transposed convolutions.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, concat, count_macs, matmul

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# convolution kernels


def conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, K, K) over a padded input."""
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    w = _windows(xp, k, stride)
    n, c, ho, wo = w.shape[:4]
    return w.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add (N, Ho*Wo, C*K*K) back onto the padded grid."""
    n, c = padded_shape[:2]
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += cols[:, :, ky, kx]
    return out


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _unpad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.ascontiguousarray(x[:, :, pad:-pad, pad:-pad])


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation.

    Output extent is ``floor((H + 2*padding - K) / stride) + 1`` per axis.
    ``groups == Cin == Cout`` is the depthwise case.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and 4-D weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"only square kernels are supported, got {k}x{k2}")
    if cin % groups or cout % groups or cin_g * groups != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {cin} channels, weight {weight.shape} with groups={groups}"
        )
    ho, wo = conv_out_extent(h, k, stride, padding), conv_out_extent(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} is not positive for input {h}x{w}, K={k}")

    if groups > 1 and groups == cin == cout:
        out = _depthwise(x, weight, stride, padding, ho, wo)
    elif groups == 1:
        out = _dense_conv(x, weight, stride, padding, ho, wo)
    else:
        ci, co = cin // groups, cout // groups
        out = concat(
            [
                _dense_conv(x[:, g * ci : (g + 1) * ci], weight[g * co : (g + 1) * co], stride, padding, ho, wo)
                for g in range(groups)
            ],
            axis=1,
        )
    if bias is not None:
        out = out + as_tensor(bias).reshape(1, cout, 1, 1)
    return out


def _dense_conv(x: Tensor, weight: Tensor, stride, pad, ho, wo) -> Tensor:
    n = x.shape[0]
    cout, cin, k, _ = weight.shape
    xp = _pad(x.data, pad)
    cols = _im2col(xp, k, stride)
    wmat = weight.data.reshape(cout, -1)
    count_macs(n * ho * wo * cin * k * k * cout)
    out = np.matmul(cols, wmat.T).transpose(0, 2, 1).reshape(n, cout, ho, wo)

    def bw(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 1])).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(g2.transpose(0, 2, 1), wmat)
            gx = _unpad(_col2im(dcols, xp.shape, k, stride, ho, wo), pad)
        return gx, gw

    return Tensor._make(np.ascontiguousarray(out), (x, weight), bw)


def _depthwise(x: Tensor, weight: Tensor, stride, pad, ho, wo) -> Tensor:
    n, c = x.shape[:2]
    k = weight.shape[-1]
    xp = _pad(x.data, pad)
    wk = weight.data.reshape(c, k, k)
    count_macs(n * c * k * k * ho * wo)
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.data, wk))
    for ky in range(k):
        for kx in range(k):
            out += xp[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] * wk[:, ky, kx][:, None, None]

    def bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wk) if weight.requires_grad else None
        for ky in range(k):
            for kx in range(k):
                sl = (slice(None), slice(None), slice(ky, ky + stride * ho, stride), slice(kx, kx + stride * wo, stride))
                if gw is not None:
                    gw[:, ky, kx] = (g * xp[sl]).sum(axis=(0, 2, 3))
                if gxp is not None:
                    gxp[sl] += g * wk[:, ky, kx][:, None, None]
        return (None if gxp is None else _unpad(gxp, pad)), (None if gw is None else gw.reshape(weight.shape))

    return Tensor._make(out, (x, weight), bw)


def depthwise_conv3x3(x, weight, bias=None) -> Tensor:
    """Shape-preserving per-channel 3x3 convolution (stride 1, zero padding 1)."""
    x, weight = as_tensor(x), as_tensor(weight)
    c = x.shape[1]
    if weight.shape != (c, 1, 3, 3):
        raise ShapeError(f"depthwise 3x3 weight for {c} channels must be ({c}, 1, 3, 3), got {weight.shape}")
    return conv2d(x, weight, bias, stride=1, padding=1, groups=c)


def conv_transpose2d(x, weight, bias=None, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d` with the same weight.

    Output extent is ``(H - 1) * stride + K - 2 * padding``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    n, cin, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != cin:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.shape}, weight {weight.shape}")
    _, cout, k, _ = weight.shape
    ho, wo = (h - 1) * stride + k - 2 * padding, (w - 1) * stride + k - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d output extent {ho}x{wo} is not positive")
    padded = (n, cout, ho + 2 * padding, wo + 2 * padding)
    wmat = weight.data.reshape(cin, cout * k * k)
    xcols = x.data.reshape(n, cin, h * w).transpose(0, 2, 1)
    count_macs(n * h * w * cin * cout * k * k)
    out = _unpad(_col2im(np.matmul(xcols, wmat), padded, k, stride, h, w), padding)

    def bw(g):
        dcols = _im2col(_pad(g, padding), k, stride)
        gx = gw = None
        if x.requires_grad:
            gx = np.matmul(dcols, wmat.T).transpose(0, 2, 1).reshape(x.shape)
        if weight.requires_grad:
            gw = np.tensordot(xcols, dcols, axes=([0, 1], [0, 1])).reshape(weight.shape)
        return gx, gw

    out = Tensor._make(out, (x, weight), bw)
    if bias is not None:
        out = out + as_tensor(bias).reshape(1, cout, 1, 1)
    return out


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance). In inference mode the
    running buffers are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm expects {c} channels, got gamma {gamma.shape}")
    axes = (0, 2, 3)
    shp = (1, c, 1, 1)
    m = x.size // c
    if training:
        if m < 2:
            raise ValueError("batch_norm in training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shp)) * inv_std.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shp)
        if training:
            dx = (inv_std.reshape(shp) / m) * (
                m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std.reshape(shp)
        return dx, dgamma, dbeta

    return Tensor._make(out, (x, gamma, beta), bw)


def layer_norm(x, gamma, beta, axis: int = 1, eps: float = LN_EPS) -> Tensor:
    """Normalize over ``axis`` (the channel axis) independently at every other index."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = axis % x.ndim
    c = x.shape[axis]
    if c < 1 or gamma.shape != (c,):
        raise ShapeError(f"layer_norm over {c} channels got gamma {gamma.shape}")
    shp = [1] * x.ndim
    shp[axis] = c
    mean = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mean
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv_std
    g_ = gamma.data.reshape(shp)
    out = xhat * g_ + beta.data.reshape(shp)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        dxhat = g * g_
        dx = inv_std * (
            dxhat - dxhat.mean(axis=axis, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# activations, pooling, linear


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """GeLU, tanh approximation.

    ``0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))``
    """
    x = as_tensor(x)
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v**3))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return Tensor._make(out, (x,), bw)


def max_pool2x2(x) -> Tensor:
    """2x2 max pooling with stride 2. Ties route the gradient to the first maximum."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return Tensor._make(np.ascontiguousarray(out), (x,), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as (in_features, out_features)."""
    out = matmul(as_tensor(x), as_tensor(weight))
    return out if bias is None else out + bias


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Minimal parameter container.

    Parameters, buffers and submodules are discovered from instance attributes
    in assignment order, which gives stable dotted names for checkpoints.
    """

    training = True

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, groups: int = 1, dtype=np.float32):
        fan_in = cin // groups * k * k
        self.weight = _uniform(rng, (cout, cin // groups, k, k), fan_in, dtype)
        self.bias = _uniform(rng, (cout,), fan_in, dtype)
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 2,
                 padding: int = 0, dtype=np.float32):
        fan_in = cout * k * k
        self.weight = _uniform(rng, (cin, cout, k, k), fan_in, dtype)
        self.bias = _uniform(rng, (cout,), fan_in, dtype)
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, c: int, dtype=np.float32, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, c: int, dtype=np.float32, eps: float = LN_EPS):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.eps = eps

    def forward(self, x, axis: int = 1):
        return layer_norm(x, self.gamma, self.beta, axis=axis, eps=self.eps)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        self.weight = _uniform(rng, (cin, cout), cin, dtype)
        self.bias = _uniform(rng, (cout,), cin, dtype) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)

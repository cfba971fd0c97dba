"""Convolution, pooling, resampling, normalization, attention gate and the
pyramid bottleneck blocks.

Functional ops take tensors and return tensors. The ``Module`` subclasses
own their parameters and expose them by dotted path for checkpointing.
"""
from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, concat, matmul_1x1, mul, record_op, relu, sigmoid

__all__ = [
    "Module", "Conv2d", "BatchNorm2d", "AttentionGate", "ASPP", "SPP", "DoubleConv",
    "UpConv", "conv2d", "maxpool2", "upsample2", "upsample_nearest", "avgpool_grid",
    "batchnorm", "attention_gate", "aspp_block", "spp_block", "clamp_rates",
]


# ---------------------------------------------------------------- functional

def conv_output_size(size: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """Dilated 2-D cross-correlation with zero padding.

    ``y[n,o,i,j] = bias[o] + sum_{c,a,b} x[n,c,i*s-p+r*a, j*s-p+r*b] * w[o,c,a,b]``
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, kernel expects {cin}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be >= 1, padding >= 0")
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(w, kw, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}, "
            f"dilation {dilation}, padding {padding}")
    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    # columns are (C*kh*kw, N*Ho*Wo) so each pass is a single GEMM
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, dilation, padding)
    wm = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, g2)
            if pointwise:
                gx = np.ascontiguousarray(gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                gx = kernels.col2im(gcols, x.shape, kh, kw, stride, dilation, padding)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record_op(out, inputs, fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool with stride 2; ties route the gradient to the first element."""
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    out, idx = kernels.maxpool2_forward(x.data)
    return record_op(out, (x,), lambda g: (kernels.maxpool2_backward(g, idx),))


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    # half-pixel centres, source coordinate clamped at the border
    a = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        a[i, i0] += 1.0 - lam
        a[i, i1] += lam
    return a


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record_op(out, (x,), fn)


def upsample2(x: Tensor, mode: str = "bilinear") -> Tensor:
    """Double H and W by nearest-neighbour or bilinear (half-pixel) interpolation."""
    if mode == "nearest":
        return upsample_nearest(x, 2)
    if mode != "bilinear":
        raise ValueError(f"unknown upsampling mode {mode!r}")
    ah = _bilinear_matrix(x.shape[2], x.dtype)
    aw = _bilinear_matrix(x.shape[3], x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return record_op(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


def avgpool_grid(x: Tensor, s: int) -> Tensor:
    """Average-pool to an ``s x s`` grid; H and W must be divisible by ``s``."""
    n, c, h, w = x.shape
    if h % s or w % s:
        raise ShapeError(f"spatial dims {h}x{w} are not divisible by grid scale {s}")
    fh, fw = h // s, w // s
    out = x.data.reshape(n, c, s, fh, s, fw).mean(axis=(3, 5))

    def fn(g):
        g = np.broadcast_to(g[:, :, :, None, :, None] / (fh * fw), (n, c, s, fh, s, fw))
        return (np.ascontiguousarray(g).reshape(x.shape),)

    return record_op(out, (x,), fn)


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: Tensor,
              running_var: Tensor, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over N, H, W.

    In training mode the batch statistics are used and the running estimates
    (unbiased variance) are updated in place.
    """
    n, c, h, w = x.shape
    if scale.shape != (c,):
        raise ShapeError(f"batchnorm has {scale.shape[0]} channels, input has {c}")
    bshape = (1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var * m / (m - 1)
        out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

        def fn(g):
            gs = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                k = (scale.data * inv / m).reshape(bshape)
                gx = k * (m * g - gb.reshape(bshape) - xhat * gs.reshape(bshape))
            return gx, gs, gb
    else:
        inv = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

        def fn(g):
            gx = g * (scale.data * inv).reshape(bshape) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record_op(out.astype(x.dtype, copy=False), (x, scale, shift), fn)


def attention_gate(x_l: Tensor, g: Tensor, p: "AttentionGate") -> tuple[Tensor, Tensor]:
    """Additive attention over a skip connection.

    ``g`` must already be on ``x_l``'s grid. Returns the rescaled features and
    the single-channel coefficient map ``alpha``.
    """
    if x_l.shape[0] != g.shape[0] or x_l.shape[2:] != g.shape[2:]:
        raise ShapeError(
            f"attention gate needs matching N,H,W; skip is {x_l.shape}, gating is {g.shape}")
    hidden = relu(matmul_1x1(x_l, p.w_x) + matmul_1x1(g, p.w_g, p.b_g))
    alpha = sigmoid(matmul_1x1(hidden, p.psi, p.b_psi))
    return mul(x_l, alpha), alpha


def clamp_rates(rates: Sequence[int], size: int) -> list[int]:
    """Limit dilation rates to ``size // 2`` and drop the duplicates this creates."""
    limit = max(1, size // 2)
    out: list[int] = []
    for r in rates:
        r = min(int(r), limit)
        if r not in out:
            out.append(r)
    return out


def aspp_block(x: Tensor, p: "ASPP") -> Tensor:
    """Parallel dilated branches, concatenated and fused back to the input width."""
    limit = max(p.rates)
    if limit > max(1, min(x.shape[2:]) // 2):
        raise ShapeError(
            f"ASPP rate {limit} does not fit a {x.shape[2]}x{x.shape[3]} feature map")
    branches = [br(x) for br in p.branches]
    return p.fuse(concat(branches, axis=1))


def spp_block(x: Tensor, p: "SPP") -> Tensor:
    """Pyramid pooling: pool to each grid, project, upsample, concat with input, fuse."""
    h, w = x.shape[2:]
    parts = [x]
    for s, proj in zip(p.scales, p.projections):
        if h % s or w % s:
            raise ShapeError(f"spatial dims {h}x{w} are not divisible by grid scale {s}")
        pooled = relu(proj(avgpool_grid(x, s)))
        parts.append(upsample_nearest(pooled, h // s) if h // s > 1 else pooled)
    return p.fuse(concat(parts, axis=1))


# ---------------------------------------------------------------- modules

class Module:
    """Minimal parameter container.

    Tensor attributes are parameters unless their name is listed in
    ``_buffers``; Module attributes are walked recursively in assignment order.
    """

    training = True
    _buffers: tuple = ()

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}{i + 1}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def _named_tensors(self, prefix: str, buffers: bool) -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and (name in self._buffers) == buffers:
                yield (f"{prefix}.{name}" if prefix else name), val
        for name, child in self.children():
            yield from child._named_tensors(f"{prefix}.{name}" if prefix else name, buffers)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return self._named_tensors(prefix, buffers=False)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return self._named_tensors(prefix, buffers=True)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.parameters()]))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for _, t in list(self.named_parameters()) + list(self.named_buffers()):
            t.data = t.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return Tensor(w, requires_grad=True)


def _param(value, dtype) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, dilation: int = 1,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if k < 1 or cin < 1 or cout < 1:
            raise ValueError("kernel size and channel counts must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k - 1) // 2 if padding is None else padding
        self.weight = _kaiming(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.bias = _param(np.zeros(cout), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.momentum = momentum
        self.eps = eps
        self.scale = _param(np.ones(c), dtype)
        self.shift = _param(np.zeros(c), dtype)
        self.running_mean = Tensor(np.zeros(c, dtype=dtype))
        self.running_var = Tensor(np.ones(c, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.scale, self.shift, self.running_mean, self.running_var,
                         self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, cin, cout, k=3, dilation=1, rng=None, dtype=np.float32):
        self.conv = Conv2d(cin, cout, k, dilation=dilation, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))


class DoubleConv(Module):
    def __init__(self, cin, cout, rng=None, dtype=np.float32):
        self.conv1 = ConvBNReLU(cin, cout, rng=rng, dtype=dtype)
        self.conv2 = ConvBNReLU(cout, cout, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.conv2(self.conv1(x))


class UpConv(Module):
    """Bilinear x2 upsampling followed by a 3x3 conv, BN and ReLU."""

    def __init__(self, cin, cout, rng=None, dtype=np.float32):
        self.conv = ConvBNReLU(cin, cout, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.conv(upsample2(x, "bilinear"))


class AttentionGate(Module):
    """Parameters of one additive attention gate (all maps are 1x1 convs).

    ``psi`` and ``b_psi`` start at zero so an untrained gate passes half of
    every skip feature.
    """

    def __init__(self, f_l: int, f_g: int, f_int: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        f_int = max(1, f_l // 2) if f_int is None else f_int
        self.w_x = _kaiming(rng, (f_l, f_int), f_l, dtype)
        self.w_g = _kaiming(rng, (f_g, f_int), f_g, dtype)
        self.b_g = _param(np.zeros(f_int), dtype)
        self.psi = _param(np.zeros((f_int, 1)), dtype)
        self.b_psi = _param(np.zeros(1), dtype)

    def forward(self, x_l: Tensor, g: Tensor) -> tuple[Tensor, Tensor]:
        return attention_gate(x_l, g, self)


class ASPP(Module):
    """Atrous spatial pyramid: one branch per rate (rate 1 uses a 1x1 kernel)."""

    def __init__(self, channels: int, rates: Sequence[int] = (1, 6, 12, 18),
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if not rates:
            raise ValueError("ASPP needs at least one rate")
        self.rates = [int(r) for r in rates]
        self.branches = [ConvBNReLU(channels, channels, k=1 if r == 1 else 3, dilation=r,
                                    rng=rng, dtype=dtype) for r in self.rates]
        self.fuse = ConvBNReLU(channels * len(self.rates), channels, k=1, rng=rng, dtype=dtype)

    def forward(self, x):
        return aspp_block(x, self)


class SPP(Module):
    """Pyramid pooling bottleneck (average-pooled grids, 1x1 projections, fuse)."""

    def __init__(self, channels: int, scales: Sequence[int] = (1, 2, 4),
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if not scales:
            raise ValueError("SPP needs at least one grid scale")
        self.scales = [int(s) for s in scales]
        width = max(1, channels // 4)
        self.projections = [Conv2d(channels, width, k=1, rng=rng, dtype=dtype)
                            for _ in self.scales]
        self.fuse = ConvBNReLU(channels + width * len(self.scales), channels, k=1,
                               rng=rng, dtype=dtype)

    def forward(self, x):
        return spp_block(x, self)

"""Convolution, normalization and pooling layers, and the factorized 3D block.

Convolutions use the correlation convention (no kernel flip).  Output extent
along each axis is ``(n + 2 * pad - k) // stride + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .module import Module, ProfileRow, elems, n_params
from .ssn import SsnParams, ssn_forward
from .tensor import ShapeError, Tensor, concat, relu

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if min(self.stride) < 1:
            raise ValueError(f"strides must be >= 1, got {self.stride}")
        if min(self.padding) < 0:
            raise ValueError(f"paddings must be >= 0, got {self.padding}")
        if self.weight.ndim != 5:
            raise ShapeError(f"conv weight must be rank 5, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def kernel(self) -> Triple:
        return tuple(self.weight.shape[2:])


def _pad(a: np.ndarray, padding: Triple) -> np.ndarray:
    if not any(padding):
        return a
    pt, ph, pw = padding
    return np.pad(a, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _unpad(a: np.ndarray, padding: Triple) -> np.ndarray:
    if not any(padding):
        return a
    pt, ph, pw = padding
    t, h, w = a.shape[2:]
    return a[:, :, pt : t - pt, ph : h - ph, pw : w - pw]


def conv_out_shape(in_shape, out_channels: int, kernel: Triple, stride: Triple, padding: Triple):
    b, _, t, h, w = in_shape
    ext = []
    for n, k, s, p in zip((t, h, w), kernel, stride, padding):
        if n + 2 * p < k:
            raise ShapeError(f"kernel {kernel} exceeds padded input {(t, h, w)} with padding {padding}")
        ext.append((n + 2 * p - k) // s + 1)
    return (b, out_channels, *ext)


def _conv(x: Tensor, p: ConvParams, depthwise: bool, op: str) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"{op}: expected a rank-5 input, got {x.shape}")
    w = p.weight
    if depthwise:
        if w.shape[1] != 1 or w.shape[0] != x.shape[1]:
            raise ShapeError(f"{op}: weight {w.shape} needs layout [C, 1, kt, kh, kw] with C = {x.shape[1]}")
    elif w.shape[1] != x.shape[1]:
        raise ShapeError(f"{op}: weight {w.shape} expects {w.shape[1]} input channels, input has {x.shape[1]}")
    conv_out_shape(x.shape, w.shape[0], p.kernel, p.stride, p.padding)

    xp = _pad(x.data, p.padding)
    if depthwise:
        y = kernels.dw_conv_forward(xp, w.data, p.stride)
    else:
        y = kernels.dense_conv_forward(xp, w.data, p.stride)
    if p.bias is not None:
        y += p.bias.data[None, :, None, None, None]

    def back(g):
        if depthwise:
            gxp, gw = kernels.dw_conv_backward(xp, w.data, p.stride, g)
        else:
            gxp, gw = kernels.dense_conv_backward(xp, w.data, p.stride, g)
        grads = [_unpad(gxp, p.padding), gw]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    parents = (x, w) if p.bias is None else (x, w, p.bias)
    return Tensor.from_op(y, parents, back, op)


def dwconv3d(x: Tensor, p: ConvParams) -> Tensor:
    """Depthwise 3D correlation: one [kt, kh, kw] filter per channel."""
    return _conv(x, p, depthwise=True, op="dwconv3d")


def dense_conv3d(x: Tensor, p: ConvParams) -> Tensor:
    return _conv(x, p, depthwise=False, op="dense_conv3d")


def pwconv3d(x: Tensor, p: ConvParams) -> Tensor:
    """1x1x1 channel mixing; shares the dense path so the two agree bitwise."""
    if p.kernel != (1, 1, 1):
        raise ShapeError(f"pwconv3d: kernel must be 1x1x1, got {p.kernel}")
    return _conv(x, p, depthwise=False, op="pwconv3d")


# ---------------------------------------------------------------------------
# batch norm


@dataclass
class BatchNormState:
    gamma: Tensor
    delta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            np.zeros(channels),
            np.ones(channels),
            momentum,
            epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm3d(x: Tensor, s: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over (B, T, H, W).

    Training mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate.
    """
    if x.ndim != 5 or x.shape[1] != s.channels:
        raise ShapeError(f"batchnorm3d: input {x.shape} does not match {s.channels} channels")
    axes = (0, 2, 3, 4)
    bshape = (1, -1, 1, 1, 1)
    n = x.size // x.shape[1]
    gamma, delta = s.gamma, s.delta

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = s.momentum
        s.running_mean[:] = (1 - m) * s.running_mean + m * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        s.running_var[:] = (1 - m) * s.running_var + m * unbiased
    else:
        mu, var = s.running_mean, s.running_var
    inv_std = 1.0 / np.sqrt(var + s.epsilon)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + delta.data.reshape(bshape)

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        ddelta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (inv_std / n).reshape(bshape) * (
                n * dxhat - dxhat.sum(axis=axes).reshape(bshape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, ddelta

    return Tensor.from_op(y, (x, gamma, delta), back, "batchnorm3d")


# ---------------------------------------------------------------------------
# pooling


def _pool_check(x: Tensor, window: Triple, stride: Triple, op: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{op}: expected a rank-5 input, got {x.shape}")
    if any(w > n for w, n in zip(window, x.shape[2:])):
        raise ShapeError(f"{op}: window {window} exceeds input extents {x.shape[2:]}")
    if min(window) < 1 or min(stride) < 1:
        raise ValueError(f"{op}: window and stride must be >= 1")


def maxpool3d(x: Tensor, window, stride=None) -> Tensor:
    """Windowed max; gradient goes to the lowest-flat-index maximum of each window."""
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    _pool_check(x, window, stride, "maxpool3d")
    y, arg = kernels.maxpool_forward(x.data, window, stride)
    shape = x.shape
    return Tensor.from_op(y, (x,), lambda g: (kernels.maxpool_backward(arg, g, shape, window, stride),), "maxpool3d")


def avgpool3d(x: Tensor, window, stride=None) -> Tensor:
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    _pool_check(x, window, stride, "avgpool3d")
    y = kernels.avgpool_forward(x.data, window, stride)
    shape = x.shape
    return Tensor.from_op(y, (x,), lambda g: (kernels.avgpool_backward(g, shape, window, stride),), "avgpool3d")


def multi_pool(x: Tensor, window, stride=None, mode: str = "maxavg") -> Tensor:
    """Max pooling and average pooling over the same window, stacked on channels.

    ``mode="max"`` keeps only the max branch.
    """
    if mode == "max":
        return maxpool3d(x, window, stride)
    if mode != "maxavg":
        raise ValueError(f"unknown multi-pool mode {mode!r}")
    return concat([maxpool3d(x, window, stride), avgpool3d(x, window, stride)], axis=1)


def pool_out_shape(in_shape, window: Triple, stride: Triple):
    b, c, *ext = in_shape
    if any(w > n for w, n in zip(window, ext)):
        raise ShapeError(f"pool window {window} exceeds input extents {tuple(ext)}")
    return (b, c, *((n - w) // s + 1 for n, w, s in zip(ext, window, stride)))


# ---------------------------------------------------------------------------
# layers


def init_uniform(rng: np.random.Generator, shape, fan_in: int, scale: float = 6.0) -> Tensor:
    """U(-b, b) with b = sqrt(scale / fan_in); the default 6 keeps rectified activations at unit variance."""
    bound = np.sqrt(scale / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv3d(Module):
    """kind: "dense", "depthwise" or "pointwise"."""

    def __init__(self, kind: str, in_channels: int, out_channels: int, kernel=1, stride=1, padding=0,
                 bias: bool = True, rng: np.random.Generator | None = None):
        if kind not in ("dense", "depthwise", "pointwise"):
            raise ValueError(f"unknown conv kind {kind!r}")
        kernel = _triple(kernel)
        if kind == "depthwise" and in_channels != out_channels:
            raise ValueError("depthwise conv needs in_channels == out_channels")
        if kind == "pointwise" and kernel != (1, 1, 1):
            raise ValueError("pointwise conv needs a 1x1x1 kernel")
        rng = rng if rng is not None else np.random.default_rng(0)
        cin = 1 if kind == "depthwise" else in_channels
        fan_in = cin * int(np.prod(kernel))
        self.kind = kind
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.p = ConvParams(
            init_uniform(rng, (out_channels, cin, *kernel), fan_in),
            Tensor(np.zeros(out_channels), requires_grad=True) if bias else None,
            stride,
            padding,
        )

    def own_parameters(self):
        yield "weight", self.p.weight
        if self.p.bias is not None:
            yield "bias", self.p.bias

    def forward(self, x):
        if self.kind == "depthwise":
            return dwconv3d(x, self.p)
        if self.kind == "pointwise":
            return pwconv3d(x, self.p)
        return dense_conv3d(x, self.p)

    def profile(self, in_shape, name):
        if in_shape[1] != self.in_channels:
            raise ShapeError(f"{name}: expects {self.in_channels} channels, got {in_shape[1]}")
        out = conv_out_shape(in_shape, self.out_channels, self.p.kernel, self.p.stride, self.p.padding)
        k = int(np.prod(self.p.kernel))
        per_out = k if self.kind == "depthwise" else self.in_channels * k
        macs = elems(out) * per_out
        flops = macs + (elems(out) if self.p.bias is not None else 0)
        return [ProfileRow(name, f"conv_{self.kind}", out, n_params(self.p.weight, self.p.bias), macs, flops)], out


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        self.state = BatchNormState.create(channels, momentum, epsilon)

    def own_parameters(self):
        yield "gamma", self.state.gamma
        yield "delta", self.state.delta

    def own_buffers(self):
        yield "running_mean", self.state.running_mean
        yield "running_var", self.state.running_var

    def forward(self, x):
        return batchnorm3d(x, self.state, self.training)

    def profile(self, in_shape, name):
        if in_shape[1] != self.state.channels:
            raise ShapeError(f"{name}: expects {self.state.channels} channels, got {in_shape[1]}")
        return [ProfileRow(name, "batchnorm", tuple(in_shape), 2 * self.state.channels, 0, elems(in_shape))], tuple(in_shape)


class Activation(Module):
    """SSN (default) or the plain rectifier."""

    def __init__(self, kind: str = "ssn", ssn: SsnParams = SsnParams()):
        if kind not in ("ssn", "relu"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.ssn = ssn

    def forward(self, x):
        return ssn_forward(x, self.ssn) if self.kind == "ssn" else relu(x)

    def profile(self, in_shape, name):
        return [ProfileRow(name, self.kind, tuple(in_shape), 0, 0, elems(in_shape))], tuple(in_shape)


class MaxPool3d(Module):
    def __init__(self, window, stride=None):
        self.window = _triple(window)
        self.stride = self.window if stride is None else _triple(stride)

    def forward(self, x):
        return maxpool3d(x, self.window, self.stride)

    def profile(self, in_shape, name):
        out = pool_out_shape(in_shape, self.window, self.stride)
        return [ProfileRow(name, "maxpool", out, 0, 0, elems(out))], out


class MultiPool(Module):
    def __init__(self, window, stride=None, mode: str = "maxavg"):
        self.window = _triple(window)
        self.stride = self.window if stride is None else _triple(stride)
        self.mode = mode

    def forward(self, x):
        return multi_pool(x, self.window, self.stride, self.mode)

    def profile(self, in_shape, name):
        out = pool_out_shape(in_shape, self.window, self.stride)
        rows = [ProfileRow(f"{name}.max", "maxpool", out, 0, 0, elems(out))]
        if self.mode == "maxavg":
            rows.append(ProfileRow(f"{name}.avg", "avgpool", out, 0, 0, elems(out)))
            out = (out[0], 2 * out[1], *out[2:])
        return rows, out


class FactorizedBlock(Module):
    """Temporal DW -> PW -> BN -> act -> spatial DW -> PW -> BN -> act, plus residual.

    The first pointwise conv carries the channel change; the residual path is a
    1x1x1 projection when channel counts differ and the identity otherwise.
    ``use_bn=False`` replaces both norms by the identity.
    """

    def __init__(self, in_channels: int, out_channels: int, activation: str = "ssn",
                 ssn: SsnParams = SsnParams(), use_bn: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.dw_temporal = Conv3d("depthwise", in_channels, in_channels, (3, 1, 1), padding=(1, 0, 0), bias=False, rng=rng)
        self.pw1 = Conv3d("pointwise", in_channels, out_channels, bias=False, rng=rng)
        self.bn1 = BatchNorm3d(out_channels) if use_bn else None
        self.act1 = Activation(activation, ssn)
        self.dw_spatial = Conv3d("depthwise", out_channels, out_channels, (1, 3, 3), padding=(0, 1, 1), bias=False, rng=rng)
        self.pw2 = Conv3d("pointwise", out_channels, out_channels, bias=False, rng=rng)
        self.bn2 = BatchNorm3d(out_channels) if use_bn else None
        self.act2 = Activation(activation, ssn)
        self.residual_projection = (
            Conv3d("pointwise", in_channels, out_channels, bias=False, rng=rng) if in_channels != out_channels else None
        )

    def stages(self) -> list[tuple[str, Module]]:
        seq = [
            ("dw_temporal", self.dw_temporal),
            ("pw1", self.pw1),
            ("bn1", self.bn1),
            ("act1", self.act1),
            ("dw_spatial", self.dw_spatial),
            ("pw2", self.pw2),
            ("bn2", self.bn2),
            ("act2", self.act2),
        ]
        return [(n, m) for n, m in seq if m is not None]

    def branch(self, x: Tensor) -> Tensor:
        for _, m in self.stages():
            x = m(x)
        return x

    def shortcut(self, x: Tensor) -> Tensor:
        return x if self.residual_projection is None else self.residual_projection(x)

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ShapeError(f"factorized block expects {self.in_channels} channels, got input {x.shape}")
        return self.branch(x) + self.shortcut(x)

    def profile(self, in_shape, name):
        rows, shape = [], tuple(in_shape)
        for stage, m in self.stages():
            r, shape = m.profile(shape, f"{name}.{stage}")
            rows += r
        if self.residual_projection is not None:
            r, proj = self.residual_projection.profile(tuple(in_shape), f"{name}.residual_projection")
            rows += r
        else:
            proj = tuple(in_shape)
        if proj != shape:
            raise ShapeError(f"{name}: residual shape {proj} != branch shape {shape}")
        rows.append(ProfileRow(f"{name}.residual_add", "add", shape, 0, 0, elems(shape)))
        return rows, shape


def factorized_block(x: Tensor, b: FactorizedBlock) -> Tensor:
    return b(x)

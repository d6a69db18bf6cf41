"""Temporal attention, spatial attention, and their joint composition.

Temporal attention squeezes H and W by mean and by max, runs both summaries
through the same two 1-D convolutions over time, takes the elementwise max of
the two sigmoid gates, and reweights the input with a residual.  Spatial
attention squeezes channels by mean and max, convolves the 2-channel map to a
single gate, and reweights the same way.  The joint module is
``SA(TA(x)) + x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import ConvParams, _triple, conv_out_shape, dense_conv3d, init_uniform
from .module import Module, ProfileRow, elems, n_params
from .tensor import ShapeError, Tensor, concat, maximum, relu, sigmoid

_PHI = {"relu": relu, "sigmoid": sigmoid, "identity": lambda t: t}


@dataclass
class TemporalAttentionParams:
    conv1: ConvParams
    conv2: ConvParams
    activation: str = "relu"

    def __post_init__(self):
        c_red, c = self.conv1.weight.shape[:2]
        if self.conv2.weight.shape[:2] != (c, c_red):
            raise ShapeError(f"conv2 {self.conv2.weight.shape} must map {c_red} channels back to {c}")
        if c % c_red:
            raise ShapeError(f"reduced width {c_red} must divide {c}")
        if self.activation not in _PHI:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def channels(self) -> int:
        return self.conv1.weight.shape[1]

    @classmethod
    def create(cls, channels: int, reduction: int = 2, kernel_t: int = 3, activation: str = "relu",
               rng: np.random.Generator | None = None) -> "TemporalAttentionParams":
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction {reduction} must be >= 1 and divide {channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        mid = channels // reduction
        pad = (kernel_t // 2, 0, 0)
        k = (kernel_t, 1, 1)
        conv1 = ConvParams(init_uniform(rng, (mid, channels, *k), channels * kernel_t),
                           Tensor(np.zeros(mid), requires_grad=True), 1, pad)
        conv2 = ConvParams(init_uniform(rng, (channels, mid, *k), mid * kernel_t),
                           Tensor(np.zeros(channels), requires_grad=True), 1, pad)
        return cls(conv1, conv2, activation)


@dataclass
class SpatialAttentionParams:
    conv: ConvParams

    def __post_init__(self):
        if self.conv.weight.shape[:2] != (1, 2):
            raise ShapeError(f"spatial attention conv must map 2 channels to 1, got {self.conv.weight.shape}")

    @classmethod
    def create(cls, kernel=(1, 7, 7), rng: np.random.Generator | None = None) -> "SpatialAttentionParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        kernel = _triple(kernel)
        pad = tuple(k // 2 for k in kernel)
        w = init_uniform(rng, (1, 2, *kernel), 2 * int(np.prod(kernel)))
        return cls(ConvParams(w, Tensor(np.zeros(1), requires_grad=True), 1, pad))


def _rank5(x: Tensor, op: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{op}: expected a rank-5 input (B, C, T, H, W), got {x.shape}")


def temporal_gate(x: Tensor, p: TemporalAttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Return (S_t, S_s, S), each shaped (B, C, T, 1, 1)."""
    _rank5(x, "temporal_attention")
    if x.shape[1] != p.channels:
        raise ShapeError(f"temporal_attention: input has {x.shape[1]} channels, params expect {p.channels}")
    phi = _PHI[p.activation]
    z_avg = x.mean(dims=(3, 4), keepdim=True)
    z_max = x.max(dims=(3, 4), keepdim=True)
    s_t = sigmoid(dense_conv3d(phi(dense_conv3d(z_avg, p.conv1)), p.conv2))
    s_s = sigmoid(dense_conv3d(phi(dense_conv3d(z_max, p.conv1)), p.conv2))
    return s_t, s_s, maximum(s_t, s_s)


def temporal_attention(x: Tensor, p: TemporalAttentionParams) -> Tensor:
    _, _, s = temporal_gate(x, p)
    return x * s + x


def spatial_gate(x: Tensor, p: SpatialAttentionParams) -> Tensor:
    """Sigmoid gate shaped (B, 1, T, H, W)."""
    _rank5(x, "spatial_attention")
    pooled = concat([x.mean(dims=1, keepdim=True), x.max(dims=1, keepdim=True)], axis=1)
    return sigmoid(dense_conv3d(pooled, p.conv))


def spatial_attention(x: Tensor, p: SpatialAttentionParams) -> Tensor:
    return spatial_gate(x, p) * x + x


def joint_attention(x: Tensor, tp: TemporalAttentionParams | None, sp: SpatialAttentionParams | None) -> Tensor:
    """SA(TA(x)) + x.  A missing half is skipped, for ablations."""
    y = x
    if tp is not None:
        y = temporal_attention(y, tp)
    if sp is not None:
        y = spatial_attention(y, sp)
    return y + x


class JointAttention(Module):
    def __init__(self, channels: int, temporal: bool = True, spatial: bool = True, reduction: int = 2,
                 temporal_kernel: int = 3, spatial_kernel=(1, 7, 7), activation: str = "relu",
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.tp = TemporalAttentionParams.create(channels, reduction, temporal_kernel, activation, rng) if temporal else None
        self.sp = SpatialAttentionParams.create(spatial_kernel, rng) if spatial else None

    def own_parameters(self):
        if self.tp is not None:
            yield "temporal.conv1.weight", self.tp.conv1.weight
            yield "temporal.conv1.bias", self.tp.conv1.bias
            yield "temporal.conv2.weight", self.tp.conv2.weight
            yield "temporal.conv2.bias", self.tp.conv2.bias
        if self.sp is not None:
            yield "spatial.conv.weight", self.sp.conv.weight
            yield "spatial.conv.bias", self.sp.conv.bias

    def forward(self, x):
        return joint_attention(x, self.tp, self.sp)

    def profile(self, in_shape, name):
        shape = tuple(in_shape)
        if shape[1] != self.channels:
            raise ShapeError(f"{name}: expects {self.channels} channels, got {shape[1]}")
        b, c, t, h, w = shape
        n = elems(shape)
        rows = []
        if self.tp is not None:
            tp = self.tp
            z = (b, c, t, 1, 1)
            pre = f"{name}.temporal"
            rows += [ProfileRow(f"{pre}.avg_pool", "reduce_mean", z, 0, 0, n),
                     ProfileRow(f"{pre}.max_pool", "reduce_max", z, 0, 0, n)]
            for branch, owns in (("avg", True), ("max", False)):
                mid = conv_out_shape(z, tp.conv1.weight.shape[0], tp.conv1.kernel, tp.conv1.stride, tp.conv1.padding)
                macs1 = elems(mid) * c * tp.conv1.kernel[0]
                rows.append(ProfileRow(f"{pre}.conv1[{branch}]", "conv_dense", mid,
                                       n_params(tp.conv1.weight, tp.conv1.bias) if owns else 0, macs1, macs1 + elems(mid)))
                rows.append(ProfileRow(f"{pre}.phi[{branch}]", tp.activation, mid, 0, 0, elems(mid)))
                macs2 = elems(z) * mid[1] * tp.conv2.kernel[0]
                rows.append(ProfileRow(f"{pre}.conv2[{branch}]", "conv_dense", z,
                                       n_params(tp.conv2.weight, tp.conv2.bias) if owns else 0, macs2, macs2 + elems(z)))
                rows.append(ProfileRow(f"{pre}.sigmoid[{branch}]", "sigmoid", z, 0, 0, elems(z)))
            rows += [ProfileRow(f"{pre}.gate_max", "maximum", z, 0, 0, elems(z)),
                     ProfileRow(f"{pre}.gate_mul", "mul", shape, 0, 0, n),
                     ProfileRow(f"{pre}.residual_add", "add", shape, 0, 0, n)]
        if self.sp is not None:
            sp = self.sp
            m = (b, 1, t, h, w)
            pre = f"{name}.spatial"
            out = conv_out_shape((b, 2, t, h, w), 1, sp.conv.kernel, sp.conv.stride, sp.conv.padding)
            macs = elems(out) * 2 * int(np.prod(sp.conv.kernel))
            rows += [ProfileRow(f"{pre}.channel_mean", "reduce_mean", m, 0, 0, n),
                     ProfileRow(f"{pre}.channel_max", "reduce_max", m, 0, 0, n),
                     ProfileRow(f"{pre}.conv", "conv_dense", out, n_params(sp.conv.weight, sp.conv.bias), macs, macs + elems(out)),
                     ProfileRow(f"{pre}.sigmoid", "sigmoid", out, 0, 0, elems(out)),
                     ProfileRow(f"{pre}.gate_mul", "mul", shape, 0, 0, n),
                     ProfileRow(f"{pre}.residual_add", "add", shape, 0, 0, n)]
        rows.append(ProfileRow(f"{name}.residual_add", "add", shape, 0, 0, n))
        return rows, shape

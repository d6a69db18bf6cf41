"""Finite-difference suites over every differentiable operation.

Each case builds small random tensors (extents <= 6), reduces the op output
to a scalar with a fixed random weighting, and compares tape gradients with
central differences.  SSN is the exception: its backward is a surrogate by
construction, so it is compared analytically against sigmoid(beta * (x - theta)).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import SpatialAttentionParams, TemporalAttentionParams, joint_attention, spatial_attention, temporal_attention
from .conv import BatchNormState, ConvParams, avgpool3d, batchnorm3d, dense_conv3d, dwconv3d, maxpool3d, multi_pool, pwconv3d
from .ssn import SsnParams, ssn_forward, surrogate
from .tensor import CheckReport, Tensor, check_gradients, concat, elementwise, linear, reduce, reshape, sigmoid
from .train import cross_entropy


@dataclass
class CaseResult:
    name: str
    report: CheckReport
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.report.passed


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _weighted(y: Tensor, r: np.ndarray) -> Tensor:
    return reduce("sum", y * Tensor(r))


def _scalarize(rng, f: Callable[[], Tensor]) -> Callable[[], Tensor]:
    # a fixed random weighting so no gradient is trivially uniform
    r = rng.standard_normal(f().shape)
    return lambda: _weighted(f(), r)


def _case_elementwise(rng):
    a, b, c = _t(rng, 3, 4), _t(rng, 1, 4), _t(rng, 3, 1)
    f = lambda: elementwise("mul", elementwise("sub", elementwise("add", a, b), c), a) * 0.5 + 1.0
    return _scalarize(rng, f), [a, b, c]


def _case_reduce(rng):
    x = _t(rng, 2, 3, 4)
    parts = lambda: [reduce("sum", x, dims=1), reduce("mean", x, dims=(0, 2), keepdim=True), reduce("max", x, dims=2), reduce("max", x)]
    f = lambda: concat([reshape(p, (-1,)) for p in parts()], axis=0)
    return _scalarize(rng, f), [x]


def _case_linear(rng):
    x, w, b = _t(rng, 4, 5), _t(rng, 5, 3), _t(rng, 3)
    return _scalarize(rng, lambda: linear(x, w, b)), [x, w, b]


def _case_dense_conv(rng):
    x = _t(rng, 2, 2, 5, 6, 5)
    p = ConvParams(_t(rng, 3, 2, 3, 2, 3), _t(rng, 3), (2, 1, 2), (1, 0, 1))
    return _scalarize(rng, lambda: dense_conv3d(x, p)), [x, p.weight, p.bias]


def _case_dwconv(rng):
    x = _t(rng, 2, 3, 5, 5, 4)
    p = ConvParams(_t(rng, 3, 1, 3, 3, 2), _t(rng, 3), (1, 2, 1), (1, 1, 0))
    return _scalarize(rng, lambda: dwconv3d(x, p)), [x, p.weight, p.bias]


def _case_pwconv(rng):
    x = _t(rng, 2, 3, 2, 3, 4)
    p = ConvParams(_t(rng, 4, 3, 1, 1, 1), _t(rng, 4))
    return _scalarize(rng, lambda: pwconv3d(x, p)), [x, p.weight, p.bias]


def _case_pool(rng):
    x = _t(rng, 2, 2, 4, 6, 6)
    f = lambda: concat(
        [reshape(maxpool3d(x, (2, 2, 2)), (2, -1)), reshape(avgpool3d(x, (1, 3, 2), (1, 2, 2)), (2, -1)),
         reshape(multi_pool(x, (2, 3, 3)), (2, -1))],
        axis=1,
    )
    return _scalarize(rng, f), [x]


def _case_batchnorm(rng):
    x = _t(rng, 3, 2, 2, 3, 3)
    s = BatchNormState.create(2)
    s.gamma.data[:] = rng.uniform(0.5, 1.5, 2)
    s.delta.data[:] = rng.standard_normal(2)
    s.running_mean[:] = rng.standard_normal(2)
    s.running_var[:] = rng.uniform(0.5, 2.0, 2)
    running = (s.running_mean.copy(), s.running_var.copy())

    def f():
        # eval first: the train call folds x into the running statistics
        s.running_mean[:], s.running_var[:] = running
        return concat([batchnorm3d(x, s, False), batchnorm3d(x, s, True)], axis=0)

    return _scalarize(rng, f), [x, s.gamma, s.delta]


def _attention_params(rng, c):
    tp = TemporalAttentionParams.create(c, reduction=2, rng=rng)
    sp = SpatialAttentionParams.create((1, 3, 3), rng=rng)
    for p in (tp.conv1, tp.conv2, sp.conv):
        p.bias.data[:] = rng.standard_normal(p.bias.shape) * 0.1
    return tp, sp


def _case_temporal(rng):
    x = _t(rng, 2, 4, 5, 3, 3)
    tp, _ = _attention_params(rng, 4)
    return _scalarize(rng, lambda: temporal_attention(x, tp)), [x, tp.conv1.weight, tp.conv1.bias, tp.conv2.weight, tp.conv2.bias]


def _case_spatial(rng):
    x = _t(rng, 2, 3, 2, 4, 5)
    _, sp = _attention_params(rng, 2)
    return _scalarize(rng, lambda: spatial_attention(x, sp)), [x, sp.conv.weight, sp.conv.bias]


def _case_joint(rng):
    x = _t(rng, 2, 4, 4, 3, 4)
    tp, sp = _attention_params(rng, 4)
    params = [x, tp.conv1.weight, tp.conv1.bias, tp.conv2.weight, tp.conv2.bias, sp.conv.weight, sp.conv.bias]
    return _scalarize(rng, lambda: joint_attention(x, tp, sp)), params


def _case_cross_entropy(rng):
    logits = _t(rng, 5, 4, scale=2.0)
    labels = rng.integers(0, 4, 5)
    return (lambda: cross_entropy(logits, labels)), [logits]


def _case_composite(rng):
    x = _t(rng, 2, 2, 4, 4, 4)
    conv = ConvParams(_t(rng, 4, 2, 3, 3, 3, scale=0.5), _t(rng, 4), 1, 1)
    tp, sp = _attention_params(rng, 4)
    w, b = _t(rng, 4, 3), _t(rng, 3)
    labels = np.array([0, 2])

    def f():
        y = maxpool3d(sigmoid(dense_conv3d(x, conv)), (1, 2, 2))
        y = joint_attention(y, tp, sp)
        return cross_entropy(linear(y.mean(dims=(2, 3, 4)), w, b), labels)

    params = [x, conv.weight, conv.bias, tp.conv1.weight, tp.conv2.weight, sp.conv.weight, w, b]
    return f, params


CASES: dict[str, Callable] = {
    "elementwise": _case_elementwise,
    "reduce": _case_reduce,
    "linear": _case_linear,
    "dense_conv3d": _case_dense_conv,
    "dwconv3d": _case_dwconv,
    "pwconv3d": _case_pwconv,
    "pooling": _case_pool,
    "batchnorm3d": _case_batchnorm,
    "temporal_attention": _case_temporal,
    "spatial_attention": _case_spatial,
    "joint_attention": _case_joint,
    "cross_entropy": _case_cross_entropy,
    "conv_attention_linear_loss": _case_composite,
}


def check_ssn(rng: np.random.Generator, p: SsnParams = SsnParams(), n: int = 64) -> CheckReport:
    """Tape gradient of SSN against upstream * sigmoid(beta * (x - theta)).

    The tape must reproduce the surrogate bit for bit; the closed form
    1 / (1 + exp(-z)) is a second formulation and only agrees to roundoff.
    """
    x = Tensor(rng.standard_normal(n) * 3, requires_grad=True)
    up = rng.standard_normal(n)
    _weighted(ssn_forward(x, p), up).backward()
    expected = up / (1.0 + np.exp(-p.beta * (x.data - p.theta)))
    err = float(np.max(np.abs(x.grad - expected) / np.maximum(np.abs(expected), 1e-300)))
    exact = bool(np.array_equal(x.grad, up * surrogate(x.data, p)))
    return CheckReport(err, exact and err < 1e-10, 0.0, 0.0, [err])


def run_suite(names=None, seed: int = 0, h: float = 1e-4, tol: float = 1e-4) -> list[CaseResult]:
    names = [*CASES, "ssn"] if names is None else list(names)
    out = []
    for i, name in enumerate(names):
        rng = np.random.default_rng((seed, i))
        t0 = time.perf_counter()
        if name == "ssn":
            report = check_ssn(rng)
        else:
            loss_fn, tensors = CASES[name](rng)
            report = check_gradients(loss_fn, tensors, h=h, tol=tol)
        out.append(CaseResult(name, report, time.perf_counter() - t0))
    return out


def format_results(results: list[CaseResult]) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'case':<{w}}  status  max_rel_error"]
    for r in results:
        lines.append(f"{r.name:<{w}}  {'PASS' if r.passed else 'FAIL':<6}  {r.report.max_rel_error:.3e}")
    return "\n".join(lines)

import math

import numpy as np
import pytest

import oracles
from cs3d.conv import (
    BatchNormState,
    ConvParams,
    FactorizedBlock,
    avgpool3d,
    batchnorm3d,
    dense_conv3d,
    dwconv3d,
    factorized_block,
    maxpool3d,
    multi_pool,
    pwconv3d,
)
from cs3d.ssn import SsnParams, ssn_forward
from cs3d.tensor import ShapeError, Tensor, check_gradients, reduce


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


def maxdiff(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# ---------------------------------------------------------------------------
# depthwise


def test_dw_identity_kernel(rng, backend):
    x = rng.standard_normal((2, 3, 4, 5, 5))
    p = ConvParams(T(np.ones((3, 1, 1, 1, 1))), T(np.zeros(3)))
    assert np.array_equal(dwconv3d(T(x), p).data, x)


def test_dw_box_filter_on_constant(backend):
    x = np.full((1, 2, 5, 3, 3), 1.5)
    p = ConvParams(T(np.ones((2, 1, 3, 1, 1))), None, padding=(1, 0, 0))
    y = dwconv3d(T(x), p).data
    assert y.shape == x.shape
    assert np.all(y[:, :, 1:-1] == 4.5)
    assert np.all(y[:, :, [0, -1]] == 3.0)


@pytest.mark.parametrize("stride,pad", [((1, 1, 1), (0, 0, 0)), ((1, 1, 1), (1, 1, 1)), ((2, 1, 2), (1, 0, 1))])
def test_dw_matches_loop_oracle(rng, backend, stride, pad):
    x = rng.standard_normal((1, 2, 5, 4, 4))
    w = rng.standard_normal((2, 1, 3, 2, 3))
    b = rng.standard_normal(2)
    ref, _ = oracles.conv3d(x, w, b, stride, pad, depthwise=True)
    y = dwconv3d(T(x), ConvParams(T(w), T(b), stride, pad)).data
    assert y.shape == ref.shape
    assert maxdiff(y, ref) < 1e-12


def test_dw_errors():
    with pytest.raises(ShapeError):
        dwconv3d(T(np.zeros((1, 3, 4, 4, 4))), ConvParams(T(np.zeros((2, 1, 1, 1, 1)))))
    with pytest.raises(ShapeError):
        dwconv3d(T(np.zeros((1, 2, 2, 4, 4))), ConvParams(T(np.zeros((2, 1, 3, 1, 1)))))
    dwconv3d(T(np.zeros((1, 2, 2, 4, 4))), ConvParams(T(np.zeros((2, 1, 3, 1, 1))), padding=(1, 0, 0)))


def test_conv_params_validated():
    with pytest.raises(ValueError):
        ConvParams(T(np.zeros((1, 1, 1, 1, 1))), stride=0)
    with pytest.raises(ValueError):
        ConvParams(T(np.zeros((1, 1, 1, 1, 1))), padding=-1)
    with pytest.raises(ShapeError):
        ConvParams(T(np.zeros((2, 1, 1, 1, 1))), T(np.zeros(3)))


# ---------------------------------------------------------------------------
# pointwise and dense


def test_pw_identity_and_channel_sum(rng, backend):
    x = rng.standard_normal((2, 3, 2, 3, 3))
    eye = np.eye(3).reshape(3, 3, 1, 1, 1)
    assert np.array_equal(pwconv3d(T(x), ConvParams(T(eye))).data, x)
    x2 = x[:, :2]
    y = pwconv3d(T(x2), ConvParams(T(np.ones((1, 2, 1, 1, 1))))).data
    assert np.array_equal(y[:, 0], x2[:, 0] + x2[:, 1])


def test_pw_matches_matmul_per_voxel(rng, backend):
    x = rng.standard_normal((2, 4, 3, 3, 2))
    w = rng.standard_normal((5, 4, 1, 1, 1))
    b = rng.standard_normal(5)
    y = pwconv3d(T(x), ConvParams(T(w), T(b))).data
    m = w[:, :, 0, 0, 0]
    for n in range(2):
        for t in range(3):
            for i in range(3):
                for j in range(2):
                    ref = [math.fsum(m[o, c] * x[n, c, t, i, j] for c in range(4)) + b[o] for o in range(5)]
                    assert maxdiff(y[n, :, t, i, j], ref) < 1e-12


def test_pw_rejects_wrong_kernel_and_channels():
    with pytest.raises(ShapeError):
        pwconv3d(T(np.zeros((1, 2, 3, 3, 3))), ConvParams(T(np.zeros((1, 2, 3, 1, 1))), padding=(1, 0, 0)))
    with pytest.raises(ShapeError):
        pwconv3d(T(np.zeros((1, 2, 3, 3, 3))), ConvParams(T(np.zeros((1, 3, 1, 1, 1)))))


def test_dense_k1_equals_pw_bitwise(rng, backend):
    x = rng.standard_normal((2, 3, 2, 4, 4))
    p = ConvParams(T(rng.standard_normal((4, 3, 1, 1, 1))), T(rng.standard_normal(4)))
    assert np.array_equal(dense_conv3d(T(x), p).data, pwconv3d(T(x), p).data)


def test_dense_impulse_response(rng, backend):
    x = np.zeros((1, 1, 5, 5, 5))
    x[0, 0, 2, 2, 2] = 1.0
    w = rng.standard_normal((2, 1, 3, 3, 3))
    y = dense_conv3d(T(x), ConvParams(T(w), padding=1)).data
    # correlation places the kernel reversed around the impulse
    assert np.array_equal(y[0, :, 1:4, 1:4, 1:4], w[:, 0, ::-1, ::-1, ::-1])
    y[0, :, 1:4, 1:4, 1:4] = 0
    assert not y.any()


@pytest.mark.parametrize("stride", [(1, 1, 1), (2, 2, 1)])
def test_dense_matches_loop_oracle(rng, backend, stride):
    x = rng.standard_normal((1, 2, 4, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    ref, _ = oracles.conv3d(x, w, b, stride, (1, 1, 1))
    assert maxdiff(dense_conv3d(T(x), ConvParams(T(w), T(b), stride, 1)).data, ref) < 1e-12


def test_block_diagonal_dense_equals_dw(rng, backend):
    c = 3
    x = rng.standard_normal((2, c, 4, 4, 4))
    wd = rng.standard_normal((c, 1, 3, 3, 3))
    dense = np.zeros((c, c, 3, 3, 3))
    for i in range(c):
        dense[i, i] = wd[i, 0]
    a = dwconv3d(T(x), ConvParams(T(wd), padding=1)).data
    b = dense_conv3d(T(x), ConvParams(T(dense), padding=1)).data
    assert maxdiff(a, b) < 1e-12


def test_backends_agree(rng):
    from cs3d import kernels

    if not kernels.HAVE_NUMBA:
        pytest.skip("numba missing")
    x = T(rng.standard_normal((2, 3, 5, 6, 6)), grad=True)
    p = ConvParams(T(rng.standard_normal((4, 3, 3, 3, 3)), grad=True), None, (1, 2, 2), 1)
    r = rng.standard_normal((2, 4, 5, 3, 3))
    out = {}
    old = kernels.get_backend()
    try:
        for name in ("numba", "numpy"):
            kernels.set_backend(name)
            x.grad = p.weight.grad = None
            y = dense_conv3d(x, p)
            reduce("sum", y * T(r)).backward()
            out[name] = (y.data, x.grad.copy(), p.weight.grad.copy())
    finally:
        kernels.set_backend(old)
    for a, b in zip(out["numba"], out["numpy"]):
        assert maxdiff(a, b) < 1e-12


@pytest.mark.parametrize("op", ["dense", "dw", "pw"])
def test_conv_gradients(rng, backend, op):
    x = T(rng.standard_normal((2, 2, 4, 4, 3)), grad=True)
    shape = {"dense": (3, 2, 3, 2, 2), "dw": (2, 1, 2, 3, 2), "pw": (3, 2, 1, 1, 1)}[op]
    p = ConvParams(T(rng.standard_normal(shape), True), T(rng.standard_normal(shape[0]), True),
                   (1, 2, 1) if op != "pw" else 1, (1, 1, 0) if op != "pw" else 0)
    f = {"dense": dense_conv3d, "dw": dwconv3d, "pw": pwconv3d}[op]
    r = rng.standard_normal(f(x, p).shape)
    report = check_gradients(lambda: reduce("sum", f(x, p) * T(r)), [x, p.weight, p.bias])
    assert report.passed, report


# ---------------------------------------------------------------------------
# batch norm


def test_bn_train_normalizes(rng):
    x = rng.standard_normal((3, 2, 4, 3, 3)) * 5 + 2
    s = BatchNormState.create(2, epsilon=1e-12)
    y = batchnorm3d(T(x), s, True).data
    for c in range(2):
        assert abs(y[:, c].mean()) < 1e-10
        assert abs(y[:, c].var() - 1) < 1e-10


def test_bn_eval_identity_stats(rng):
    x = rng.standard_normal((2, 3, 2, 2, 2))
    s = BatchNormState.create(3, epsilon=1e-10)
    y = batchnorm3d(T(x), s, False).data
    assert maxdiff(y, x) < 1e-9


def test_bn_momentum_hand_calculation():
    # channel 0 holds values 1..4, channel 1 holds 10 everywhere
    x = np.zeros((2, 2, 1, 1, 2))
    x[:, 0] = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 1, 1, 2)
    x[:, 1] = 10.0
    s = BatchNormState.create(2, momentum=0.1)
    batchnorm3d(T(x), s, True)
    # mean 2.5, unbiased variance 5/3
    assert np.allclose(s.running_mean, [0.9 * 0 + 0.1 * 2.5, 0.1 * 10.0], rtol=0, atol=1e-15)
    assert np.allclose(s.running_var, [0.9 + 0.1 * (5 / 3), 0.9], rtol=0, atol=1e-15)


def test_bn_gamma_delta_and_errors(rng):
    x = rng.standard_normal((2, 2, 2, 2, 2))
    s = BatchNormState.create(2)
    s.gamma.data[:] = [2.0, 3.0]
    s.delta.data[:] = [-1.0, 0.5]
    s.running_mean[:] = [0.5, -0.5]
    s.running_var[:] = [4.0, 0.25]
    y = batchnorm3d(T(x), s, False).data
    ref0 = 2.0 * (x[:, 0] - 0.5) / math.sqrt(4.0 + 1e-5) - 1.0
    assert maxdiff(y[:, 0], ref0) < 1e-12
    with pytest.raises(ShapeError):
        batchnorm3d(T(np.zeros((1, 3, 1, 1, 1))), s, False)
    with pytest.raises(ValueError):
        BatchNormState.create(2, epsilon=0.0)


# ---------------------------------------------------------------------------
# pooling


def test_pool_identity_and_constant(rng, backend):
    x = rng.standard_normal((1, 2, 3, 4, 4))
    assert np.array_equal(maxpool3d(T(x), 1).data, x)
    c = np.full((1, 2, 4, 4, 4), -2.5)
    assert np.all(maxpool3d(T(c), 2).data == -2.5)
    assert np.all(avgpool3d(T(c), 2).data == -2.5)


@pytest.mark.parametrize("window,stride", [((2, 2, 2), (2, 2, 2)), ((1, 3, 2), (1, 2, 2)), ((2, 2, 2), (1, 1, 1))])
def test_pool_matches_loop_oracle(rng, backend, window, stride):
    x = rng.standard_normal((2, 2, 4, 6, 5))
    assert maxdiff(maxpool3d(T(x), window, stride).data, oracles.pool3d(x, window, stride, "max")) < 1e-12
    assert maxdiff(avgpool3d(T(x), window, stride).data, oracles.pool3d(x, window, stride, "avg")) < 1e-12


def test_maxpool_ties_lowest_index(backend):
    x = T(np.ones((1, 1, 2, 2, 2)), grad=True)
    reduce("sum", maxpool3d(x, 2)).backward()
    expect = np.zeros((1, 1, 2, 2, 2))
    expect[0, 0, 0, 0, 0] = 1
    assert np.array_equal(x.grad, expect)


def test_pool_window_too_big():
    with pytest.raises(ShapeError):
        maxpool3d(T(np.zeros((1, 1, 2, 2, 2))), 3)


def test_multi_pool(rng, backend):
    c = np.full((1, 3, 2, 4, 4), 0.75)
    y = multi_pool(T(c), (1, 2, 2)).data
    assert y.shape == (1, 6, 2, 2, 2) and np.all(y == 0.75)
    x = rng.standard_normal((2, 3, 2, 4, 6))
    y = multi_pool(T(x), (1, 2, 2)).data
    assert maxdiff(y[:, :3], oracles.pool3d(x, (1, 2, 2), (1, 2, 2), "max")) < 1e-12
    assert maxdiff(y[:, 3:], oracles.pool3d(x, (1, 2, 2), (1, 2, 2), "avg")) < 1e-12
    assert multi_pool(T(x), (1, 2, 2), mode="max").shape[1] == 3


# ---------------------------------------------------------------------------
# factorized block


def _zero_block(cin, cout):
    b = FactorizedBlock(cin, cout, rng=np.random.default_rng(0))
    for name, p in b.named_parameters():
        if "weight" in name:
            p.data[:] = 0
    return b


def test_block_zero_branch_is_residual(rng):
    b = _zero_block(3, 3)
    x = rng.standard_normal((2, 3, 4, 5, 5))
    assert np.array_equal(b(T(x)).data, x)


@pytest.mark.parametrize("shape", [(1, 2, 3, 3, 3), (2, 4, 5, 6, 4), (3, 1, 1, 1, 1)])
def test_block_preserves_shape(shape):
    b = FactorizedBlock(shape[1], shape[1])
    assert factorized_block(T(np.ones(shape)), b).shape == shape


def test_block_channel_change_shape():
    b = FactorizedBlock(2, 5)
    assert b(T(np.ones((1, 2, 3, 4, 4)))).shape == (1, 5, 3, 4, 4)
    assert b.residual_projection is not None


def _reference_block(x, b, training):
    """Eight sub-operations written out one after another."""
    def bn(y, mod):
        s = mod.state
        if training:
            mu = y.mean(axis=(0, 2, 3, 4), keepdims=True)
            var = y.var(axis=(0, 2, 3, 4), keepdims=True)
        else:
            mu = s.running_mean.reshape(1, -1, 1, 1, 1)
            var = s.running_var.reshape(1, -1, 1, 1, 1)
        g = s.gamma.data.reshape(1, -1, 1, 1, 1)
        d = s.delta.data.reshape(1, -1, 1, 1, 1)
        return g * (y - mu) / np.sqrt(var + s.epsilon) + d

    act = lambda y: np.where(y > b.act1.ssn.theta, y, 0.0)
    y, _ = oracles.conv3d(x, b.dw_temporal.p.weight.data, None, (1, 1, 1), (1, 0, 0), depthwise=True)
    y, _ = oracles.conv3d(y, b.pw1.p.weight.data, None, (1, 1, 1), (0, 0, 0))
    y = act(bn(y, b.bn1))
    y, _ = oracles.conv3d(y, b.dw_spatial.p.weight.data, None, (1, 1, 1), (0, 1, 1), depthwise=True)
    y, _ = oracles.conv3d(y, b.pw2.p.weight.data, None, (1, 1, 1), (0, 0, 0))
    y = act(bn(y, b.bn2))
    if b.residual_projection is not None:
        sc, _ = oracles.conv3d(x, b.residual_projection.p.weight.data, None, (1, 1, 1), (0, 0, 0))
    else:
        sc = x
    return y + sc


@pytest.mark.parametrize("cin,cout,training", [(3, 3, False), (2, 4, False), (3, 3, True)])
def test_block_matches_composition_oracle(rng, backend, cin, cout, training):
    b = FactorizedBlock(cin, cout, ssn=SsnParams(0.1, 2.0), rng=np.random.default_rng(5))
    for bn in (b.bn1, b.bn2):
        bn.state.gamma.data[:] = rng.uniform(0.5, 1.5, cout)
        bn.state.delta.data[:] = rng.standard_normal(cout) * 0.1
        bn.state.running_mean[:] = rng.standard_normal(cout) * 0.1
        bn.state.running_var[:] = rng.uniform(0.5, 2, cout)
    b.train(training)
    x = rng.standard_normal((2, cin, 3, 4, 4))
    ref = _reference_block(x, b, training)
    assert maxdiff(b(T(x)).data, ref) < 1e-12


def test_factorization_identity(rng, backend):
    c = 3
    b = FactorizedBlock(c, c, ssn=SsnParams(-math.inf, 2.0))
    b.pw1.p.weight.data[:] = np.eye(c).reshape(c, c, 1, 1, 1)
    b.pw2.p.weight.data[:] = np.eye(c).reshape(c, c, 1, 1, 1)
    for bn in (b.bn1, b.bn2):
        bn.state.epsilon = 1e-300  # sqrt(1 + 1e-300) == 1 exactly
    b.eval()
    x = T(rng.standard_normal((2, c, 5, 4, 4)))
    two = dwconv3d(dwconv3d(x, b.dw_temporal.p), b.dw_spatial.p)
    assert maxdiff(b.branch(x).data, two.data) < 1e-12
    assert maxdiff(b(x).data, two.data + x.data) < 1e-12


def test_block_gradients(rng):
    b = FactorizedBlock(2, 3, ssn=SsnParams(-math.inf, 2.0), rng=np.random.default_rng(1))
    x = T(rng.standard_normal((2, 2, 3, 3, 3)), grad=True)
    r = rng.standard_normal((2, 3, 3, 3, 3))
    params = [x] + b.parameters()

    def loss():
        # fresh running stats each call so repeated forwards are identical
        for bn in (b.bn1, b.bn2):
            bn.state.running_mean[:] = 0
            bn.state.running_var[:] = 1
        return reduce("sum", b(x) * T(r))

    report = check_gradients(loss, params)
    assert report.passed, report


def test_ssn_between_stages_uses_threshold(rng):
    b = FactorizedBlock(2, 2, ssn=SsnParams(0.5, 2.0))
    b.eval()
    y = b.act1(T(np.array([0.4, 0.6]).reshape(1, 2, 1, 1, 1))).data
    assert y.ravel().tolist() == [0.0, 0.6]
    assert np.array_equal(ssn_forward(T([0.5]), SsnParams(0.5)).data, [0.0])

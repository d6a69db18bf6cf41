import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from cs3d.serialize import FormatError, read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor
from cs3d.ssn import SsnParams, ssn_forward
from cs3d.tensor import (
    ShapeError,
    Tensor,
    backward,
    check_gradients,
    concat,
    elementwise,
    finite_diff_check,
    graph_of,
    linear,
    maximum,
    no_grad,
    reduce,
    relu,
    sigmoid,
)


def test_add_componentwise():
    out = elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert out.data.tolist() == [4.0, 6.0]


def test_mul_by_one_is_bitwise_identity(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert np.array_equal(elementwise("mul", x, 1.0).data, x.data)
    assert np.array_equal((x * 1.0).data, x.data)


def test_broadcast_mul_matches_loop(rng):
    a, b = rng.standard_normal((2, 1)), rng.standard_normal((2, 3))
    out = elementwise("mul", Tensor(a), Tensor(b)).data
    assert out.shape == (2, 3)
    for i in range(2):
        for j in range(3):
            assert out[i, j] == a[i, 0] * b[i, j]


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        elementwise("add", Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


def test_tensor_invariants():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1, 1)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0)))
    t = Tensor([1, 2, 3])
    assert t.data.dtype == np.float64


def test_mean_of_constant():
    assert reduce("mean", Tensor(np.full((2, 3, 4), 2.5))).item() == 2.5


def test_max_routes_gradient_to_spike():
    x = np.zeros((1, 1, 1, 3, 4))
    x[0, 0, 0, 2, 1] = 7.0
    t = Tensor(x, requires_grad=True)
    out = reduce("max", t, dims=(3, 4))
    assert out.item() == 7.0
    backward(reduce("sum", out))
    expect = np.zeros_like(x)
    expect[0, 0, 0, 2, 1] = 1.0
    assert np.array_equal(t.grad, expect)


def test_max_ties_go_to_lowest_flat_index():
    t = Tensor(np.array([[1.0, 3.0, 3.0], [3.0, 0.0, 3.0]]), requires_grad=True)
    backward(reduce("max", t))
    assert t.grad.tolist() == [[0, 1, 0], [0, 0, 0]]


def test_mean_over_hw_matches_double_loop(rng):
    x = rng.standard_normal((1, 2, 3, 4, 5))
    out = reduce("mean", Tensor(x), dims=(3, 4)).data
    for c in range(2):
        for t in range(3):
            ref = sum(x[0, c, t, i, j] for i in range(4) for j in range(5)) / 20
            assert abs(out[0, c, t] - ref) < 1e-12


def test_reduce_invalid_axis():
    with pytest.raises(ShapeError):
        reduce("sum", Tensor(np.zeros((2, 2))), dims=2)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=6), elements=st.floats(-1e3, 1e3)))
def test_sum_and_max_match_numpy(x):
    assert reduce("sum", Tensor(x)).item() == pytest.approx(float(np.sum(x)), rel=1e-12, abs=1e-9)
    assert reduce("max", Tensor(x)).item() == float(np.max(x))


def test_linear_identity_and_scalar():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x.data)
    assert linear(Tensor([[2.0]]), Tensor([[3.0]]), Tensor([1.0])).data.tolist() == [[7.0]]


def test_linear_matches_triple_loop(rng):
    x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
    ref, _ = oracles.linear(x, w, b)
    assert np.max(np.abs(linear(Tensor(x), Tensor(w), Tensor(b)).data - ref)) < 1e-12


def test_linear_shape_errors():
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))), Tensor(np.zeros(3)))


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    backward(reduce("sum", x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_2x(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    backward(reduce("sum", x * x))
    assert np.allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_fanout_accumulates(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    backward(reduce("sum", sigmoid(x)))
    g1 = x.grad.copy()
    x.grad = None
    backward(reduce("sum", x * x))
    g2 = x.grad.copy()
    x.grad = None
    backward(reduce("sum", sigmoid(x)) + reduce("sum", x * x))
    assert np.allclose(x.grad, g1 + g2, rtol=0, atol=1e-15)


def test_graph_is_topological_and_visits_once(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = x * x
    loss = reduce("sum", y + y)
    order = graph_of(loss)
    assert len(order) == len({id(n) for n in order})
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            if id(parent) in pos:
                assert pos[id(parent)] < pos[id(node)]


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_determinism(rng):
    x0 = rng.standard_normal((3, 4))
    grads = []
    for _ in range(2):
        x = Tensor(x0.copy(), requires_grad=True)
        backward(reduce("sum", sigmoid(x) * x))
        grads.append(x.grad)
    assert np.array_equal(grads[0], grads[1])


def test_maximum_and_concat_gradients(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    r = rng.standard_normal((4, 3))
    report = check_gradients(lambda: reduce("sum", concat([maximum(a, b), a * b], axis=0) * Tensor(r)), [a, b])
    assert report.passed


def test_maximum_ties_to_first():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([1.0, 3.0]), requires_grad=True)
    backward(reduce("sum", maximum(a, b)))
    assert a.grad.tolist() == [1.0, 0.0] and b.grad.tolist() == [0.0, 1.0]


# ---------------------------------------------------------------------------
# finite-difference checker


def test_fd_sum_is_exact(rng):
    x = Tensor(rng.standard_normal((3, 3)))
    assert finite_diff_check(lambda t: reduce("sum", t), x).max_rel_error < 1e-10


def test_fd_sum_of_squares_tight(rng):
    x = Tensor(rng.standard_normal((4, 2)))
    report = finite_diff_check(lambda t: reduce("sum", t * t), x, h=1e-5, tol=1e-6)
    assert report.passed, report


def test_fd_nan_is_failure():
    x = Tensor(np.array([1.0, 2.0]))
    report = finite_diff_check(lambda t: reduce("sum", t * float("nan")), x)
    assert not report.passed


def test_fd_ssn_far_from_threshold_agrees(rng):
    # sigmoid(beta * (x - theta)) is within 2e-9 of the true 0 / 1 slope once |x - theta| >= 20 / beta
    p = SsnParams(0.0, 10.0)
    x0 = rng.uniform(2.0, 5.0, 8) * rng.choice([-1.0, 1.0], 8)
    report = finite_diff_check(lambda t: reduce("sum", ssn_forward(t, p)), Tensor(x0))
    assert report.passed, report


def test_fd_ssn_near_threshold_reports_mismatch():
    p = SsnParams(0.0, 2.0)
    report = finite_diff_check(lambda t: reduce("sum", ssn_forward(t, p)), Tensor(np.array([0.3, -0.2, 0.6])))
    assert not report.passed


def test_check_restores_values(rng):
    x0 = rng.standard_normal(5)
    x = Tensor(x0.copy())
    finite_diff_check(lambda t: reduce("sum", relu(t) * t), x)
    assert np.array_equal(x.data, x0) and not x.requires_grad


# ---------------------------------------------------------------------------
# tensor container


def test_tensor_container_roundtrip(rng):
    a = rng.standard_normal((2, 3, 1, 4))
    assert np.array_equal(tensor_from_bytes(tensor_to_bytes(a)), a)
    buf = io.BytesIO()
    write_tensor(buf, a)
    raw = buf.getvalue()
    assert raw[:8] == b"CS3DTNSR"
    assert len(raw) == 8 + 4 + 4 + 8 * 4 + 8 * a.size
    buf.seek(0)
    assert np.array_equal(read_tensor(buf), a)


def test_tensor_container_rejects_garbage():
    with pytest.raises(FormatError):
        tensor_from_bytes(b"NOTATENSOR" + bytes(20))
    with pytest.raises(FormatError):
        tensor_from_bytes(tensor_to_bytes(np.ones(4))[:-3])

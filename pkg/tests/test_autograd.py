import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambadsse import autograd as ag
from mambadsse.autograd import NonFiniteError, ShapeError, Tensor

OP_TOL = 1e-5


def leaf(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()


# each entry: (name, build inputs from rng, forward on tensors)
def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


OPS = {
    "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: a + b),
    "sub": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: a - b),
    "mul": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3))], lambda a, b: a * b),
    "div": (lambda r: [r.normal(size=(2, 3)), _pos(r, (2, 3))], lambda a, b: a / b),
    "scalar_div": (lambda r: [r.normal(size=(3, 2))], lambda a: ag.scalar_div(a, 1.7)),
    "matmul": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))], lambda a, b: a @ b),
    "exp": (lambda r: [r.normal(size=(2, 3))], ag.exp),
    "softplus": (lambda r: [r.normal(scale=3, size=(2, 3))], ag.softplus),
    "tanh": (lambda r: [r.normal(size=(2, 3))], ag.tanh),
    "sigmoid": (lambda r: [r.normal(scale=2, size=(2, 3))], ag.sigmoid),
    "square": (lambda r: [r.normal(size=(2, 3))], ag.square),
    "sqrt": (lambda r: [_pos(r, (2, 3))], ag.sqrt),
    "reduce_sum": (lambda r: [r.normal(size=(2, 3, 2))], lambda a: ag.reduce_sum(a, axis=1)),
    "reduce_mean": (lambda r: [r.normal(size=(2, 3, 2))], lambda a: ag.reduce_mean(a, axis=(0, 2), keepdims=True)),
    "concat": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))], lambda a, b: ag.concat([a, b], axis=-1)),
    "stack": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: ag.stack([a, b], axis=1)),
    "slice": (lambda r: [r.normal(size=(4, 5))], lambda a: a[1:3, ::2]),
    "fancy_slice": (lambda r: [r.normal(size=(4, 3))], lambda a: a[np.array([0, 2, 2])]),
    "broadcast": (lambda r: [r.normal(size=(3,))], lambda a: ag.broadcast(a, (2, 3))),
    "reshape": (lambda r: [r.normal(size=(2, 6))], lambda a: a.reshape(3, 4)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, fwd = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        ins = [leaf(x) for x in build(rng)]
        w = rng.normal(size=fwd(*ins).shape)
        worst = max(worst, ag.gradcheck(lambda: weighted(fwd(*ins), w), ins, eps=1e-6))
    assert worst < OP_TOL, f"{name}: relative error {worst:.2e}"


def test_softplus_at_zero():
    x = leaf(0.0)
    y = ag.softplus(x)
    assert y.item() == pytest.approx(math.log(2.0), abs=1e-7)
    g = ag.backward(y)
    assert g[x] == pytest.approx(0.5)


def test_softplus_large_arguments_stay_finite():
    y = ag.softplus(Tensor([-800.0, 800.0]))
    assert y.data[0] == pytest.approx(0.0, abs=1e-300)
    assert y.data[1] == pytest.approx(800.0)


def test_exp_values():
    np.testing.assert_allclose(ag.exp(Tensor([0.0, 1.0])).data, [1.0, 2.7182818], atol=1e-7)


def test_identity_matmul():
    m = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(m)).data, m)


def test_square_power_rule():
    x = leaf(3.0)
    g = ag.backward(ag.square(x))
    assert g[x] == pytest.approx(6.0)


def test_two_consumers_accumulate():
    # loss = x*y + x*z  =>  d/dx = y + z
    x, y, z = leaf(2.0), leaf(5.0), leaf(-1.5)
    loss = x * y + x * z
    g = ag.backward(loss)
    assert g[x] == pytest.approx(3.5)
    assert g[y] == pytest.approx(2.0)
    assert g[z] == pytest.approx(2.0)


def test_reused_intermediate_accumulates():
    x = leaf([1.0, 2.0])
    h = ag.exp(x)
    loss = (h * h).sum() + h.sum()
    g = ag.backward(loss)
    e = np.exp([1.0, 2.0])
    np.testing.assert_allclose(g[x], 2 * e * e + e)


def test_unreachable_parameter_gets_zero():
    x, unused = leaf([1.0, 2.0]), leaf([[3.0]])
    g = ag.backward(ag.square(x).sum(), params=[x, unused])
    np.testing.assert_array_equal(g[unused], np.zeros((1, 1)))
    np.testing.assert_array_equal(unused.grad, np.zeros((1, 1)))


def test_non_scalar_loss_rejected():
    with pytest.raises(ShapeError):
        ag.backward(leaf([1.0, 2.0]) * 2.0)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
        leaf(np.zeros((2, 3))) + leaf(np.zeros(4))
    with pytest.raises(ShapeError, match="matmul"):
        leaf(np.zeros((2, 3))) @ leaf(np.zeros((2, 3)))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError, match="exp"):
        ag.exp(leaf([1000.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ag.no_grad():
        y = ag.exp(x)
    assert not y.requires_grad and y._parents == ()


def test_backward_is_bit_identical_on_rerun():
    rng = np.random.default_rng(3)
    xs, w = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))

    def run():
        x, W = leaf(xs), leaf(w)
        loss = ag.tanh(x @ W).sum() + ag.softplus(x).mean()
        g = ag.backward(loss)
        return loss.item(), g[x].tobytes(), g[W].tobytes()

    assert run() == run()


def test_grad_has_parameter_shape():
    x = leaf(np.ones((2, 3)))
    ag.backward((x * 2.0).sum())
    assert x.grad.shape == x.shape


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_sigmoid_matches_closed_form(vals):
    x = np.array(vals)
    np.testing.assert_allclose(ag.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-12)

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ddc import autodiff as ad
from ddc.autodiff import Tensor


def leaf(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


# --- forward examples -------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.forward_primitive("matmul", a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_exp_zero_and_sum():
    assert ad.forward_primitive("exp", Tensor(0.0)).item() == 1.0
    assert ad.forward_primitive("sum", Tensor([[1.0, 2.0], [3.0, 4.0]])).item() == 10.0


def test_unknown_primitive():
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.forward_primitive("tanh", Tensor(1.0))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_default_precision_is_float32_and_scalars_do_not_promote():
    x = Tensor([1.0, 2.0])
    assert x.dtype == np.float32
    assert (x * 2.0 + 1.0).dtype == np.float32
    with ad.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64


# --- backward examples ------------------------------------------------------

def test_square_grad():
    x = leaf(3.0)
    ad.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_log_grad():
    x = leaf(2.0)
    ad.backward(ad.log(x))
    assert x.grad == pytest.approx(0.5)


def test_product_grads():
    x, y = leaf(2.0), leaf(5.0)
    ad.backward(x * y)
    assert (x.grad, y.grad) == (pytest.approx(5.0), pytest.approx(2.0))


def test_backward_accumulates_without_reset():
    x = leaf(3.0)
    ad.backward(x * x)
    ad.backward(x * x)
    assert x.grad == pytest.approx(12.0)
    x.zero_grad()
    assert x.grad == 0.0


def test_backward_rejects_non_scalar_and_untracked():
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(leaf([1.0, 2.0]) * 2.0)
    with pytest.raises(ValueError, match="untracked"):
        ad.backward(Tensor(1.0) * 2.0)


def test_shared_subexpression_visited_once():
    x = leaf(2.0)
    y = x * x
    z = y + y  # y reused: dz/dx = 2 * 2x
    tape = ad.Tape.from_root(z)
    assert len(tape) == 2
    ad.backward(z)
    assert x.grad == pytest.approx(8.0)


def test_tape_topological_order():
    x = leaf(np.ones((2, 2)))
    out = (ad.exp(x @ x) * x).sum()
    tape = ad.Tape.from_root(out)
    pos = {id(t): i for i, (t, _) in enumerate(tape.nodes)}
    for t, node in tape.nodes:
        for parent in node.inputs:
            if parent.node is not None:
                assert pos[id(parent)] < pos[id(t)]


def test_max_tie_goes_to_lowest_index():
    x = leaf([1.0, 3.0, 3.0, 2.0])
    ad.backward(x.max())
    np.testing.assert_array_equal(x.grad, [0, 1, 0, 0])


def test_maxpool_routes_gradient_to_max():
    x = leaf(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ad.maxpool2x2(x)
    assert out.item() == 4.0
    ad.backward(out.sum())
    np.testing.assert_array_equal(x.grad[0, 0], [[0, 0], [0, 1]])


def test_debug_mode_flags_non_finite():
    with ad.debug_mode():
        with pytest.raises(ad.NonFiniteError):
            ad.log(Tensor([0.0, 1.0], dtype=np.float64))
    ad.log(Tensor([1.0], dtype=np.float64))


def test_no_grad_records_nothing():
    x = leaf(1.0)
    with ad.no_grad():
        y = x * 2.0
    assert y.node is None


def test_guided_relu_masks_negative_incoming_gradient():
    x = leaf([1.0, 2.0, -1.0])
    w = Tensor([1.0, -1.0, 1.0], dtype=np.float64)
    with ad.guided_relu():
        ad.backward((ad.relu(x) * w).sum())
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])


# --- finite differences -----------------------------------------------------

def test_finite_diff_examples():
    assert ad.finite_diff_check(lambda x: (x * x).sum(), np.array([3.0]), 1e-5) < 1e-8
    assert ad.finite_diff_check(lambda x: Tensor(5.0, dtype=np.float64), np.array([1.0, 2.0])) == 0.0
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda x: x.sum(), np.array([1.0]), step=0.0)


def _positive(shape):
    return arrays(np.float64, shape, elements=st.floats(0.5, 2.0))


def _any(shape):
    return arrays(np.float64, shape, elements=st.floats(-2.0, 2.0))


# (function of one tensor, input strategy); kinks avoided by the input ranges
UNARY = {
    "add": (lambda x: (x + x * 0.5 + 1.0).sum(), _any((3, 2))),
    "sub": (lambda x: (x - x.T.T * 0.25 - 1.0).sum(), _any((3, 2))),
    "mul": (lambda x: (x * x).sum(), _any((3, 2))),
    "div": (lambda x: (1.0 / x).sum(), _positive((3, 2))),
    "neg": (lambda x: (-(x * x)).sum(), _any((4,))),
    "power": (lambda x: (x ** 1.5).sum(), _positive((4,))),
    "exp": (lambda x: ad.exp(x).sum(), _any((4,))),
    "log": (lambda x: ad.log(x).sum(), _positive((4,))),
    "sqrt": (lambda x: ad.sqrt(x).sum(), _positive((4,))),
    "relu": (lambda x: (ad.relu(x - 0.0) * x).sum(), _positive((4,))),
    "matmul": (lambda x: (x @ x.T).sum(), _any((3, 2))),
    "sum_axis": (lambda x: (x.sum(axis=0) * x.sum(axis=0)).sum(), _any((3, 2))),
    "mean": (lambda x: (x.mean(axis=1) ** 2.0).sum(), _any((3, 2))),
    "reshape_transpose": (lambda x: (x.reshape(2, 3).T * x.reshape(3, 2)).sum(), _any((6,))),
    "softmax": (lambda x: (ad.softmax(x) * Tensor(np.arange(3.0))).sum(), _any((2, 3))),
    "conv2d": (lambda x: (ad.conv2d(x, Tensor(np.linspace(-1, 1, 18).reshape(2, 1, 3, 3))) ** 2.0).sum(),
               _any((1, 1, 4, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(data=st.data())
def test_primitive_gradients_match_finite_differences(name, data):
    fn, strategy = UNARY[name]
    point = data.draw(strategy)
    assert ad.finite_diff_check(fn, point) < 1e-6


@given(st.permutations(range(64)), st.floats(0.1, 4.0))
def test_maxpool_gradient_matches_finite_differences(order, scale):
    # distinct grid values keep every window's winner clear of the runner-up
    x = scale * (np.asarray(order, dtype=np.float64) / 32.0 - 1.0).reshape(2, 2, 4, 4)
    assert ad.finite_diff_check(lambda t: (ad.maxpool2x2(t) ** 2.0).sum(), x) < 1e-6


@given(st.permutations(range(12)), st.floats(0.1, 4.0))
def test_max_gradient_matches_finite_differences(order, scale):
    # distinct grid values: no near-ties within the finite-difference step
    x = scale * (np.asarray(order, dtype=np.float64) / 6.0 - 1.0).reshape(3, 4)
    assert ad.finite_diff_check(lambda t: (t.max(axis=1) ** 2.0).sum(), x) < 1e-6


@given(st.floats(0.2, 3.0))
def test_chain_rule_on_scalar_chain(v):
    # d/dx exp(log(x)^2) = exp(log(x)^2) * 2 log(x) / x
    x = leaf(v)
    ad.backward(ad.exp(ad.log(x) ** 2.0))
    expected = np.exp(np.log(v) ** 2) * 2 * np.log(v) / v
    assert x.grad == pytest.approx(expected, rel=1e-10)


def test_replay_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(5, 4)).astype(np.float32)
    w = rng.normal(size=(4, 3)).astype(np.float32)

    def run():
        x = Tensor(data, requires_grad=True)
        out = (ad.softmax(ad.relu(x @ Tensor(w))) ** 2.0).sum()
        ad.backward(out)
        return out.data.tobytes(), x.grad.tobytes()

    assert run() == run()

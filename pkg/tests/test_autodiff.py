import numpy as np
import pytest

from src.autodiff.gradcheck import check_gradients
from src.autodiff.tensor import (LOG_CLAMP, ComputationGraph, Tensor, abs_, concat, conv2d, exp, gradient_reverse,
                                 is_grad_enabled, layernorm, log, matmul, maximum, mean, minimum, no_grad, relu,
                                 reshape, sigmoid, slice_, softmax, sum_, transpose)
from src.errors import ShapeError

SEEDS = range(20)


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


# === Forward values ===

def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_rows_are_distributions(rng):
    probs = softmax(Tensor(rng.normal(scale=30.0, size=(5, 7))), axis=-1).data
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_relu_at_negative_input_has_zero_value_and_gradient():
    x = Tensor([-1.5], requires_grad=True)
    y = relu(x).sum()
    y.backward()
    assert y.item() == 0.0
    assert x.grad[0] == 0.0


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert float(x.grad) == pytest.approx(6.0)


def test_gradients_accumulate_across_uses():
    x = Tensor(2.0, requires_grad=True)
    (x + x * x).backward()
    assert float(x.grad) == pytest.approx(5.0)
    (x * 3.0).backward()
    assert float(x.grad) == pytest.approx(8.0)


def test_log_is_clamped():
    x = Tensor([0.0, 1.0], requires_grad=True)
    y = log(x)
    assert y.data[0] == pytest.approx(np.log(LOG_CLAMP))
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


# === Gradient reversal ===

def test_gradient_reverse_forward_is_bit_identical(rng):
    v = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(gradient_reverse(Tensor(v)).data, v)


def test_gradient_reverse_flips_upstream_gradient():
    x = Tensor([0.3, -0.7], requires_grad=True)
    y = gradient_reverse(x)
    y.backward(np.array([1.0, -2.0]))
    np.testing.assert_array_equal(x.grad, [-1.0, 2.0])


def test_gradient_reverse_is_negated_identity(rng):
    w = rng.normal(size=5)
    a = Tensor(rng.normal(size=5), requires_grad=True)
    b = Tensor(a.data.copy(), requires_grad=True)
    (gradient_reverse(a) * w).sum().backward()
    (b * w).sum().backward()
    np.testing.assert_array_equal(a.grad, -b.grad)


def test_gradient_reverse_chain_rule_on_dot_product(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    w = Tensor(rng.normal(size=4), requires_grad=True)
    (gradient_reverse(x) * w).sum().backward()
    np.testing.assert_allclose(w.grad, x.data)
    np.testing.assert_allclose(x.grad, -w.data)


# === Grad mode and graph ===

def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with no_grad():
        assert not is_grad_enabled()
        y = (x * 2.0).sum()
    assert is_grad_enabled()
    assert not y.requires_grad
    assert y.parents == ()


def test_graph_visits_each_node_once(rng):
    x = leaf(rng, 3)
    h = x * x
    y = (h + h).sum()
    graph = ComputationGraph(y)
    order = graph.topological_order()
    assert len(order) == len({t.id for t in order}) == 4
    assert [r.op for r in graph.records] == ["mul", "add", "sum"]


def test_non_scalar_backward_needs_seed(rng):
    with pytest.raises(ShapeError):
        (leaf(rng, 3) * 2.0).backward()


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.zeros(3)) + Tensor(np.zeros(4))
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_slice_with_ellipsis_and_repeated_indices(rng):
    x = leaf(rng, 2, 3)
    (slice_(x, (..., 1)).sum() + slice_(x, (np.array([0, 0]), np.array([2, 2]))).sum()).backward()
    expected = np.zeros((2, 3))
    expected[:, 1] = 1.0
    expected[0, 2] = 2.0
    np.testing.assert_array_equal(x.grad, expected)


# === Finite-difference checks of every op ===

UNARY_OPS = {
    "exp": exp,
    "log": lambda x: log(x * x + 0.5),
    "relu": relu,
    "sigmoid": sigmoid,
    "abs": abs_,
    "power": lambda x: (x * x + 1.0) ** 1.5,
    "neg": lambda x: -x,
    "softmax": lambda x: softmax(x, axis=-1) * np.arange(1.0, 5.0),
    "mean": lambda x: mean(x, axis=0) * 3.0,
    "sum_keepdims": lambda x: sum_(x, axis=1, keepdims=True) * x,
    "reshape": lambda x: reshape(x, (4, 3)) * np.arange(12.0).reshape(4, 3),
    "transpose": lambda x: transpose(x, (1, 0)) * np.arange(12.0).reshape(4, 3),
    "slice": lambda x: x[1:, ::2] * 2.0,
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_op_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 4)
    if name in ("relu", "abs"):
        # keep away from the kink
        x.data = np.where(np.abs(x.data) < 0.05, 0.3, x.data)
    report = check_gradients(lambda t: (UNARY_OPS[name](t) * 1.3).sum(), [x])
    assert report.passed, report.flagged


BINARY_OPS = {
    "add_broadcast": lambda a, b: a + b[0],
    "sub": lambda a, b: a - b,
    "mul_broadcast": lambda a, b: a * b[:, :1],
    "div": lambda a, b: a / (b * b + 0.5),
    "maximum": maximum,
    "minimum": minimum,
    "matmul": lambda a, b: matmul(a, transpose(b, (1, 0))),
    "concat": lambda a, b: concat([a, b], axis=0) * np.arange(24.0).reshape(6, 4),
}


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_op_gradients(name, seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    if name in ("maximum", "minimum"):
        b.data = np.where(np.abs(a.data - b.data) < 0.05, a.data + 0.3, b.data)
    report = check_gradients(lambda x, y: BINARY_OPS[name](x, y).sum(), [a, b])
    assert report.passed, report.flagged


@pytest.mark.parametrize("seed", SEEDS)
def test_batched_matmul_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    weights = rng.normal(size=(2, 3, 5))
    report = check_gradients(lambda x, y: (matmul(x, y) * weights).sum(), [a, b])
    assert report.passed, report.flagged


@pytest.mark.parametrize("seed", SEEDS)
def test_layernorm_gradients(seed):
    rng = np.random.default_rng(seed)
    x, gamma, beta = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
    weights = rng.normal(size=(2, 3, 6))
    report = check_gradients(lambda a, g, b: (layernorm(a, g, b) * weights).sum(), [x, gamma, beta])
    assert report.passed, report.flagged


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
@pytest.mark.parametrize("seed", range(5))
def test_conv2d_gradients(stride, padding, seed):
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng, 2, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    out_shape = conv2d(Tensor(x.data), Tensor(w.data), Tensor(b.data), stride=stride, padding=padding).shape
    weights = rng.normal(size=out_shape)
    report = check_gradients(lambda a, k, c: (conv2d(a, k, c, stride=stride, padding=padding) * weights).sum(),
                             [x, w, b])
    assert report.passed, report.flagged


def test_conv2d_matches_direct_correlation(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    w = rng.normal(size=(1, 1, 3, 3))
    out = conv2d(Tensor(x), Tensor(w)).data[0, 0]
    direct = np.array([[np.sum(x[0, 0, i:i + 3, j:j + 3] * w[0, 0]) for j in range(2)] for i in range(2)])
    np.testing.assert_allclose(out, direct)

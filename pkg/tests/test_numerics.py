import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kwcap import numerics as nx
from kwcap.numerics import (
    ContractError,
    DimensionError,
    NonFiniteError,
    ParameterError,
    Tensor,
    backward,
    grad_check,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_matmul_examples():
    a = nx.constant([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((a @ nx.constant(np.eye(2))).data, a.data)
    assert np.array_equal((a @ nx.constant(np.zeros((2, 2)))).data, np.zeros((2, 2)))
    assert np.array_equal((a @ nx.constant([[5.0], [6.0]])).data, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(nx.constant(np.ones((2, 3))), nx.constant(np.ones((2, 3))))


def test_softmax_examples():
    assert np.allclose(nx.softmax(nx.constant([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(nx.softmax(nx.constant([1000.0, 1000.0])).data, [0.5, 0.5])
    expected = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    out = nx.softmax(nx.constant([1.0, 2.0, 3.0])).data
    assert np.allclose(out, [0.09003, 0.24473, 0.66524], atol=5e-6)
    assert np.allclose(out, expected, rtol=1e-14)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-300, 300)))
def test_softmax_rows_are_distributions(x):
    y = nx.softmax(nx.constant(x), axis=-1).data
    assert (y >= 0).all()
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_masked_softmax_zeroes_exactly():
    y = nx.softmax(nx.constant([1.0, 5.0, 2.0]), mask=np.array([True, False, True])).data
    assert y[1] == 0.0
    assert y.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ContractError):
        nx.softmax(nx.constant([1.0, 2.0]), mask=np.array([False, False]))


def test_relu_sigmoid_examples():
    assert np.array_equal(nx.relu(nx.constant([-1.0, 2.0, 0.0])).data, [0.0, 2.0, 0.0])
    assert nx.sigmoid(nx.constant(0.0)).item() == 0.5
    assert nx.sigmoid(nx.constant(np.log(3.0))).item() == pytest.approx(0.75, abs=1e-15)


def test_relu_subgradient_at_zero_is_zero():
    x = nx.parameter([0.0, 1.0])
    (g,) = backward(nx.sum(nx.relu(x)), [x])
    assert np.array_equal(g, [0.0, 1.0])


def test_layer_norm_examples():
    one, zero = nx.constant(np.ones(4)), nx.constant(np.zeros(4))
    assert np.allclose(nx.layer_norm(nx.constant(np.full(4, 3.0)), one, zero).data, 0.0)
    out = nx.layer_norm(nx.constant([1.0, -1.0]), nx.constant([1.0, 1.0]), nx.constant([0.0, 0.0]), eps=1e-12)
    assert np.allclose(out.data, [1.0, -1.0], atol=1e-10)
    bias = nx.constant([0.1, 0.2, 0.3, 0.4])
    out = nx.layer_norm(nx.constant([3.0, -2.0, 7.0, 0.5]), zero, bias)
    assert np.array_equal(out.data, bias.data)


def test_dropout_modes():
    rng = np.random.default_rng(0)
    x = nx.constant(np.arange(1.0, 9.0))
    assert nx.dropout(x, 0.0, True, rng) is x
    assert nx.dropout(x, 0.5, False, rng) is x
    with pytest.raises(ParameterError):
        nx.dropout(x, 1.0, True, rng)


def test_dropout_matches_recorded_mask():
    x = nx.constant(np.arange(1.0, 11.0))
    out = nx.dropout(x, 0.5, True, np.random.default_rng(7)).data
    keep = np.random.default_rng(7).random(10) >= 0.5
    assert np.array_equal(out[~keep], np.zeros((~keep).sum()))
    assert np.array_equal(out[keep], 2.0 * x.data[keep])


def test_dropout_preserves_expectation():
    x = np.array([1.0, -2.0, 3.5])
    rng = np.random.default_rng(123)
    total = np.zeros(3)
    trials = 100_000
    batch = nx.constant(np.tile(x, (trials, 1)))
    total = nx.dropout(batch, 0.5, True, rng).data.mean(axis=0)
    assert np.allclose(total, x, rtol=0.01)


def test_cross_entropy_examples():
    assert nx.cross_entropy_from_logits(nx.constant(np.zeros(4)), 1).item() == pytest.approx(np.log(4))
    assert nx.cross_entropy_from_logits(nx.constant([50.0, 0, 0]), 0).item() == pytest.approx(0.0, abs=1e-20)
    assert nx.cross_entropy_from_logits(nx.constant([1.0, 2.0, 3.0]), 2).item() == pytest.approx(
        0.40761, abs=5e-6
    )
    with pytest.raises(IndexError):
        nx.cross_entropy_from_logits(nx.constant([1.0, 2.0]), 2)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = nx.parameter([1.0, 2.0, 3.0])
    (g,) = backward(nx.cross_entropy_from_logits(z, 0), [z])
    p = np.exp(z.data) / np.exp(z.data).sum()
    assert np.allclose(g, p - np.array([1.0, 0, 0]), rtol=1e-14)


def test_backward_simple_cases():
    x = nx.parameter(3.0)
    assert backward(x * x, [x])[0] == 6.0
    x = nx.parameter(0.0)
    assert backward(nx.sigmoid(x), [x])[0] == 0.25


def test_backward_requires_scalar():
    x = nx.parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        backward(x * 2.0, [x])


def test_unreachable_gradient_is_exact_zero():
    x, y = nx.parameter([1.0, 2.0]), nx.parameter([3.0])
    gx, gy = backward(nx.sum(x * x), [x, y])
    assert np.array_equal(gy, [0.0])
    assert np.array_equal(gx, [2.0, 4.0])


def test_backward_is_repeatable():
    rng = np.random.default_rng(1)
    w = nx.parameter(rng.standard_normal((4, 3)))
    loss = nx.sum(nx.sigmoid(nx.constant(rng.standard_normal((2, 4))) @ w))
    first = backward(loss, [w])[0]
    assert np.array_equal(first, backward(loss, [w])[0])


def test_non_finite_values_are_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        nx.log(nx.constant([0.0]))


def test_no_grad_leaves_no_graph():
    w = nx.parameter([1.0])
    with nx.no_grad():
        y = w * 2.0
    assert not y.requires_grad
    assert np.array_equal(backward(nx.sum(y), [w])[0], [0.0])


# ---------------------------------------------------------------------------
# gradient checks


def _mlp_loss(w1, b1, w2, b2, w3, b3, x, target):
    h = nx.relu(x @ w1 + b1)
    h = nx.sigmoid(h @ w2 + b2)
    logits = h @ w3 + b3
    return nx.mean(nx.cross_entropy_from_logits(logits, target))


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = nx.constant(rng.standard_normal((6, 4)))
    target = rng.integers(0, 3, size=6)
    shapes = [(4, 7), (7,), (7, 5), (5,), (5, 3), (3,)]
    points = [rng.standard_normal(s) for s in shapes]
    err = grad_check(lambda *p: _mlp_loss(*p, x, target), points)
    assert err < 1e-4


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 4))
    err = grad_check(lambda w: nx.sum(nx.constant(a) @ w), [rng.standard_normal((4, 2))])
    assert err < 1e-9


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(3)
    err = grad_check(
        lambda z: nx.mean(nx.cross_entropy_from_logits(z, np.array([0, 2, 1]))), [rng.standard_normal((3, 4))]
    )
    assert err < 1e-4


def _away_from_kink(rng, shape, step=1e-5):
    x = rng.standard_normal(shape)
    close = np.abs(x) < 10 * step
    x[close] = 0.5
    return x


OPS = {
    "matmul": (lambda a, b: nx.sum(nx.sigmoid(a @ b)), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: nx.sum(nx.sigmoid(a @ b)), [(2, 3, 4), (2, 4, 2)]),
    "add_broadcast": (lambda a, b: nx.sum(nx.sigmoid(a + b)), [(3, 4), (4,)]),
    "mul_broadcast": (lambda a, b: nx.sum(nx.sigmoid(a * b)), [(3, 4), (1, 4)]),
    "divide": (lambda a, b: nx.sum(a / (nx.sigmoid(b) + 0.5)), [(3,), (3,)]),
    "softmax": (lambda a: nx.sum(nx.softmax(a, axis=-1) * nx.constant(np.arange(12.0).reshape(3, 4))), [(3, 4)]),
    "masked_softmax": (
        lambda a: nx.sum(nx.softmax(a, -1, np.tril(np.ones((4, 4), bool))) * nx.constant(np.arange(16.0).reshape(4, 4))),
        [(4, 4)],
    ),
    "log_softmax": (lambda a: nx.sum(nx.log_softmax(a) * nx.constant(np.arange(5.0))), [(5,)]),
    "sigmoid": (lambda a: nx.sum(nx.sigmoid(a) * nx.sigmoid(a)), [(5,)]),
    "log_clip": (lambda a: nx.sum(nx.log(nx.clip(nx.sigmoid(a), 1e-7, 1 - 1e-7))), [(5,)]),
    "layer_norm": (
        lambda x, g, b: nx.sum(nx.sigmoid(nx.layer_norm(x, g, b))),
        [(3, 6), (6,), (6,)],
    ),
    "reshape_transpose": (
        lambda a: nx.sum(nx.sigmoid(nx.transpose(nx.reshape(a, (2, 3, 2)), (1, 0, 2))) * nx.constant(np.arange(12.0).reshape(3, 2, 2))),
        [(3, 4)],
    ),
    "concat": (lambda a, b: nx.sum(nx.sigmoid(nx.concat([a, b], axis=0)) * nx.constant(np.arange(10.0).reshape(5, 2))), [(2, 2), (3, 2)]),
    "getitem": (lambda a: nx.sum(nx.sigmoid(a[np.array([0, 2, 2])])), [(4, 3)]),
    "max_along": (lambda a: nx.sum(nx.max_along(a, axis=1) * nx.constant([1.0, 2.0, 3.0])), [(3, 5)]),
    "mean": (lambda a: nx.sum(nx.mean(nx.sigmoid(a), axis=0) * nx.constant(np.arange(4.0))), [(3, 4)]),
    "cross_entropy": (lambda a: nx.mean(nx.cross_entropy_from_logits(a, np.array([1, 0, 3]))), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_matches_finite_differences(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(5):
        err = grad_check(lambda *p: nx.reshape(fn(*p), ()), [rng.standard_normal(s) for s in shapes])
        assert err < 1e-4, name


def test_relu_grad_check_away_from_kink():
    rng = np.random.default_rng(11)
    for _ in range(100):
        x = _away_from_kink(rng, (6,))
        assert grad_check(lambda a: nx.sum(nx.relu(a) * nx.relu(a)), [x]) < 1e-4


def test_dropout_gradient_with_fixed_mask():
    x0 = np.random.default_rng(0).standard_normal(8)
    err = grad_check(lambda a: nx.sum(nx.sigmoid(nx.dropout(a, 0.5, True, np.random.default_rng(4)))), [x0])
    assert err < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    w = nx.parameter(rng.standard_normal((3, 3)))
    x = nx.constant(rng.standard_normal((2, 3)))
    l1 = nx.sum(nx.sigmoid(x @ w))
    l2 = nx.mean(nx.cross_entropy_from_logits(x @ w, np.array([0, 2])))
    (g1,), (g2,) = backward(l1, [w]), backward(l2, [w])
    (g,) = backward(l1 * a + l2 * b, [w])
    assert np.allclose(g, a * g1 + b * g2, atol=1e-10, rtol=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_random_points_grad_check(seed):
    rng = np.random.default_rng(seed)
    fn = lambda x, g, b: nx.mean(  # noqa: E731
        nx.cross_entropy_from_logits(nx.layer_norm(nx.softmax(x) @ nx.constant(np.eye(4) * 3), g, b), np.array([1, 3]))
    )
    assert grad_check(fn, [rng.standard_normal((2, 4)), rng.standard_normal(4), rng.standard_normal(4)]) < 1e-4

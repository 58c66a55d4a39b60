import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finealign import diffcore as dc
from finealign.diffcore import GradCheckError, ShapeError, Tensor


def param(shape, seed=0, lo=-1.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


# -- forward values ----------------------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(dc.matmul(a, np.eye(2)).data, [[1, 2], [3, 4]])


def test_mean_over_axis():
    assert dc.mean(Tensor([2.0, 4.0, 6.0]), axis=0).data == 4.0


def test_layer_norm_matches_hand_formula():
    x = np.array([1.0, 2.0, 3.0])
    out = dc.layer_norm(Tensor(x), np.ones(3), np.zeros(3)).data
    mu = sum(x) / 3
    var = sum((v - mu) ** 2 for v in x) / 3
    expected = [(v - mu) / math.sqrt(var + 1e-5) for v in x]
    assert np.allclose(out, expected, atol=1e-12)
    assert abs(out.mean()) < 1e-6
    # the 1e-5 epsilon shrinks the variance to var / (var + eps); without it the variance is 1
    bare = dc.layer_norm(Tensor(x), np.ones(3), np.zeros(3), eps=0.0).data
    assert abs(bare.mean()) < 1e-6 and abs(bare.var() - 1.0) < 1e-6


def test_softmax_rowwise_examples():
    assert np.allclose(dc.softmax_rowwise(np.zeros((1, 3))).data, 1 / 3)
    e = math.e
    assert np.allclose(dc.softmax_rowwise([[1.0, 0.0]]).data, [[e / (e + 1), 1 / (e + 1)]], atol=1e-4)
    big = dc.softmax_rowwise([[1000.0, 0.0]]).data
    assert np.all(np.isfinite(big)) and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300


def test_softmax_rowwise_rejects_non_2d():
    with pytest.raises(ShapeError):
        dc.softmax_rowwise(np.zeros(3))


def test_l2_normalize_examples():
    assert np.allclose(dc.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])
    unit = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(dc.l2_normalize(Tensor(unit)).data, unit)
    zero = dc.l2_normalize(Tensor([0.0, 0.0]))
    assert np.array_equal(zero.data, [0.0, 0.0])
    assert zero.meta["any_zero_norm"]


def test_gelu_reference_points():
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    c = math.sqrt(2 / math.pi)
    ref = [0.5 * v * (1 + math.tanh(c * (v + 0.044715 * v**3))) for v in x]
    assert np.allclose(dc.gelu(Tensor(x)).data, ref, atol=1e-14)


def test_embedding_lookup_and_concat():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    out = dc.embedding(table, np.array([[2, 0]]))
    assert out.shape == (1, 2, 3)
    assert np.array_equal(out.data[0, 0], [6, 7, 8])
    cat = dc.concat([Tensor(np.ones((1, 2))), Tensor(np.zeros((2, 2)))], axis=0)
    assert cat.shape == (3, 2)


def test_shape_errors_name_the_kernel():
    with pytest.raises(ShapeError, match="matmul"):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        dc.add(np.ones((2, 3)), np.ones((4, 3)))


def test_forward_kernels_stay_finite_on_extreme_inputs():
    x = Tensor(np.array([[-800.0, 0.0, 800.0]]))
    for out in (dc.softmax(x, axis=1), dc.log_softmax(x, axis=1), dc.gelu(x), dc.tanh(x)):
        assert np.all(np.isfinite(out.data))


# -- backward ----------------------------------------------------------------------------


def test_quadratic_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    dc.tsum(x * x).backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_fan_out_accumulates():
    x = Tensor(1.5, requires_grad=True)
    (x + x).backward()
    assert x.grad == 2.0


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        dc.backward(x * 2.0)


def test_tape_is_topological_and_visits_each_node_once():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    z = dc.tsum(y + y * x)
    tape = dc.build_tape(z)
    position = {id(t): i for i, t in enumerate(tape)}
    assert len(position) == len(tape)
    for node in tape:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]


def test_backward_is_bitwise_deterministic():
    def grads():
        w = param((4, 5), seed=3)
        x = Tensor(np.random.default_rng(4).normal(size=(3, 4)))
        loss = dc.tsum(dc.log_softmax(dc.matmul(x, w), axis=1))
        loss.backward()
        return w.grad.tobytes()

    assert grads() == grads()


UNARY = {
    "exp": dc.exp,
    "tanh": dc.tanh,
    "gelu": dc.gelu,
    "neg": dc.neg,
    "square": lambda a: dc.power(a, 2.0),
    "softmax": lambda a: dc.softmax(a, axis=1),
    "softmax_rowwise": dc.softmax_rowwise,
    "log_softmax": lambda a: dc.log_softmax(a, axis=0),
    "l2_normalize": lambda a: dc.l2_normalize(a, axis=1),
    "mean_axis": lambda a: dc.mean(a, axis=1),
    "sum_axis": lambda a: dc.tsum(a, axis=0, keepdims=True),
    "transpose": dc.transpose,
    "reshape": lambda a: dc.reshape(a, (12,)),
    "slice": lambda a: a[1:, ::2],
    "fancy_index": lambda a: a[np.array([0, 2, 0])],
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_kernel_gradients(name):
    a = param((3, 4), seed=sorted(UNARY).index(name))
    weights = np.random.default_rng(1).normal(size=UNARY[name](a).shape)
    err = dc.finite_difference_check(lambda: dc.tsum(UNARY[name](a) * weights), [a])
    assert err < 1e-4


def test_positive_domain_kernel_gradients():
    a = param((3, 4), seed=2, lo=0.2, hi=1.5)
    w = np.random.default_rng(2).normal(size=(3, 4))
    for fn in (dc.log, dc.sqrt, lambda t: dc.power(t, -1.5)):
        assert dc.finite_difference_check(lambda: dc.tsum(fn(a) * w), [a]) < 1e-4


def test_binary_kernel_gradients_with_broadcasting():
    a = param((3, 4), seed=5)
    b = param((4,), seed=6, lo=0.5, hi=1.5)
    for fn in (dc.add, dc.sub, dc.mul, dc.div):
        err = dc.finite_difference_check(lambda: dc.tsum(dc.tanh(fn(a, b))), [a, b])
        assert err < 1e-4, fn.__name__


def test_matmul_layer_norm_embedding_concat_gradients():
    a, b = param((2, 3, 4), seed=7), param((4, 5), seed=8)
    g, beta = param((5,), seed=9), param((5,), seed=10)
    table = param((6, 3), seed=11)
    ids = np.array([[1, 4], [4, 0]])

    def loss():
        x = dc.layer_norm(dc.matmul(a, b), g, beta)
        e = dc.embedding(table, ids)
        joined = dc.concat([dc.reshape(x, (2, 15)), dc.reshape(e, (2, 6))], axis=1)
        return dc.tsum(dc.gelu(joined) * np.linspace(-1, 1, 21))

    assert dc.finite_difference_check(loss, [a, b, g, beta, table]) < 1e-4


def test_clip_gradient_is_zero_where_clamped():
    x = Tensor([-2.0, 0.5, 3.0], requires_grad=True)
    dc.tsum(dc.clip(x, -1.0, 1.0)).backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


# -- finite-difference checker -----------------------------------------------------------------


def test_checker_on_square():
    x = Tensor(3.0, requires_grad=True)
    assert dc.finite_difference_check(lambda: x * x, [x]) < 1e-6
    x.zero_grad()
    (x * x).backward()
    assert x.grad == 6.0


def test_checker_softmax_sum_has_zero_gradient():
    x = param((1, 5), seed=12)
    dc.tsum(dc.softmax_rowwise(x)).backward()
    assert np.max(np.abs(x.grad)) < 1e-12
    assert dc.finite_difference_check(lambda: dc.tsum(dc.softmax_rowwise(x)), [x]) < 1e-6


def test_checker_detects_a_wrong_backward_rule():
    x = param((4,), seed=13)

    def wrong_square(a):
        return Tensor._result(a.data**2, (a,), lambda g: (g * 3.0 * a.data,), "bad_square")

    assert dc.finite_difference_check(lambda: dc.tsum(wrong_square(x)), [x]) > 1e-2


def test_checker_rejects_nondeterministic_loss():
    x = param((2,), seed=14)
    rng = np.random.default_rng(0)
    with pytest.raises(GradCheckError):
        dc.finite_difference_check(lambda: dc.tsum(x * rng.normal()), [x])


def test_checker_rejects_bad_step():
    x = param((2,))
    with pytest.raises(ValueError):
        dc.finite_difference_check(lambda: dc.tsum(x), [x], h=1e-1)


# -- properties ------------------------------------------------------------------------------


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(finite, min_size=3, max_size=3), min_size=1, max_size=4), finite)
def test_softmax_rows_sum_to_one_and_shift_invariant(rows, shift):
    x = np.array(rows)
    s = dc.softmax_rowwise(x).data
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(dc.softmax_rowwise(x + shift).data, s, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=6), st.floats(0.01, 100))
def test_l2_normalize_idempotent_and_scale_invariant(values, c):
    x = np.array(values)
    if np.linalg.norm(x) < 1e-6:
        return
    n = dc.l2_normalize(Tensor(x)).data
    assert np.allclose(dc.l2_normalize(Tensor(n)).data, n, atol=1e-9)
    assert np.allclose(dc.l2_normalize(Tensor(c * x)).data, n, atol=1e-9)

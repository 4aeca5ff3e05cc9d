import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hatsr import tensor as T
from hatsr.errors import DimensionError, NonFiniteError, UsageError
from hatsr.tensor import Tape, Tensor


def _probe(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def test_default_dtype_is_float32_and_precision_switch():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_backward_simple_chain():
    with T.precision("float64"):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            y = T.sum_all(T.mul(x, x))
        T.backward(y, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(UsageError):
        T.backward(y, tape)


def test_no_record_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.add(x, x)
    assert y._node is None
    with Tape() as tape, T.no_record():
        z = T.add(x, x)
    assert z._node is None and not tape.nodes


def test_tape_cleared_after_backward_unless_retained():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = T.sum_all(T.mul(x, x))
    T.backward(y, tape, retain=True)
    assert tape.nodes
    T.backward(y, tape)
    assert not tape.nodes
    np.testing.assert_allclose(x.grad, 4 * np.ones(2))  # two accumulated passes


def test_gradient_accumulates_over_reuse():
    with T.precision("float64"):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            y = T.sum_all(T.add(T.mul(x, x), T.scale(x, 3.0)))
        T.backward(y, tape)
        assert x.grad[0] == pytest.approx(7.0)


def test_non_finite_output_is_rejected():
    with pytest.raises(NonFiniteError):
        T.mul(Tensor([np.inf]), Tensor([0.0]))


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_broadcast_shape_error():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


@pytest.mark.parametrize("name", ["gelu", "sigmoid", "relu", "leaky_relu", "abs_", "neg"])
def test_unary_grad_check(name):
    fn = getattr(T, name)
    with T.precision("float64"):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < 0.05] += 0.3  # keep away from kinks
        probe = _probe((3, 4))
        assert T.grad_check(lambda t: T.sum_all(T.mul(fn(t), probe)), x) < 1e-6


def test_gelu_matches_erf_definition():
    from math import erf, sqrt

    with T.precision("float64"):
        xs = np.linspace(-5, 5, 41)
        got = T.gelu(Tensor(xs)).data
    ref = np.array([0.5 * v * (1 + erf(v / sqrt(2))) for v in xs])
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]), dtype=np.float64)).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


@pytest.mark.parametrize("seed", range(3))
def test_binary_and_matmul_grad_checks(seed):
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        b = Tensor(rng.standard_normal((1, 4)))
        w = Tensor(rng.standard_normal((4, 5)))
        probe = _probe((3, 5), seed)
        x = rng.standard_normal((3, 4))
        assert T.grad_check(lambda t: T.sum_all(T.mul(T.matmul(T.mul(T.add(t, b), t), w), probe)), x) < 1e-6
        assert T.grad_check(lambda t: T.sum_all(T.mul(T.matmul(Tensor(x), t), probe)), w.data) < 1e-6
        assert T.grad_check(lambda t: T.sum_all(T.mul(T.add(Tensor(x), t), x)), b.data) < 1e-6


def test_softmax_rows_sum_to_one_and_grad():
    rng = np.random.default_rng(0)
    with T.precision("float64"):
        x = rng.standard_normal((2, 3, 5)) * 3
        s = T.softmax_lastdim(Tensor(x)).data
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
        probe = _probe((2, 3, 5))
        assert T.grad_check(lambda t: T.sum_all(T.mul(T.softmax_lastdim(t), probe)), x) < 1e-6


def test_softmax_with_masked_entries():
    x = np.array([[0.0, -1e9, 1.0, -1e9]])
    s = T.softmax_lastdim(Tensor(x, dtype=np.float64)).data
    assert s[0, 1] == 0 and s[0, 3] == 0
    np.testing.assert_allclose(s[0, [0, 2]], np.exp([0, 1]) / np.exp([0, 1]).sum())


def test_softmax_invariant_to_large_offsets():
    x = np.array([[1000.0, 1001.0, 1002.0]], dtype=np.float32)
    s = T.softmax_lastdim(Tensor(x)).data
    ref = np.exp([0.0, 1.0, 2.0]) / np.exp([0.0, 1.0, 2.0]).sum()
    np.testing.assert_allclose(s[0], ref, rtol=1e-6)


def test_mean_over_grad():
    with T.precision("float64"):
        x = np.random.default_rng(1).standard_normal((2, 3, 4))
        probe = _probe((2, 1, 4))
        assert T.grad_check(lambda t: T.sum_all(T.mul(T.mean_over(t, 1, keepdims=True), probe)), x) < 1e-6


@pytest.mark.parametrize("op", ["reshape", "permute", "concat", "slice", "pad_zero", "pad_reflect", "roll"])
def test_shape_op_grads(op):
    rng = np.random.default_rng(5)
    with T.precision("float64"):
        x = rng.standard_normal((2, 5, 4, 3))
        fns = {
            "reshape": lambda t: T.reshape(t, (10, 12)),
            "permute": lambda t: T.permute(t, (0, 3, 1, 2)),
            "concat": lambda t: T.concat([t, T.scale(t, 2.0)], axis=2),
            "slice": lambda t: T.slice_(t, (slice(None), slice(1, 4), slice(0, 3, 2))),
            "pad_zero": lambda t: T.pad_zero(t, ((0, 0), (1, 2), (0, 3), (0, 0))),
            "pad_reflect": lambda t: T.pad_reflect(t, ((0, 0), (0, 3), (0, 2), (0, 0))),
            "roll": lambda t: T.roll(t, (-2, 1), (1, 2)),
        }
        f = fns[op]
        probe = _probe(f(Tensor(x)).shape, 9)
        assert T.grad_check(lambda t: T.sum_all(T.mul(f(t), probe)), x) < 1e-6


def test_take_grad():
    rng = np.random.default_rng(2)
    with T.precision("float64"):
        table = rng.standard_normal((2, 7))
        index = rng.integers(0, 7, (4, 5))
        probe = _probe((2, 4, 5))
        assert T.grad_check(lambda t: T.sum_all(T.mul(T.take(t, index), probe)), table) < 1e-6


def test_pad_reflect_matches_numpy():
    x = np.arange(2 * 5 * 4, dtype=np.float64).reshape(1, 5, 4, 2)
    got = T.pad_reflect(Tensor(x, dtype=np.float64), ((0, 0), (0, 3), (0, 2), (0, 0))).data
    np.testing.assert_array_equal(got, np.pad(x, ((0, 0), (0, 3), (0, 2), (0, 0)), mode="reflect"))


def test_grad_check_detects_wrong_gradient():
    def bad(t):
        out = np.asarray((t.data ** 2).sum())
        return T.apply_op(out, (t,), lambda g: (g * t.data,), "bad_square")  # should be 2x

    with T.precision("float64"):
        assert T.grad_check(bad, np.array([1.0, 2.0])) > 0.1


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-10, 10)))
def test_property_sum_gradient_is_ones(arr):
    x = Tensor(arr, requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = T.sum_all(x)
    T.backward(y, tape)
    np.testing.assert_array_equal(x.grad, np.ones_like(arr))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_property_add_mul_commute(a, b):
    ta, tb = Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)
    np.testing.assert_array_equal(T.add(ta, tb).data, T.add(tb, ta).data)
    np.testing.assert_array_equal(T.mul(ta, tb).data, T.mul(tb, ta).data)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=2, max_size=4).flatmap(
    lambda dims: st.tuples(st.just(tuple(dims)), st.permutations(list(range(len(dims)))))))
def test_property_permute_roundtrip(args):
    shape, order = args
    x = np.arange(int(np.prod(shape)), dtype=np.float64).reshape(shape)
    inv = np.argsort(order)
    y = T.permute(T.permute(Tensor(x, dtype=np.float64), order), tuple(inv))
    np.testing.assert_array_equal(y.data, x)

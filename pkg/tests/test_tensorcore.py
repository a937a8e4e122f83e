import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mptscale import tensorcore as tc
from mptscale.tensorcore import NumericError, ShapeError, Tape, TapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_sigmoid_at_zero():
    assert tc.sigmoid(Tensor([0.0])).item() == 0.5


def test_sigmoid_is_stable_at_extremes():
    y = tc.sigmoid(Tensor([-800.0, 800.0])).data
    np.testing.assert_array_equal(y, [0.0, 1.0])


def test_layer_norm_of_constant_is_zero():
    y = tc.layer_norm(Tensor(np.full((2, 5), 3.7)))
    np.testing.assert_array_equal(y.data, 0.0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_non_finite_output_is_an_error():
    with pytest.raises(NumericError):
        tc.log(Tensor([0.0]))


def test_backward_square():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_matmul_ones():
    a, b = leaf(np.ones((2, 2))), leaf(np.ones((2, 2)))
    with Tape() as tape:
        loss = (a @ b).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, 2.0)


def test_backward_rejects_non_scalar_and_double_use():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)
    with Tape() as tape:
        loss = (x * 2.0).sum()
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_no_recording_outside_tape():
    x = leaf([1.0])
    y = x * 3.0
    assert y._node is None


def test_sigmoid_matvec_matches_finite_differences():
    rng = np.random.default_rng(0)
    w = leaf(rng.standard_normal((4, 4)))
    x = Tensor(rng.standard_normal((4, 1)))
    rep = tc.grad_check(lambda p: tc.sigmoid(w @ x).sum(), w, tol=1e-6)
    assert rep.passed, rep.max_rel_err


def test_grad_check_square_report():
    x = leaf([3.0])
    rep = tc.grad_check(lambda p: (x * x).sum(), x)
    assert rep.analytic[0] == pytest.approx(6.0)
    assert rep.numeric[0] == pytest.approx(6.0, rel=1e-8)
    assert rep.passed


def test_grad_check_flags_wrong_gradient():
    x = leaf([0.3, -0.2])

    def bad_square(a):
        return tc.make_op(a.data ** 2, (a,), lambda g: (g * a.data,), "bad")

    rep = tc.grad_check(lambda p: bad_square(x).sum(), x)
    assert not rep.passed


UNARY = {
    "sigmoid": tc.sigmoid,
    "tanh": tc.tanh,
    "elu": tc.elu,
    "exp": tc.exp,
    "square": tc.square,
    "log_abs": lambda t: tc.log(t * t + 1.0),
    "mean": lambda t: tc.mean(t, axis=0, keepdims=True) * t,
    "cumsum": lambda t: tc.cumsum(t, axis=1),
    "flip": lambda t: tc.flip(t, 0) * t,
    "transpose": lambda t: t.transpose(1, 0) @ t,
    "slice": lambda t: t[:, 1:] * t[:, :-1],
    "fancy": lambda t: t[np.array([0, 0, 1])],
    "concat": lambda t: tc.concat([t, t * t], axis=1),
    "stack": lambda t: tc.stack([t, tc.tanh(t)], axis=0),
    "div": lambda t: t / (t * t + 2.0),
    "layer_norm": lambda t: tc.layer_norm(t, leaf(np.linspace(0.5, 1.5, t.shape[-1])),
                                          leaf(np.linspace(-1, 1, t.shape[-1]))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal((3, 4)))
    weights = Tensor(rng.standard_normal(UNARY[name](x).shape))
    rep = tc.grad_check(lambda p: (UNARY[name](x) * weights).sum(), x, tol=1e-6)
    assert rep.passed, (name, rep.max_rel_err)


def test_broadcast_gradients_reduce_to_input_shape():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4,)))
    rep = tc.grad_check(lambda p: (tc.tanh(a * b + b) - a / (b * b + 1.0)).sum(), [a, b])
    assert rep.passed


def test_batch_norm_train_updates_running_stats():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((4, 3, 5, 2)) * 2.0 + 1.0)
    rm, rv = np.zeros(3), np.ones(3)
    g, b = leaf(np.ones(3)), leaf(np.zeros(3))
    y = tc.batch_norm(x, g, b, rm, rv, training=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * mean)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var)


def test_batch_norm_eval_is_affine_in_stored_stats():
    rng = np.random.default_rng(3)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    g, b = leaf(rng.standard_normal(3)), leaf(rng.standard_normal(3))
    x1 = rng.standard_normal((2, 3, 4, 4))
    x2 = np.concatenate([x1[:1], 100 * rng.standard_normal((1, 3, 4, 4))])
    y1 = tc.batch_norm(Tensor(x1), g, b, rm.copy(), rv.copy(), training=False).data
    y2 = tc.batch_norm(Tensor(x2), g, b, rm.copy(), rv.copy(), training=False).data
    np.testing.assert_array_equal(y1[0], y2[0])
    expect = (x1 - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(y1, expect * g.data[None, :, None, None]
                               + b.data[None, :, None, None], rtol=1e-12)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    rng = np.random.default_rng(4)
    x = leaf(rng.standard_normal((3, 2, 4, 3)))
    g, b = leaf(rng.uniform(0.5, 1.5, 2)), leaf(rng.standard_normal(2))
    w = Tensor(rng.standard_normal((3, 2, 4, 3)))

    def fn(p):
        return (tc.batch_norm(x, g, b, np.zeros(2), np.ones(2), training=training) * w).sum()

    assert tc.grad_check(fn, [x, g, b], tol=1e-6).passed


def test_determinism_of_gradients():
    def run():
        rng = np.random.default_rng(5)
        w = leaf(rng.standard_normal((6, 6)))
        with Tape() as tape:
            loss = tc.tanh(w @ w).sum()
        tape.backward(loss)
        return loss.data, w.grad

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


@settings(max_examples=25, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=3),
       seed=st.integers(0, 2 ** 31 - 1))
def test_checkpoint_round_trip_is_byte_exact(shape, seed):
    rng = np.random.default_rng(seed)
    items = [("a.w", rng.standard_normal(shape).astype(np.float32)),
             ("b", rng.standard_normal(3).astype(np.float32))]
    blob = tc.save_tensors(items)
    back = tc.load_tensors(blob)
    assert [n for n, _ in back] == ["a.w", "b"]
    for (_, x), (_, y) in zip(items, back):
        assert x.tobytes() == y.tobytes() and x.shape == y.shape
    assert tc.save_tensors(back) == blob


def test_checkpoint_rejects_truncation_and_garbage():
    blob = tc.save_tensors([("w", np.ones((2, 2), dtype=np.float32))])
    with pytest.raises(ValueError):
        tc.load_tensors(blob[:-1])
    with pytest.raises(ValueError):
        tc.load_tensors(blob + b"\0")
    with pytest.raises(ValueError):
        tc.load_tensors(b"not a manifest")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_sum_of_squares_gradient_property(values):
    x = leaf(values)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * np.asarray(values))

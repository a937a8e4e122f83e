import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mptscale import layers as L
from mptscale import tensorcore as tc
from mptscale.tensorcore import ShapeError, Tensor


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# -- linear attention ------------------------------------------------------------------
def test_attention_single_token_returns_value():
    rng = np.random.default_rng(0)
    q, k, v = rand(rng, 1, 4), rand(rng, 1, 4), rand(rng, 1, 4)
    for causal in (True, False):
        out = L.linear_attention(q, k, v, causal).data
        np.testing.assert_allclose(out, v.data, rtol=1e-5)


def test_attention_equal_keys_is_running_mean():
    rng = np.random.default_rng(1)
    t = 6
    q = rand(rng, t, 3)
    k = Tensor(np.tile(rng.standard_normal(3), (t, 1)))
    v = rand(rng, t, 3)
    out = L.linear_attention(q, k, v, causal=True).data
    expect = np.cumsum(v.data, axis=0) / np.arange(1, t + 1)[:, None]
    np.testing.assert_allclose(out, expect, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(t=st.integers(1, 16), d=st.integers(1, 16), seed=st.integers(0, 10 ** 6),
       causal=st.booleans())
def test_attention_matches_quadratic_oracle(t, d, seed, causal):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((2, t, d)) for _ in range(3))
    out = L.linear_attention(Tensor(q), Tensor(k), Tensor(v), causal).data
    assert np.abs(out - L.attention_oracle(q, k, v, causal)).max() < 1e-5


def test_attention_rejects_empty_and_mismatch():
    with pytest.raises(ShapeError):
        L.linear_attention(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))),
                           Tensor(np.zeros((0, 2))), True)
    with pytest.raises(ShapeError):
        L.linear_attention(Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 2))),
                           Tensor(np.zeros((3, 2))), True)


# -- recurrent cells ----------------------------------------------------------------------
def zero_cell(kind, n_in, hidden):
    cell = L.RNNCell(kind, n_in, hidden, np.random.default_rng(0))
    for p in cell.parameters():
        p.data[...] = 0.0
    return cell


def test_gru_zero_weights_closed_form():
    # z = 0.5, n = 0, h' = (1 - z) * n + z * h = 0.5
    cell = zero_cell("gru", 1, 1)
    y, _ = L.rnn_cell_step(cell, Tensor(np.zeros((1, 1))), Tensor(np.ones((1, 1))))
    assert y.item() == 0.5


def test_lstm_zero_weights_zero_state():
    cell = zero_cell("lstm", 3, 2)
    zero = Tensor(np.zeros((1, 2)))
    y, _ = L.rnn_cell_step(cell, Tensor(np.zeros((1, 3))), (zero, zero))
    np.testing.assert_array_equal(y.data, 0.0)


def test_rnn_counts():
    assert L.RNNCell.count("gru", 16, 16) == 1584
    assert L.RNNCell.macs("gru", 16, 16) == 1536
    cell = L.RNNCell("lstm", 5, 7, np.random.default_rng(0))
    assert cell.num_params() == L.RNNCell.count("lstm", 5, 7)
    bi = L.RNN("gru", 5, 7, True, np.random.default_rng(0))
    assert bi.num_params() == L.RNN.count("gru", 5, 7, True)
    assert bi.num_params() == 2 * L.RNNCell.count("gru", 5, 7) + 14 * 7 + 7


def test_rnn_cell_dimension_mismatch():
    cell = L.RNNCell("gru", 3, 2, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        L.rnn_cell_step(cell, Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 2))))
    with pytest.raises(ShapeError):
        cell(Tensor(np.zeros((1, 5, 4))))


@pytest.mark.parametrize("kind", ["gru", "lstm"])
def test_fused_sequence_matches_unrolled_steps(kind):
    rng = np.random.default_rng(2)
    cell = L.RNNCell(kind, 3, 5, rng)
    x = rand(rng, 2, 9, 3)
    np.testing.assert_allclose(cell(x).data, cell.unrolled(x).data, atol=1e-13)


@pytest.mark.parametrize("kind", ["gru", "lstm"])
def test_grouped_cells_are_independent(kind):
    rng = np.random.default_rng(3)
    cell = L.RNNCell(kind, 2, 3, rng, groups=4)
    x = rand(rng, 4, 2, 6, 2)
    y = cell(x).data
    for g in range(4):
        single = L.RNNCell(kind, 2, 3, rng)
        single.w_x.data, single.w_h.data, single.b.data = (
            cell.w_x.data[g], cell.w_h.data[g], cell.b.data[g])
        np.testing.assert_allclose(y[g], single(x[g]).data, atol=1e-13)


@pytest.mark.parametrize("kind", ["gru", "lstm"])
@pytest.mark.parametrize("seed", range(3))
def test_gru_lstm_step_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    cell = L.RNNCell(kind, 8, 8, rng)
    x = Tensor(rng.standard_normal((2, 8)), requires_grad=True)
    h0 = Tensor(rng.standard_normal((2, 8)), requires_grad=True)
    state = h0 if kind == "gru" else (h0, Tensor(rng.standard_normal((2, 8))))
    rep = tc.grad_check(lambda p: L.rnn_cell_step(cell, x, state)[0].sum(),
                        [x, h0] + cell.parameters(), tol=1e-4)
    assert rep.passed


@pytest.mark.parametrize("kind", ["gru", "lstm"])
@pytest.mark.parametrize("groups", [None, 3])
def test_fused_sequence_gradients(kind, groups):
    rng = np.random.default_rng(4)
    cell = L.RNNCell(kind, 3, 4, rng, groups=groups)
    lead = () if groups is None else (groups,)
    x = Tensor(rng.standard_normal(lead + (2, 5, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal(lead + (2, 5, 4)))
    rep = tc.grad_check(lambda p: (cell(x) * w).sum(), [x] + cell.parameters(), tol=1e-6)
    assert rep.passed


# -- transformer ----------------------------------------------------------------------------
def test_heads_rule():
    assert L.n_heads(28) == 4 and L.n_heads(30) == 1


def test_transformer_shape():
    layer = L.TransformerLayer(28, 1, "gru", False, np.random.default_rng(0))
    assert layer(rand(np.random.default_rng(1), 1, 16, 28)).shape == (1, 16, 28)


def test_transformer_zero_outputs_is_identity():
    layer = L.TransformerLayer(8, 2, "lstm", True, np.random.default_rng(0))
    layer.zero_outputs_()
    x = rand(np.random.default_rng(1), 2, 7, 8)
    np.testing.assert_array_equal(layer(x).data, x.data)


@pytest.mark.parametrize("kind", ["gru", "lstm"])
@pytest.mark.parametrize("expand", [1, 2])
def test_uni_transformer_is_causal(kind, expand):
    rng = np.random.default_rng(5)
    layer = L.TransformerLayer(8, expand, kind, False, rng)
    x = rng.standard_normal((1, 12, 8)).astype(np.float32)
    layer.astype(np.float32)
    for t0 in (1, 5, 11):
        y = x.copy()
        y[:, t0:] += rng.standard_normal(y[:, t0:].shape).astype(np.float32)
        a, b = layer(Tensor(x)).data, layer(Tensor(y)).data
        assert np.abs(a[:, :t0] - b[:, :t0]).max() < 1e-7


def test_bi_transformer_sees_the_future():
    rng = np.random.default_rng(6)
    layer = L.TransformerLayer(8, 1, "gru", True, rng)
    x = rng.standard_normal((1, 10, 8))
    y = x.copy()
    y[:, 6:] += rng.standard_normal((1, 4, 8))
    assert np.abs(layer(Tensor(x)).data[:, :6] - layer(Tensor(y)).data[:, :6]).max() > 1e-3


def test_transformer_param_count_matches_closed_form():
    for args in [(16, 1, "gru", False), (12, 2, "lstm", True), (10, 2, "gru", True)]:
        layer = L.TransformerLayer(*args, np.random.default_rng(0))
        assert layer.num_params() == L.TransformerLayer.count(*args)


def test_linear_count():
    assert L.Linear.count(28, 28) == 812
    assert L.Linear(28, 28, np.random.default_rng(0)).num_params() == 812


# -- conv block ---------------------------------------------------------------------------------
def test_conv_block_depthwise_count():
    block = L.ConvBlock(16, np.random.default_rng(0))
    assert block.depthwise.size == 144
    assert block.num_params() == L.ConvBlock.count(16)


def test_conv_block_is_causal_in_time():
    rng = np.random.default_rng(7)
    block = L.ConvBlock(4, rng)
    x = rng.standard_normal((1, 4, 9, 6))
    y = x.copy()
    y[:, :, 5] += 10.0
    a, b = block(Tensor(x)).data, block(Tensor(y)).data
    assert np.array_equal(a[:, :, :5], b[:, :, :5])
    assert not np.array_equal(a[:, :, 5:8], b[:, :, 5:8])


def test_conv_block_identity_configuration():
    block = L.ConvBlock(5, np.random.default_rng(0))
    block.depthwise.data[...] = 0.0
    block.depthwise.data[:, 2, 1] = 1.0  # current frame, centre band
    block.pointwise.data[...] = np.eye(5)
    x = rand(np.random.default_rng(1), 2, 5, 7, 4)
    out = block(x).data
    np.testing.assert_allclose(out, x.data / np.sqrt(1.0 + 1e-5), rtol=1e-12)


def test_conv_block_channel_mismatch():
    with pytest.raises(ShapeError):
        L.ConvBlock(4, np.random.default_rng(0))(Tensor(np.zeros((1, 3, 5, 5))))


# -- gradient suite: every layer type at 64-bit ----------------------------------------------
def layer_cases(rng):
    yield "linear", L.Linear(5, 3, rng), rng.standard_normal((2, 4, 5))
    yield "layernorm", L.LayerNorm(6), rng.standard_normal((3, 6))
    yield "gru", L.RNNCell("gru", 3, 4, rng), rng.standard_normal((2, 5, 3))
    yield "lstm", L.RNNCell("lstm", 3, 4, rng), rng.standard_normal((2, 5, 3))
    yield "bi_gru", L.RNN("gru", 3, 4, True, rng), rng.standard_normal((2, 5, 3))
    yield "bi_lstm", L.RNN("lstm", 3, 4, True, rng), rng.standard_normal((2, 5, 3))
    yield "uni_transformer", L.TransformerLayer(4, 2, "gru", False, rng), \
        rng.standard_normal((2, 5, 4))
    yield "bi_transformer", L.TransformerLayer(4, 1, "lstm", True, rng), \
        rng.standard_normal((2, 5, 4))
    block = L.ConvBlock(3, rng).train()
    yield "convblock", block, rng.standard_normal((2, 3, 4, 3))


@pytest.mark.parametrize("seed", range(20))
def test_every_layer_passes_grad_check(seed):
    rng = np.random.default_rng(seed)
    for name, layer, x in layer_cases(rng):
        xt = Tensor(x, requires_grad=True)
        w = Tensor(rng.standard_normal(layer(xt).shape))
        params = [xt] + layer.parameters()
        rep = tc.grad_check(lambda p: (layer(xt) * w).sum(), params, tol=1e-3,
                            max_coords=80, seed=seed)
        assert rep.passed, (name, rep.max_rel_err)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad_close, numeric_grad
from nextitnet import numerics as nx
from nextitnet.layers import (
    CausalConv1D,
    EmbeddingTable,
    LayerNorm,
    ResidualBlockA,
    ResidualBlockB,
    causal_conv,
    conv_weight_count,
    embed,
    layer_norm_apply,
    one_dim_inverse,
    one_dim_transform,
    receptive_field,
    residual_forward,
)
from nextitnet.numerics import DimensionError, Tape, Tensor


def conv(kernel, dilation, bias=None):
    k = np.asarray(kernel, dtype=float)
    c_out = k.shape[2]
    return CausalConv1D(Tensor(k, requires_grad=True), Tensor(np.zeros(c_out) if bias is None else bias, requires_grad=True), dilation)


def dilated_conv_oracle(x: np.ndarray, taps: np.ndarray, bias: np.ndarray, dilation: int) -> np.ndarray:
    """Direct sum over ``taps[i]`` applied to ``x[h - dilation*i]``, zeros before the start."""
    t, _ = x.shape
    f = taps.shape[0]
    out = np.tile(bias, (t, 1)).astype(float)
    for h in range(t):
        for i in range(f):
            src = h - dilation * i
            if src >= 0:
                out[h] += x[src] @ taps[i]
    return out


# embedding ------------------------------------------------------------------


def test_embed_repeated_rows(rng):
    table = EmbeddingTable.init(5, 4, rng)
    out = embed([0, 0, 0], table).data
    for row in out:
        np.testing.assert_array_equal(row, table.weights.data[0])


def test_embed_gradient_counts(rng):
    table = EmbeddingTable.init(6, 3, rng)
    with Tape() as tape:
        tape.backward(nx.sum_all(embed([1, 4, 1, 1], table)))
    np.testing.assert_array_equal(table.weights.grad[:, 0], [0, 3, 0, 0, 1, 0])


def test_embed_matches_row_copy(rng):
    table = EmbeddingTable.init(20, 8, rng)
    idx = rng.integers(0, 20, size=(3, 7))
    expect = np.stack([[table.weights.data[i] for i in row] for row in idx])
    np.testing.assert_array_equal(embed(idx, table).data, expect)


def test_embed_out_of_range(rng):
    with pytest.raises(IndexError):
        embed([0, 5], EmbeddingTable.init(5, 2, rng))


# causal convolution ---------------------------------------------------------


def test_conv_pass_through():
    x = Tensor(np.arange(1.0, 6.0)[:, None])
    out = causal_conv(x, conv(np.array([0.0, 0.0, 1.0]).reshape(3, 1, 1), 1))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_dilation_two_sums():
    x = Tensor(np.arange(1.0, 6.0)[:, None])
    out = causal_conv(x, conv(np.ones((3, 1, 1)), 2))
    # x_h + x_{h-2} + x_{h-4}
    expect = dilated_conv_oracle(x.data, np.ones((3, 1, 1)), np.zeros(1), 2)
    assert expect[:, 0].tolist() == [1, 2, 4, 6, 9]
    assert out.data[:, 0].tolist() == [1, 2, 4, 6, 9]


def test_conv_zero_input(rng):
    layer = CausalConv1D.init(3, 4, 5, 2, rng)
    assert not causal_conv(Tensor(np.zeros((7, 4))), layer).data.any()


@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(2, 4), st.integers(1, 5))
@settings(max_examples=40, deadline=None)
def test_conv_matches_direct_sum(seed, t, f, dilation):
    r = np.random.default_rng(seed)
    layer = CausalConv1D.init(f, 3, 2, dilation, r)
    layer.bias.data = r.normal(size=2)
    x = r.normal(size=(t, 3))
    got = causal_conv(Tensor(x), layer).data
    np.testing.assert_allclose(got, dilated_conv_oracle(x, layer.filter_taps(), layer.bias.data, dilation), atol=1e-12)


def test_conv_padding_and_length(rng):
    layer = CausalConv1D.init(3, 2, 2, 4, rng)
    assert layer.padding == 8
    assert causal_conv(Tensor(np.ones((5, 2))), layer).shape == (5, 2)


def test_conv_gradient(rng):
    layer = CausalConv1D.init(3, 2, 3, 2, rng)
    x = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
    c = rng.normal(size=(6, 3))
    with Tape() as tape:
        tape.backward(nx.sum_all(nx.mul(causal_conv(x, layer), Tensor(c))))

    def f():
        return (causal_conv(Tensor(x.data), layer).data * c).sum()

    assert_grad_close(x.grad, numeric_grad(f, x.data))
    assert_grad_close(layer.kernel.grad, numeric_grad(f, layer.kernel.data))


# layer norm -----------------------------------------------------------------


def test_layer_norm_constant_row():
    out = layer_norm_apply(Tensor(np.full((2, 4), 3.0)), LayerNorm.init(4))
    assert not out.data.any()


def test_layer_norm_unit_row():
    out = layer_norm_apply(Tensor([[1.0, -1.0]]), LayerNorm.init(2, eps=1e-300))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], rtol=1e-12)


def test_layer_norm_no_time_leakage(rng):
    x = rng.normal(size=(4, 6))
    ln = LayerNorm.init(6)
    a = layer_norm_apply(Tensor(x), ln).data
    x[2] *= 100.0
    b = layer_norm_apply(Tensor(x), ln).data
    np.testing.assert_array_equal(np.delete(a, 2, axis=0), np.delete(b, 2, axis=0))


def test_layer_norm_gradient(rng):
    ln = LayerNorm(Tensor(rng.uniform(0.5, 2, 6), requires_grad=True), Tensor(rng.normal(size=6), requires_grad=True))
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    c = rng.normal(size=(3, 6))
    with Tape() as tape:
        tape.backward(nx.sum_all(nx.mul(layer_norm_apply(x, ln), Tensor(c))))

    def f():
        return (layer_norm_apply(Tensor(x.data), ln).data * c).sum()

    for p in (x, ln.gain, ln.bias):
        assert_grad_close(p.grad, numeric_grad(f, p.data))


def test_layer_norm_needs_two_channels():
    with pytest.raises(DimensionError):
        layer_norm_apply(Tensor(np.ones((3, 1))), LayerNorm.init(1))


# residual blocks ------------------------------------------------------------


def test_block_a_identity_at_zero(rng):
    block = ResidualBlockA.init(4, 2, rng)
    block.conv_up.kernel.data[:] = 0.0
    block.conv_up.bias.data[:] = 0.0
    x = rng.normal(size=(9, 8))
    assert residual_forward(Tensor(x), block).data.tobytes() == x.tobytes()


def test_block_b_identity_at_zero(rng):
    block = ResidualBlockB.init(4, (1, 2), rng)
    block.conv2.kernel.data[:] = 0.0
    block.conv2.bias.data[:] = 0.0
    x = rng.normal(size=(9, 8))
    # conv2 output is all zero -> layer norm of a constant row is 0 -> relu(0) = 0
    direct = np.maximum(0.0, block.norms[1].bias.data + 0.0 * x)
    assert not direct.any()
    assert residual_forward(Tensor(x), block).data.tobytes() == x.tobytes()


def test_block_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        residual_forward(Tensor(np.ones((3, 6))), ResidualBlockA.init(4, 1, rng))


def test_block_a_matches_formula(rng):
    block = ResidualBlockA.init(3, 2, rng)
    x = rng.normal(size=(7, 6))

    def psi(h, ln):
        mu = h.mean(axis=1, keepdims=True)
        var = h.var(axis=1, keepdims=True)
        return (h - mu) / np.sqrt(var + ln.eps) * ln.gain.data + ln.bias.data

    def w(h, c):
        return dilated_conv_oracle(h, c.filter_taps(), c.bias.data, c.dilation)

    relu = lambda h: np.maximum(h, 0.0)  # noqa: E731
    n0, n1, n2 = block.norms
    f = w(relu(psi(w(relu(psi(w(relu(psi(x, n0)), block.conv_down), n1)), block.conv_dilated), n2)), block.conv_up)
    np.testing.assert_allclose(residual_forward(Tensor(x), block).data, x + f, atol=1e-12)


@pytest.mark.parametrize("variant", ["A", "B"])
@pytest.mark.parametrize("t", [1, 2, 5, 17])
def test_shape_preserved(rng, variant, t):
    block = ResidualBlockA.init(4, 2, rng) if variant == "A" else ResidualBlockB.init(4, (2, 4), rng)
    assert residual_forward(Tensor(rng.normal(size=(t, 8))), block).shape == (t, 8)
    assert residual_forward(Tensor(rng.normal(size=(3, t, 8))), block).shape == (3, t, 8)


@given(
    seed=st.integers(0, 2**32 - 1),
    variant=st.sampled_from("AB"),
    dilations=st.lists(st.integers(1, 4), min_size=1, max_size=4),
    t=st.integers(2, 20),
    data=st.data(),
)
@settings(max_examples=60, deadline=None)
def test_stack_causality(seed, variant, dilations, t, data):
    r = np.random.default_rng(seed)
    if variant == "A":
        blocks = [ResidualBlockA.init(3, d, r) for d in dilations]
    else:
        blocks = [ResidualBlockB.init(3, (d, d), r) for d in dilations]

    def run(x):
        h = Tensor(x)
        for b in blocks:
            h = residual_forward(h, b)
        return h.data

    x = r.normal(size=(t, 6))
    j = data.draw(st.integers(0, t - 1))
    base = run(x)
    x2 = x.copy()
    x2[j] += r.normal(size=6)
    pert = run(x2)
    assert pert[:j].tobytes() == base[:j].tobytes()


def _measured_field(blocks, t=48, seed=0):
    r = np.random.default_rng(seed)
    x = r.normal(size=(t, blocks[0].channels))

    def last(z):
        h = Tensor(z)
        for b in blocks:
            h = residual_forward(h, b)
        return h.data[-1]

    ref = last(x)
    # layer norm ignores a constant shift across channels, so perturb unevenly
    bump = r.normal(size=x.shape[1])
    for j in range(t):
        z = x.copy()
        z[j] += bump
        if not np.array_equal(last(z), ref):
            return t - j
    return 0


def test_receptive_field_dilated(rng):
    blocks = [ResidualBlockA.init(4, d, rng) for d in (1, 2, 4, 8)]
    assert _measured_field(blocks) == 31 == receptive_field(3, [1, 2, 4, 8])


def test_receptive_field_standard(rng):
    for depth in (1, 2, 3, 4):
        blocks = [ResidualBlockA.init(4, 1, rng) for _ in range(depth)]
        assert _measured_field(blocks) == 2 * depth + 1


@pytest.mark.parametrize("k", [4, 8, 32])
def test_parameter_counts(rng, k):
    assert conv_weight_count(ResidualBlockA.init(k, 1, rng)) == 7 * k * k
    b = ResidualBlockB.init(k, (1, 2), rng)
    assert [c.weight_count() for c in b.convs] == [12 * k * k, 12 * k * k]


# one-dimensional transformation ---------------------------------------------


def test_one_dim_round_trip(rng):
    e = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    t3 = one_dim_transform(e)
    assert t3.shape == (1, 2, 4) and t3.size == e.size
    back = one_dim_inverse(t3)
    assert back.data.tobytes() == e.data.tobytes()


def test_one_dim_gradient(rng):
    e = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    c = rng.normal(size=(1, 3, 4))
    with Tape() as tape:
        tape.backward(nx.sum_all(nx.mul(one_dim_transform(e), Tensor(c))))
    np.testing.assert_array_equal(e.grad, c.reshape(3, 4))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad_close, numeric_grad
from nextitnet import numerics as nx
from nextitnet.numerics import ContractError, DimensionError, NumericError, Tape, Tensor


def leaf(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def grads_of(build, *leaves):
    for t in leaves:
        t.zero_grad()
    with Tape() as tape:
        out = build()
        tape.backward(out)
    return [t.grad for t in leaves]


# matmul ---------------------------------------------------------------------


def test_matmul_identity():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_small():
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    ga, gb = grads_of(lambda: nx.sum_all(nx.matmul(a, b)), a, b)
    np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.data.T)
    fd = numeric_grad(lambda: (a.data @ b.data).sum(), a.data)
    assert_grad_close(ga, fd)
    assert_grad_close(gb, numeric_grad(lambda: (a.data @ b.data).sum(), b.data))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# elementwise ----------------------------------------------------------------


def test_relu_values():
    assert nx.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_add_zeros_is_identity(rng):
    x = Tensor(rng.normal(size=(2, 3)))
    np.testing.assert_array_equal(nx.add(x, Tensor(np.zeros((2, 3)))).data, x.data)


def test_elementwise_dispatch():
    x = Tensor([1.0, -2.0])
    assert nx.elementwise("relu", x).data.tolist() == [1.0, 0.0]
    assert nx.elementwise("mul", x, x).data.tolist() == [1.0, 4.0]
    with pytest.raises(ValueError):
        nx.elementwise("tanh", x)


def test_mul_gradient(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 3)))
    ga, gb = grads_of(lambda: nx.sum_all(nx.mul(a, b)), a, b)
    assert_grad_close(ga, numeric_grad(lambda: (a.data * b.data).sum(), a.data))
    assert_grad_close(gb, numeric_grad(lambda: (a.data * b.data).sum(), b.data))


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_scalar_broadcast_gradient():
    x = leaf([1.0, 2.0, 3.0])
    s = leaf(2.0)
    gx, gs = grads_of(lambda: nx.sum_all(nx.mul(x, s)), x, s)
    assert gx.tolist() == [2.0, 2.0, 2.0]
    assert float(gs) == 6.0


# softmax / cross entropy ---------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax_rows(Tensor(np.zeros((1, 4)))).data, [[0.25] * 4])


def test_softmax_stable():
    p = nx.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(p).all()
    assert p[0, 0] == pytest.approx(1.0) and p[0, 1] == pytest.approx(0.0, abs=1e-300)


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(seed, scale):
    x = np.random.default_rng(seed).uniform(-1, 1, size=(4, 7)) * scale
    p = nx.softmax_rows(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_gradient(rng):
    x = leaf(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))

    def f():
        z = x.data - x.data.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        return (p * w).sum()

    (g,) = grads_of(lambda: nx.sum_all(nx.mul(nx.softmax_rows(x), Tensor(w))), x)
    assert_grad_close(g, numeric_grad(f, x.data))


def test_cross_entropy_uniform():
    loss = nx.cross_entropy_from_logits(Tensor(np.zeros((1, 100))), [7])
    assert loss.item() == pytest.approx(math.log(100), abs=1e-12)


def test_cross_entropy_all_masked():
    loss = nx.cross_entropy_from_logits(Tensor(np.ones((3, 4))), [0, 1, 2], [False, False, False])
    assert loss.item() == 0.0


def test_cross_entropy_matches_two_pass_oracle(rng):
    z = rng.normal(size=(3, 5))
    tgt = [4, 0, 2]
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    oracle = -sum(math.log(p[i, t]) for i, t in enumerate(tgt))
    assert nx.cross_entropy_from_logits(Tensor(z), tgt).item() == pytest.approx(oracle, abs=1e-10)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        nx.cross_entropy_from_logits(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_masked_target_not_checked():
    loss = nx.cross_entropy_from_logits(Tensor(np.zeros((2, 3))), [1, 99], [True, False])
    assert loss.item() == pytest.approx(math.log(3))


def test_cross_entropy_gradient(rng):
    z = leaf(rng.normal(size=(4, 6)))
    tgt, mask = [1, 5, 0, 2], [True, False, True, True]
    (g,) = grads_of(lambda: nx.cross_entropy_from_logits(z, tgt, mask), z)
    fd = numeric_grad(lambda: nx.cross_entropy_from_logits(Tensor(z.data), tgt, mask).item(), z.data)
    assert_grad_close(g, fd)
    assert (g[1] == 0).all()


# backward -------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    (g,) = grads_of(lambda: nx.sum_all(x), x)
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_backward_relu_gate():
    x = leaf([-1.0, 2.0])
    (g,) = grads_of(lambda: nx.sum_all(nx.relu(x)), x)
    assert g.tolist() == [0.0, 1.0]


def test_fan_out_accumulates():
    x = leaf([3.0])
    (g,) = grads_of(lambda: nx.sum_all(nx.add(x, x)), x)
    assert g.tolist() == [2.0]


def test_repeated_backward_accumulates():
    x = leaf([1.0, 1.0])
    with Tape() as tape:
        y = nx.sum_all(x)
    tape.backward(y)
    tape.backward(y)
    assert x.grad.tolist() == [2.0, 2.0]


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = nx.relu(x)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_backward_without_tape():
    with pytest.raises(ContractError):
        nx.backward(nx.sum_all(leaf([1.0])))


def test_tape_records_each_op_once():
    x = leaf([1.0, -1.0])
    with Tape() as tape:
        y = nx.sum_all(nx.relu(nx.mul(x, x)))
    assert [r.op for r in tape.records] == ["mul", "relu", "sum"]
    tape.backward(y)
    assert x.grad.tolist() == [2.0, -2.0]


def test_no_recording_without_requires_grad():
    with Tape() as tape:
        nx.relu(Tensor([1.0]))
    assert len(tape) == 0


@pytest.mark.filterwarnings("ignore:overflow")
def test_nan_check_mode():
    big = Tensor([1e308])
    nx.set_nan_check(True)
    try:
        with pytest.raises(NumericError), np.errstate(over="ignore"):
            nx.mul(big, Tensor([10.0]))
    finally:
        nx.set_nan_check(False)
    with np.errstate(over="ignore"):
        assert np.isinf(nx.mul(big, Tensor([10.0])).data).all()


def test_determinism(rng):
    x = rng.normal(size=(2, 5, 4))
    k = rng.normal(size=(3, 4, 4))
    a = nx.conv1d_causal(Tensor(x), Tensor(k), None, 2).data
    b = nx.conv1d_causal(Tensor(x.copy()), Tensor(k.copy()), None, 2).data
    assert a.tobytes() == b.tobytes()


# shape ops ------------------------------------------------------------------


def test_reshape_slice_concat_gradients(rng):
    x = leaf(rng.normal(size=(4, 3)))
    y = leaf(rng.normal(size=(4, 2)))
    w = rng.normal(size=(2, 5))

    def build(xt, yt):
        c = nx.concat([xt, yt], axis=-1)
        r = nx.reshape(c, (2, 10))
        s = nx.take_rows(nx.reshape(r, (4, 5)), slice(1, 3))
        return nx.sum_all(nx.mul(s, Tensor(w)))

    gx, gy = grads_of(lambda: build(x, y), x, y)
    assert_grad_close(gx, numeric_grad(lambda: build(Tensor(x.data), Tensor(y.data)).item(), x.data))
    assert_grad_close(gy, numeric_grad(lambda: build(Tensor(x.data), Tensor(y.data)).item(), y.data))


# fused ops ------------------------------------------------------------------


def test_linear_gradient(rng):
    x, w, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5))
    c = rng.normal(size=(2, 3, 5))

    def f():
        return ((x.data @ w.data + b.data) * c).sum()

    gx, gw, gb = grads_of(lambda: nx.sum_all(nx.mul(nx.linear(x, w, b), Tensor(c))), x, w, b)
    for g, t in ((gx, x), (gw, w), (gb, b)):
        assert_grad_close(g, numeric_grad(f, t.data))


def test_conv1d_gradient(rng):
    x, k, b = leaf(rng.normal(size=(2, 6, 3))), leaf(rng.normal(size=(3, 3, 4))), leaf(rng.normal(size=4))
    c = rng.normal(size=(2, 6, 4))

    def f():
        return (nx.conv1d_causal(Tensor(x.data), Tensor(k.data), Tensor(b.data), 2).data * c).sum()

    grads = grads_of(lambda: nx.sum_all(nx.mul(nx.conv1d_causal(x, k, b, 2), Tensor(c))), x, k, b)
    for g, t in zip(grads, (x, k, b)):
        assert_grad_close(g, numeric_grad(f, t.data))


def test_layer_norm_gradient(rng):
    x, g_, b_ = leaf(rng.normal(size=(3, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
    c = rng.normal(size=(3, 6))

    def f():
        return (nx.layer_norm(Tensor(x.data), Tensor(g_.data), Tensor(b_.data)).data * c).sum()

    grads = grads_of(lambda: nx.sum_all(nx.mul(nx.layer_norm(x, g_, b_), Tensor(c))), x, g_, b_)
    for g, t in zip(grads, (x, g_, b_)):
        assert_grad_close(g, numeric_grad(f, t.data))


def test_embedding_gradient_and_range(rng):
    table = leaf(rng.normal(size=(5, 3)))
    idx = np.array([[0, 4, 4], [2, 0, 4]])
    (g,) = grads_of(lambda: nx.sum_all(nx.embedding(table, idx)), table)
    np.testing.assert_array_equal(g[:, 0], [2, 0, 1, 0, 3])
    with pytest.raises(IndexError):
        nx.embedding(table, [5])


def test_sampled_softmax_gradient(rng):
    h, w, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 8))), leaf(rng.normal(size=8))
    tgt = np.array([1, 5, 7])
    neg = np.array([[2, 3], [1, 7], [4, 6]])

    def f():
        return nx.sampled_softmax_xent(Tensor(h.data), Tensor(w.data), Tensor(b.data), tgt, neg, 0.3).item()

    grads = grads_of(lambda: nx.sampled_softmax_xent(h, w, b, tgt, neg, 0.3), h, w, b)
    for g, t in zip(grads, (h, w, b)):
        assert_grad_close(g, numeric_grad(f, t.data))


# property: random compositions ---------------------------------------------


@given(
    seed=st.integers(0, 2**32 - 1),
    t=st.integers(1, 6),
    c=st.integers(2, 5),
    dilation=st.integers(1, 3),
    depth=st.integers(1, 3),
)
@settings(max_examples=25, deadline=None)
def test_random_composition_gradients(seed, t, c, dilation, depth):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(t, c)))
    kernels = [leaf(r.normal(size=(2, c, c))) for _ in range(depth)]
    gain, bias = leaf(r.uniform(0.5, 1.5, size=c)), leaf(r.normal(size=c))
    w = leaf(r.normal(size=(c, 4)))
    tgt = r.integers(0, 4, size=t)

    def build(xs, ks, gn, bs, wt):
        h = xs
        for k in ks:
            h = nx.add(h, nx.conv1d_causal(nx.relu(nx.layer_norm(h, gn, bs)), k, None, dilation))
        return nx.cross_entropy_from_logits(nx.matmul(h, wt), tgt)

    leaves = [x, *kernels, gain, bias, w]
    grads = grads_of(lambda: build(x, kernels, gain, bias, w), *leaves)

    def f():
        return build(Tensor(x.data), [Tensor(k.data) for k in kernels], Tensor(gain.data), Tensor(bias.data), Tensor(w.data)).item()

    # central differences at h=1e-6 carry ~1e-9 absolute round-off
    for g, p in zip(grads, leaves):
        assert_grad_close(g, numeric_grad(f, p.data), noise=1e-9)

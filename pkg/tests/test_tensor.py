import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facevad import tensor as T
from facevad.tensor import Graph, ShapeError, Tensor, backward, grad_check


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(n):
        for o in range(k):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride : r * stride + kh, s * stride : s * stride + kw]
                    out[i, o, r, s] = (patch * w[o]).sum() + b[o]
    return out


# ---- conv2d

def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3) - 4.0
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x)


def test_conv_ones_2x2():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out.data == 4.0)


def test_conv_zero_input():
    rng = np.random.default_rng(0)
    out = T.conv2d(Tensor(np.zeros((2, 3, 5, 5))), Tensor(rng.normal(size=(4, 3, 3, 3))), Tensor(np.zeros(4)), pad=1)
    assert np.all(out.data == 0.0)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 3), k=st.integers(1, 3), h=st.integers(3, 7), w=st.integers(3, 7),
    ks=st.integers(1, 3), stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 2**16),
)
def test_conv_matches_loop_oracle(n, c, k, h, w, ks, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(k, c, ks, ks))
    b = rng.normal(size=k)
    out = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, pad=pad)
    ho = (h + 2 * pad - ks) // stride + 1
    assert out.shape == (n, k, ho, (w + 2 * pad - ks) // stride + 1)
    np.testing.assert_allclose(out.data, naive_conv(x, wt, b, stride, pad), rtol=1e-10, atol=1e-10)


def test_conv_identity_1x1_multichannel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


# ---- relu

def test_relu_forward_and_subgradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    y = T.relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    backward(T.tensor_sum(y))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_relu_positive_identity():
    x = np.array([0.5, 3.0, 7.0])
    assert np.array_equal(T.relu(Tensor(x)).data, x)


# ---- global_avg_pool

def test_gap_hand_mean():
    out = T.global_avg_pool(Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]])))
    assert out.data.tolist() == [[4.0]]


def test_gap_constant_and_1x1():
    assert np.all(T.global_avg_pool(Tensor(np.full((2, 3, 4, 5), 2.5))).data == 2.5)
    x = np.random.default_rng(0).normal(size=(2, 3, 1, 1))
    assert np.array_equal(T.global_avg_pool(Tensor(x)).data, x[:, :, 0, 0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_gap_spatial_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-50, 50, size=(2, 3, 4, 4)).astype(np.float64)
    perm = rng.permutation(16)
    xp = x.reshape(2, 3, 16)[:, :, perm].reshape(2, 3, 4, 4)
    # integer-valued inputs make the float sum order-independent
    assert np.array_equal(T.global_avg_pool(Tensor(x)).data, T.global_avg_pool(Tensor(xp)).data)


# ---- linear

def test_linear_identity_and_hand_dot():
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x)
    out = T.linear(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]])), Tensor(np.array([1.0])))
    assert out.data.tolist() == [[12.0]]


def test_linear_zero_weight():
    out = T.linear(Tensor(np.ones((3, 4))), Tensor(np.zeros((2, 4))), Tensor(np.array([1.5, -2.0])))
    assert np.all(out.data == np.array([1.5, -2.0]))


def test_linear_mismatch():
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.ones((3, 4))), Tensor(np.zeros((2, 5))))


# ---- dropout

def test_dropout_identities():
    x = Tensor(np.arange(6.0))
    rng = np.random.default_rng(0)
    assert T.dropout(x, 0.0, rng, True) is x
    assert T.dropout(x, 0.5, rng, False) is x


def test_dropout_mean_preserved():
    out = T.dropout(Tensor(np.ones(100_000)), 0.3, np.random.default_rng(0), True)
    assert abs(out.data.mean() - 1.0) < 0.02
    survivors = out.data[out.data != 0]
    np.testing.assert_allclose(survivors, 1 / 0.7, rtol=1e-6)


def test_dropout_deterministic_and_bad_rate():
    x = Tensor(np.ones(50))
    a = T.dropout(x, 0.3, np.random.default_rng(5), True).data
    b = T.dropout(x, 0.3, np.random.default_rng(5), True).data
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, np.random.default_rng(0), True)


# ---- backward

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    backward(T.tensor_sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(T.tensor_sum(T.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_constant_loss():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = T.tensor_sum(T.mul(x, Tensor(np.zeros(2))))
    backward(loss)
    assert np.all(x.grad == 0.0)


def test_backward_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(T.tensor_sum(x))
    backward(T.tensor_sum(x))
    assert x.grad.tolist() == [2.0, 2.0]


def test_backward_nonscalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(T.mul(x, x))


def test_backward_shared_subexpression():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = T.mul(x, x)
    backward(T.tensor_sum(T.add(y, y)))
    assert x.grad.tolist() == [12.0]


def test_graph_topological_order():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.relu(T.mul(x, x))
    g = Graph.from_root(T.tensor_sum(y))
    index = {n._id: i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert index[p._id] < index[n._id]


# ---- grad_check

def _random_draws(n=10):
    return [np.random.default_rng(s) for s in range(n)]


def test_grad_check_linear():
    for rng in _random_draws():
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)
        assert grad_check(lambda x, w, b: T.tensor_sum(T.mul(T.linear(x, w, b), T.linear(x, w, b))), [x, w, b]) < 1e-4


def test_grad_check_conv():
    for rng in _random_draws():
        x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        stride = int(rng.integers(1, 3))
        probe = rng.normal(size=T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=1).shape)
        err = grad_check(
            lambda x, w, b: T.tensor_sum(T.mul(T.conv2d(x, w, b, stride=stride, pad=1), Tensor(probe))), [x, w, b]
        )
        assert err < 1e-4


def test_grad_check_relu_off_kink():
    for rng in _random_draws():
        x = rng.uniform(0.02, 2.0, size=(4, 5)) * rng.choice([-1.0, 1.0], size=(4, 5))
        probe = rng.normal(size=(4, 5))
        assert grad_check(lambda x: T.tensor_sum(T.mul(T.relu(x), Tensor(probe))), [x]) < 1e-4


def test_grad_check_global_avg_pool():
    for rng in _random_draws():
        x = rng.normal(size=(2, 3, 4, 5))
        probe = rng.normal(size=(2, 3))
        assert grad_check(lambda x: T.tensor_sum(T.mul(T.global_avg_pool(x), Tensor(probe))), [x]) < 1e-4


def test_grad_check_detects_wrong_gradient():
    def bad_square(x):
        return T._make(x.data**2, (x,), lambda g: (g * x.data,), "bad")

    assert grad_check(lambda x: T.tensor_sum(bad_square(x)), [np.array([1.0, 2.0])]) > 0.4


def test_grad_check_runs_in_double():
    seen = []

    def f(x):
        seen.append(x.dtype)
        return T.tensor_sum(x)

    grad_check(f, [np.ones(2, dtype=np.float32)])
    assert all(d == np.float64 for d in seen)


# ---- determinism, finiteness, misc ops

def test_forward_bit_identical_across_runs():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), pad=1).data
    b = T.conv2d(Tensor(x.copy()), Tensor(w.copy()), pad=1).data
    assert a.tobytes() == b.tobytes()


def test_conv_batch_independent():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 2, 6, 6)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    full = T.conv2d(Tensor(x), Tensor(w), pad=1).data
    single = T.conv2d(Tensor(x[2:3]), Tensor(w), pad=1).data
    assert np.array_equal(full[2:3], single)


def test_flip_and_concat_grads():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 3, 4))
    probe = rng.normal(size=(2, 1, 3, 4))
    err = grad_check(lambda x: T.tensor_sum(T.mul(T.concat([x, T.flip_horizontal(x)]), Tensor(probe))), [x])
    assert err < 1e-4
    assert np.array_equal(T.flip_horizontal(T.flip_horizontal(Tensor(x))).data, x)


def test_float32_default_dtype():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.ones(2)).dtype == np.float64

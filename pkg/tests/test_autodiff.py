import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stnn import autodiff as ad
from stnn.autodiff import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- tensor / tape

def test_grad_shape_matches_data():
    t = leaf(np.ones((3, 4)))
    assert t.grad.shape == t.data.shape
    assert Tensor(np.ones(2)).grad is None


def test_nan_output_raises():
    a = Tensor(np.array([np.inf]), requires_grad=True)
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
        a * 0.0


def test_backward_visits_reverse_order():
    a = leaf([1.0, 2.0])
    b = ad.square(a)
    c = ad.leaky_relu(b)
    d = ad.tsum(c)
    visited = d.backward()
    assert visited == ["sum", "leaky_relu", "square"]


def test_backward_populates_each_ancestor_once():
    a = leaf([1.0, 2.0])
    # a feeds two paths; the accumulated gradient must be applied exactly once
    out = ad.tsum(a * a + a)
    out.backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + 1)
    assert ad.current_tape().nodes == []


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with ad.no_grad():
        b = a * 2.0
    assert not b.requires_grad
    assert ad.current_tape().nodes == []


def test_float32_mode():
    ad.set_default_dtype(np.float32)
    assert Tensor([1.0, 2.0]).dtype == np.float32
    ad.set_default_dtype(np.float64)
    assert Tensor([1.0]).dtype == np.float64


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_matmul_dot():
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_fd(rng):
    b = Tensor(rng.normal(size=(3, 3)))
    err = ad.finite_diff_check(lambda a: ad.tsum(ad.matmul(a, b)), Tensor(rng.normal(size=(3, 3))))
    assert err < 1e-6


def test_matmul_grad_closed_form(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 4)))
    g = rng.normal(size=(2, 4))
    ad.matmul(a, b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_matmul_batched_grad_fd(rng):
    w = Tensor(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(2, 3, 5)))
    assert ad.finite_diff_check(lambda t: ad.tsum(ad.matmul(w, t)), x) < 1e-6
    xb = Tensor(x.data)
    assert ad.finite_diff_check(lambda t: ad.tsum(ad.matmul(t, xb)), w) < 1e-6


# ---------------------------------------------------------------- conv2d_same

def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 4, 6))
    out = ad.conv2d_same(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones_center_and_corner():
    out = ad.conv2d_same(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).data[0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0


def test_conv_is_cross_correlation():
    x = np.zeros((1, 3, 3))
    x[0, 1, 1] = 1.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    # an impulse response of a correlation is the kernel flipped
    np.testing.assert_array_equal(ad.conv2d_same(Tensor(x), Tensor(k)).data[0], k[0, 0, ::-1, ::-1])


def test_conv_even_kernel_rejected():
    with pytest.raises(ad.UnsupportedKernelError):
        ad.conv2d_same(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 3))))


def test_conv_channel_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.conv2d_same(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_grad_fd(rng):
    x = Tensor(rng.normal(size=(2, 4, 5)))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    assert ad.finite_diff_check(lambda t: ad.tsum(ad.conv2d_same(t, k)), x) < 1e-6
    xx = Tensor(x.data)
    assert ad.finite_diff_check(lambda t: ad.tsum(ad.conv2d_same(xx, t)), k) < 1e-6


@pytest.mark.parametrize("kh,kw", [(1, 1), (3, 3), (3, 1), (1, 3)])
def test_conv_same_shape(rng, kh, kw):
    x = Tensor(rng.normal(size=(3, 2, 5, 7)))
    out = ad.conv2d_same(x, Tensor(rng.normal(size=(4, 2, kh, kw))))
    assert out.shape == (3, 4, 5, 7)


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_row():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])


def test_softmax_no_overflow():
    np.testing.assert_array_equal(ad.softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])


def test_softmax_closed_form():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]],
                               rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(s):
    p = ad.softmax_rows(Tensor(s)).data
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.all((p >= 0) & (p <= 1))


def test_softmax_grad_fd(rng):
    w = Tensor(rng.normal(size=(4, 4)))
    assert ad.finite_diff_check(lambda s: ad.tsum(ad.softmax_rows(s) * w), Tensor(rng.normal(size=(4, 4)))) < 1e-6


# ---------------------------------------------------------------- leaky relu

def test_leaky_relu_values():
    assert ad.leaky_relu(Tensor([2.0, -2.0]), 0.2).data.tolist() == [2.0, -0.4]
    assert ad.leaky_relu(Tensor([0.0]), 0.2).data.tolist() == [0.0]


def test_leaky_relu_grad():
    x = leaf([-1.0, 1.0, 0.0])
    ad.tsum(ad.leaky_relu(x, 0.2)).backward()
    assert x.grad.tolist() == [0.2, 1.0, 1.0]


def test_leaky_relu_slope_range():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ad.ParameterError):
            ad.leaky_relu(Tensor([1.0]), bad)


# ---------------------------------------------------------------- concat

def test_concat_shapes():
    out = ad.concat_channels([Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 3, 4)))])
    assert out.shape == (5, 3, 4)


def test_concat_single_is_same():
    t = Tensor(np.ones((2, 3, 4)))
    assert ad.concat_channels([t]) is t


def test_concat_split_backward():
    a, b = leaf(np.zeros((2, 3, 4))), leaf(np.zeros((3, 3, 4)))
    ad.tsum(ad.concat_channels([a, b])).backward()
    np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
    np.testing.assert_array_equal(b.grad, np.ones_like(b.data))


def test_concat_preserves_order(rng):
    a, b = rng.normal(size=(1, 2, 2)), rng.normal(size=(2, 2, 2))
    out = ad.concat_channels([Tensor(a), Tensor(b)]).data
    np.testing.assert_array_equal(out[:1], a)
    np.testing.assert_array_equal(out[1:], b)


def test_concat_spatial_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.concat_channels([Tensor(np.ones((1, 3, 4))), Tensor(np.ones((1, 3, 5)))])


# ---------------------------------------------------------------- dropout

def test_dropout_eval_identity(rng):
    x = Tensor(rng.normal(size=(5, 5)))
    assert ad.dropout(x, 0.3, training=False, rng_seed=1).data is x.data


def test_dropout_rate_zero():
    x = Tensor(np.ones(10))
    np.testing.assert_array_equal(ad.dropout(x, 0.0, training=True, rng_seed=1).data, x.data)


def test_dropout_mean_preserved():
    out = ad.dropout(Tensor(np.ones(100_000)), 0.3, training=True, rng_seed=7).data
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out)).issubset({0.0, 1.0 / 0.7})


def test_dropout_rate_one_rejected():
    with pytest.raises(ad.ParameterError):
        ad.dropout(Tensor(np.ones(3)), 1.0, training=True, rng_seed=0)


def test_dropout_grad_masks_like_forward():
    x = leaf(np.ones(50))
    out = ad.dropout(x, 0.5, training=True, rng_seed=3)
    ad.tsum(out).backward()
    np.testing.assert_array_equal(x.grad, out.data)


# ---------------------------------------------------------------- adam

def test_adam_first_step():
    p = leaf([0.0])
    p.grad = np.array([1.0])
    state = ad.AdamState(learning_rate=0.001)
    ad.adam_step([p], state)
    assert abs(p.data[0] + 0.001) < 1e-9
    assert p.grad.tolist() == [0.0]


def test_adam_zero_grad_unchanged():
    p = leaf([1.5, -2.0])
    state = ad.AdamState()
    p.grad = np.array([1.0, 1.0])
    ad.adam_step([p], state)
    before = p.data.copy()
    m_before = state.m[0].copy()
    ad.adam_step([p], state)  # grads were zeroed by the first step
    np.testing.assert_array_equal(p.data, before - 0.001 * (0.9 * m_before / (1 - 0.9 ** 2))
                                  / (np.sqrt(state.v[0] / (1 - 0.999 ** 2)) + 1e-8))
    np.testing.assert_array_equal(state.m[0], 0.9 * m_before)


def test_adam_zero_grad_from_fresh_state():
    p = leaf([1.5, -2.0])
    state = ad.AdamState()
    ad.adam_step([p], state)
    assert p.data.tolist() == [1.5, -2.0]
    np.testing.assert_array_equal(state.m[0], 0.0)


def test_adam_step_counter():
    p = leaf([0.0])
    state = ad.AdamState()
    for _ in range(2):
        p.grad = np.array([1.0])
        ad.adam_step([p], state)
    assert state.step == 2
    assert state.m[0].shape == p.shape == state.v[0].shape


def test_adam_missing_grad():
    p = leaf([0.0])
    p.grad = None
    with pytest.raises(ad.StateError):
        ad.adam_step([p], ad.AdamState())


def test_adam_deterministic(rng):
    init = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 3))

    def trajectory():
        p = leaf(init.copy())
        state = ad.AdamState(learning_rate=0.01)
        out = []
        for _ in range(20):
            ad.tsum(ad.square(p - Tensor(target))).backward()
            ad.adam_step([p], state)
            out.append(p.data.copy())
        return np.stack(out)

    assert np.array_equal(trajectory(), trajectory())


# ---------------------------------------------------------------- finite_diff_check

def test_fd_sum_of_squares():
    x = Tensor([1.0, 2.0])
    assert ad.finite_diff_check(lambda t: ad.tsum(ad.square(t)), x) < 1e-8
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_fd_constant():
    x = Tensor([1.0, 2.0])
    err = ad.finite_diff_check(lambda t: Tensor(3.0), x)
    assert err == 0.0
    assert x.grad.tolist() == [0.0, 0.0]


OPS = {
    "add": lambda t, c: ad.tsum((t + c) * c),
    "mul": lambda t, c: ad.tsum(t * c),
    "scale": lambda t, c: ad.tsum(t * 2.5),
    "neg": lambda t, c: ad.tsum(-t * c),
    "square": lambda t, c: ad.tsum(ad.square(t)),
    "abs": lambda t, c: ad.tsum(ad.tabs(t + 0.0) * c),
    "leaky_relu": lambda t, c: ad.tsum(ad.leaky_relu(t, 0.2) * c),
    "dropout": lambda t, c: ad.tsum(ad.dropout(t, 0.3, True, 5) * c),
    "reshape": lambda t, c: ad.tsum(t.reshape(-1) * c.reshape(-1)),
    "transpose": lambda t, c: ad.tsum(t.transpose() * c.transpose()),
    "index": lambda t, c: ad.tsum(t[1:, ::2] * c[1:, ::2]),
    "sum_axis": lambda t, c: ad.tsum(t.sum(axis=0) * c[0]),
    "matmul": lambda t, c: ad.tsum(ad.matmul(t, c.transpose())),
    "softmax": lambda t, c: ad.tsum(ad.softmax_rows(t) * c),
    "concat": lambda t, c: ad.tsum(ad.concat_channels([t[None], c[None]]) * 1.5),
    "conv": lambda t, c: ad.tsum(ad.conv2d_same(t[None], Tensor(np.full((2, 1, 3, 3), 0.3)))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_fd_ten_inputs(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        x = Tensor(rng.normal(size=(3, 4)))
        c = Tensor(rng.normal(size=(3, 4)))
        if name == "abs":
            x.data[np.abs(x.data) < 1e-3] += 0.1  # keep away from the kink
        if name == "leaky_relu":
            x.data[np.abs(x.data) < 1e-3] += 0.1
        assert ad.finite_diff_check(lambda t: OPS[name](t, c), x) < 1e-4, name

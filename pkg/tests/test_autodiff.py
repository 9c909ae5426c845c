"""Forward values, hand-checked gradients, and finite-difference sweeps
for the differentiation core."""

import numpy as np
import pytest

from foresight import autodiff as ad
from foresight.autodiff import BatchNormState, Tensor
from foresight.errors import ConfigurationError, DimensionError, UsageError


def wide(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# -- forward values -------------------------------------------------------


def test_conv2d_ones_kernel_sums_window():
    x = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 45.0


def test_conv2d_identity_kernel_padding():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = ad.conv2d(x, Tensor(k), padding=1)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_stride_two_extent():
    x = Tensor(np.zeros((2, 3, 8, 8)))
    w = Tensor(np.zeros((5, 3, 3, 3)))
    b = Tensor(np.arange(5.0))
    out = ad.conv2d(x, w, b, stride=2, padding=1)
    assert out.shape == (2, 5, 4, 4)
    np.testing.assert_array_equal(out.data[1, :, 2, 2], np.arange(5.0))


def test_conv2d_floors_ragged_extent():
    x = Tensor(np.zeros((1, 1, 5, 5)))
    w = Tensor(np.zeros((1, 1, 2, 2)))
    assert ad.conv2d(x, w, stride=2).shape == (1, 1, 2, 2)


def test_conv2d_rejects_oversized_kernel():
    with pytest.raises(ConfigurationError):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_max_pool_picks_window_max():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = ad.max_pool2d(x, 2)
    assert out.data.reshape(()) == 4.0


def test_max_pool_tie_routes_to_first_occurrence():
    x = wide(np.ones((1, 1, 2, 2)) * 7.0)
    out = ad.max_pool2d(x, 2)
    ad.backward(out.sum())
    expected = np.zeros((1, 1, 2, 2))
    expected[0, 0, 0, 0] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_max_pool_rejects_ragged_extent():
    with pytest.raises(ConfigurationError):
        ad.max_pool2d(Tensor(np.zeros((1, 1, 3, 4))), 2)


def test_upsample_replicates_nearest():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = ad.upsample2x(x)
    expected = np.array([
        [1.0, 1.0, 2.0, 2.0],
        [1.0, 1.0, 2.0, 2.0],
        [3.0, 3.0, 4.0, 4.0],
        [3.0, 3.0, 4.0, 4.0],
    ]).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(out.data, expected)


def test_upsample_backward_sums_replicas():
    x = wide(np.arange(4.0).reshape(1, 1, 2, 2))
    ad.backward(ad.upsample2x(x).sum())
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))


def test_concat_channels_stacks_and_allows_empty():
    a = Tensor(np.ones((2, 3, 4, 4)))
    b = Tensor(np.zeros((2, 0, 4, 4)))
    c = Tensor(np.full((2, 2, 4, 4), 5.0))
    out = ad.concat_channels(a, b, c)
    assert out.shape == (2, 5, 4, 4)
    np.testing.assert_array_equal(out.data[:, 3:], c.data)


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(DimensionError):
        ad.concat_channels(Tensor(np.zeros((1, 1, 4, 4))),
                           Tensor(np.zeros((1, 1, 2, 2))))


def test_batch_norm_training_standardizes():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(5.0, 3.0, size=(4, 2, 8, 8)))
    bn_state = BatchNormState(2, dtype=np.float64)
    gamma = wide(np.ones(2), grad=False)
    beta = wide(np.zeros(2), grad=False)
    out = ad.batch_norm2d(x, gamma, beta, bn_state, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, rtol=1e-5)


def test_batch_norm_constant_input_returns_beta():
    x = Tensor(np.full((2, 3, 4, 4), 9.0))
    state = BatchNormState(3)
    gamma = Tensor(np.ones(3))
    beta = Tensor(np.array([1.0, -2.0, 0.5]))
    out = ad.batch_norm2d(x, gamma, beta, state, training=True)
    np.testing.assert_allclose(
        out.data, np.broadcast_to(beta.data[None, :, None, None], x.shape),
        atol=1e-6)


def test_batch_norm_eval_uses_running_stats():
    state = BatchNormState(1, dtype=np.float64)
    state.running_mean[:] = 2.0
    state.running_var[:] = 4.0
    x = Tensor(np.full((1, 1, 2, 2), 6.0))
    out = ad.batch_norm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                          state, training=False)
    np.testing.assert_allclose(out.data, (6.0 - 2.0) / np.sqrt(4.0 + 1e-5),
                               rtol=1e-6)


def test_batch_norm_momentum_update():
    state = BatchNormState(1, dtype=np.float64)
    x = Tensor(np.full((1, 1, 2, 2), 10.0), dtype=np.float64)
    ad.batch_norm2d(x, wide(np.ones(1), grad=False), wide(np.zeros(1), grad=False),
                    state, training=True, momentum=0.1)
    np.testing.assert_allclose(state.running_mean, [1.0])
    np.testing.assert_allclose(state.running_var, [0.9])


def test_relu_and_sigmoid_values():
    x = Tensor(np.array([-2.0, 0.0, 3.0]))
    np.testing.assert_array_equal(ad.relu(x).data, [0.0, 0.0, 3.0])
    s = ad.sigmoid(Tensor(np.array([0.0])))
    np.testing.assert_allclose(s.data, [0.5])


def test_sigmoid_gradient_at_zero():
    x = wide([0.0])
    ad.backward(ad.sigmoid(x).sum())
    np.testing.assert_allclose(x.grad, [0.25])


def test_sigmoid_extreme_inputs_stay_finite():
    x = Tensor(np.array([-500.0, 500.0]))
    out = ad.sigmoid(x)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)


def test_relu_subgradient_zero_at_kink():
    x = wide([0.0, -1.0, 2.0])
    ad.backward(ad.relu(x).sum())
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_global_avg_pool_value_and_grad():
    x = wide(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = ad.global_avg_pool(x)
    np.testing.assert_allclose(out.data, [[2.5]])
    ad.backward(out.sum())
    np.testing.assert_allclose(x.grad, np.full((1, 1, 2, 2), 0.25))


def test_linear_value():
    x = Tensor(np.array([[1.0, 2.0]]))
    w = Tensor(np.array([[3.0, 4.0]]))
    out = ad.linear(x, w)
    np.testing.assert_allclose(out.data, [[11.0]])


def test_channel_scale_value():
    x = Tensor(np.ones((1, 2, 2, 2)))
    g = Tensor(np.array([[2.0, 0.5]]))
    out = ad.channel_scale(x, g)
    np.testing.assert_array_equal(out.data[0, 0], np.full((2, 2), 2.0))
    np.testing.assert_array_equal(out.data[0, 1], np.full((2, 2), 0.5))


def test_elementwise_shape_mismatch_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros(3)) + Tensor(np.zeros(4))


# -- backward bookkeeping --------------------------------------------------


def test_sum_backward_is_ones():
    x = wide(np.arange(6.0).reshape(2, 3))
    ad.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_gradient():
    x = wide([1.0, 2.0])
    ad.backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_double_backward_accumulates_exactly_twice():
    x = wide([1.0, 2.0])
    loss = (x * x).sum()
    ad.backward(loss)
    first = x.grad.copy()
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, 2.0 * first)


def test_shared_node_fanout_accumulates():
    x = wide([3.0])
    y = x * x        # dy/dx = 2x
    loss = (y + y).sum()   # d/dx = 4x = 12
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [12.0])


def test_backward_requires_scalar():
    x = wide(np.ones(3))
    with pytest.raises(UsageError):
        ad.backward(x * 2.0)


def test_no_grad_builds_no_graph():
    x = wide([1.0])
    with ad.no_grad():
        y = (x * x).sum()
    assert y._vjp is None and y._parents == ()


def test_scalar_broadcast_allowed_array_broadcast_rejected():
    x = Tensor(np.ones((2, 2)))
    assert (x * 3.0).data[0, 0] == 3.0
    with pytest.raises(DimensionError):
        x + np.ones(2)


# -- finite-difference sweeps ----------------------------------------------


def test_gradcheck_linear_tight():
    rng = np.random.default_rng(11)
    for seed in range(5):
        x = wide(rng.standard_normal((3, 4)))
        w = wide(rng.standard_normal((2, 4)))
        b = wide(rng.standard_normal(2))
        err = ad.gradcheck(ad.linear, [x, w, b], seed=seed)
        assert err < 1e-8, f"seed {seed}: {err}"


def test_gradcheck_conv2d():
    rng = np.random.default_rng(7)
    for seed in range(5):
        x = wide(rng.standard_normal((2, 3, 6, 6)))
        w = wide(rng.standard_normal((4, 3, 3, 3)))
        b = wide(rng.standard_normal(4))
        err = ad.gradcheck(
            lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1),
            [x, w, b], seed=seed, max_coords=40)
        assert err < 1e-4, f"seed {seed}: {err}"


def test_gradcheck_conv2d_strided():
    rng = np.random.default_rng(19)
    x = wide(rng.standard_normal((1, 2, 8, 8)))
    w = wide(rng.standard_normal((3, 2, 3, 3)))
    err = ad.gradcheck(
        lambda x, w: ad.conv2d(x, w, stride=2, padding=1),
        [x, w], max_coords=40)
    assert err < 1e-4


def test_gradcheck_relu_away_from_kink():
    rng = np.random.default_rng(5)
    for seed in range(5):
        vals = rng.standard_normal(40)
        vals = np.where(np.abs(vals) < 0.1, 0.5, vals)
        x = wide(vals)
        err = ad.gradcheck(ad.relu, [x], seed=seed)
        assert err < 1e-6, f"seed {seed}: {err}"


def test_gradcheck_sigmoid():
    rng = np.random.default_rng(13)
    x = wide(rng.standard_normal(30))
    assert ad.gradcheck(ad.sigmoid, [x]) < 1e-8


def test_gradcheck_max_pool_distinct_entries():
    rng = np.random.default_rng(2)
    x = wide(rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8))
    assert ad.gradcheck(lambda t: ad.max_pool2d(t, 2), [x]) < 1e-6


def test_gradcheck_upsample():
    rng = np.random.default_rng(23)
    x = wide(rng.standard_normal((2, 3, 4, 4)))
    assert ad.gradcheck(ad.upsample2x, [x], max_coords=40) < 1e-8


def test_gradcheck_concat():
    rng = np.random.default_rng(29)
    a = wide(rng.standard_normal((1, 2, 3, 3)))
    b = wide(rng.standard_normal((1, 3, 3, 3)))
    assert ad.gradcheck(ad.concat_channels, [a, b], max_coords=30) < 1e-8


def test_gradcheck_batch_norm_training():
    rng = np.random.default_rng(31)
    for seed in range(5):
        x = wide(rng.standard_normal((3, 2, 4, 4)) * 2.0 + 1.0)
        gamma = wide(rng.standard_normal(2) + 1.5)
        beta = wide(rng.standard_normal(2))

        def op(x, gamma, beta):
            return ad.batch_norm2d(x, gamma, beta,
                                   BatchNormState(2, dtype=np.float64),
                                   training=True)

        err = ad.gradcheck(op, [x, gamma, beta], seed=seed, max_coords=40)
        assert err < 1e-4, f"seed {seed}: {err}"


def test_gradcheck_batch_norm_eval():
    rng = np.random.default_rng(37)
    state = BatchNormState(2, dtype=np.float64)
    state.running_mean[:] = [0.3, -0.2]
    state.running_var[:] = [1.5, 0.7]
    x = wide(rng.standard_normal((2, 2, 3, 3)))
    gamma = wide(rng.standard_normal(2))
    beta = wide(rng.standard_normal(2))
    err = ad.gradcheck(
        lambda x, g, b: ad.batch_norm2d(x, g, b, state, training=False),
        [x, gamma, beta])
    assert err < 1e-8


def test_gradcheck_global_avg_pool():
    rng = np.random.default_rng(41)
    x = wide(rng.standard_normal((2, 3, 4, 4)))
    assert ad.gradcheck(ad.global_avg_pool, [x], max_coords=30) < 1e-8


def test_gradcheck_channel_scale():
    rng = np.random.default_rng(43)
    x = wide(rng.standard_normal((2, 3, 4, 4)))
    g = wide(rng.standard_normal((2, 3)))
    assert ad.gradcheck(ad.channel_scale, [x, g], max_coords=30) < 1e-8


def test_gradcheck_elementwise_chain():
    rng = np.random.default_rng(47)
    a = wide(rng.standard_normal((3, 3)))
    b = wide(rng.standard_normal((3, 3)))
    err = ad.gradcheck(lambda a, b: (a * b + a - b) * 0.5, [a, b])
    assert err < 1e-8


# -- precision plumbing -----------------------------------------------------


def test_precision_context_switches_default():
    with ad.precision("wide"):
        t = Tensor([1, 2, 3])
        assert t.dtype == np.float64
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32


def test_ops_preserve_float32():
    x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((2, 1, 3, 3), dtype=np.float32))
    out = ad.conv2d(x, w, padding=1)
    assert out.dtype == np.float32
    ad.backward(out.sum())
    assert x.grad.dtype == np.float32


def test_gradcheck_rejects_float32():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(UsageError):
        ad.gradcheck(ad.relu, [x])

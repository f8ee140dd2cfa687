import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recalnet import ops
from recalnet.gradcheck import OP_NAMES, run_op
from recalnet.nn import ConvSpec
from recalnet.tensor import ConfigError, Tensor, UsageError


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


def test_conv_weight_count_3x3_c4_p2():
    assert ConvSpec(4, 2, kernel=(3, 3)).weight_count == 72


def test_conv_identity_1x1_grouped():
    x = np.random.default_rng(0).normal(size=(2, 5, 4, 3))
    w = np.ones((5, 1, 1, 1))
    out = ops.conv2d(t(x), t(w), t(np.zeros(5)), groups=5)
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_kernel_center_and_corner():
    out = ops.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[1, 1] == 9
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4


def test_conv_output_size_stride_and_padding():
    x = t(np.zeros((1, 3, 9, 7)))
    out = ops.conv2d(x, t(np.zeros((4, 3, 3, 3))), stride=2, padding=0)
    assert out.shape == (1, 4, 4, 3)


def test_conv_channel_mismatch_names_dimension():
    with pytest.raises(ConfigError, match="channel"):
        ops.conv2d(t(np.zeros((1, 3, 4, 4))), t(np.zeros((2, 4, 3, 3))), padding=1)


def test_conv_against_direct_summation():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = ops.conv2d(t(x), t(w), t(b), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for p in range(4):
            for i in range(5):
                for j in range(6):
                    ref[n, p, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[p]) + b[p]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@given(g=st.sampled_from([1, 2, 4]), cin_per=st.integers(1, 2), cout_per=st.integers(1, 2),
       seed=st.integers(0, 2**16))
@settings(max_examples=20, deadline=None)
def test_grouped_conv_equals_independent_convs(g, cin_per, cout_per, seed):
    rng = np.random.default_rng(seed)
    cin, cout = g * cin_per, g * cout_per
    x = rng.normal(size=(2, cin, 5, 5))
    w = rng.normal(size=(cout, cin_per, 3, 3))
    grouped = ops.conv2d(t(x), t(w), padding=1, groups=g).data
    parts = [ops.conv2d(t(x[:, k * cin_per:(k + 1) * cin_per]), t(w[k * cout_per:(k + 1) * cout_per]),
                        padding=1).data for k in range(g)]
    np.testing.assert_allclose(grouped, np.concatenate(parts, axis=1), rtol=1e-12, atol=1e-12)


def test_avg_pool_examples():
    x = t(np.arange(1, 10).reshape(1, 1, 3, 3))
    out = ops.avg_pool(x, 3).data[0, 0]
    assert out[1, 1] == pytest.approx(5.0, abs=1e-15)
    assert out[0, 0] == pytest.approx(12 / 9, abs=1e-15)


@pytest.mark.parametrize("k", [3, 5, 7])
def test_avg_pool_same_shape_and_constant_interior(k):
    x = t(np.full((2, 3, 11, 9), 2.5))
    out = ops.avg_pool(x, k).data
    assert out.shape == x.shape
    assert out[0, 0, 5, 4] == pytest.approx(2.5)


def test_avg_pool_even_kernel_rejected():
    with pytest.raises(ConfigError):
        ops.avg_pool(t(np.zeros((1, 1, 4, 4))), 4)


def test_global_avg_pool():
    x = t(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2), grad=True)
    out = ops.global_avg_pool(x)
    assert out.shape == (1, 1, 1, 1) and out.item() == 4.0
    out.backward()
    np.testing.assert_allclose(x.grad, np.full((1, 1, 2, 2), 0.25))


def test_global_avg_pool_empty_rejected():
    with pytest.raises(ConfigError):
        ops.global_avg_pool(t(np.zeros((1, 1, 0, 3))))


def test_max_pool2():
    assert ops.max_pool2(t(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))).item() == 4.0
    np.testing.assert_array_equal(ops.max_pool2(t(np.full((1, 2, 4, 6), 3.0))).data, np.full((1, 2, 2, 3), 3.0))
    with pytest.raises(ConfigError):
        ops.max_pool2(t(np.zeros((1, 1, 3, 4))))


def test_bilinear_half_pixel_row():
    out = ops.bilinear_upsample2(t(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))).data
    assert out.shape == (1, 1, 2, 4)
    np.testing.assert_allclose(out[0, 0], [[0, 0.5, 1.5, 2]] * 2, atol=1e-15)


def test_bilinear_constant_exact():
    out = ops.bilinear_upsample2(t(np.full((2, 3, 5, 3), 0.7))).data
    assert out.shape == (2, 3, 10, 6)
    assert np.all(out == 0.7)


def test_relu_mul_concat():
    np.testing.assert_array_equal(ops.relu(t(np.array([-1.0, 2.0]).reshape(1, 1, 1, 2))).data.ravel(), [0, 2])
    x = np.random.default_rng(0).normal(size=(2, 4, 3, 3))
    np.testing.assert_array_equal(ops.mul(t(x), t(np.ones((2, 1, 3, 3)))).data, x)
    assert ops.channel_concat([t(np.zeros((2, 3, 4, 4))), t(np.zeros((2, 5, 4, 4)))]).shape == (2, 8, 4, 4)
    with pytest.raises(ConfigError):
        ops.mul(t(np.zeros((2, 4, 3, 3))), t(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ConfigError):
        ops.channel_concat([t(np.zeros((2, 3, 4, 4))), t(np.zeros((2, 3, 4, 5)))])


def test_interleave_order():
    ch = t(np.stack([np.full((2, 2), 10.0), np.full((2, 2), 20.0)])[None])
    re = t(np.stack([np.full((2, 2), 1.0), np.full((2, 2), 2.0)])[None])
    out = ops.interleave_channels(ch, re).data[0, :, 0, 0]
    np.testing.assert_array_equal(out, [10, 1, 20, 2])


def test_layer_norm_moments():
    x = t(np.random.default_rng(3).normal(3.0, 2.0, size=(3, 4, 5, 5)))
    out = ops.layer_norm(x, t(np.ones(4)), t(np.zeros(4))).data
    np.testing.assert_allclose(out.mean(axis=(1, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(1, 2, 3)), 1, atol=1e-5)


def test_batch_norm_zero_variance_channel():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    x[:, 1] = 5.0
    out = ops.batch_norm(t(x), t(np.ones(3)), t(np.zeros(3)), np.zeros(3), np.ones(3), training=True).data
    assert np.all(out[:, 1] == 0)
    assert np.all(np.isfinite(out))


def test_batch_norm_running_stats_and_eval():
    x = np.random.default_rng(0).normal(2.0, 3.0, size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    ops.batch_norm(t(x), t(np.ones(2)), t(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
    out = ops.batch_norm(t(x), t(np.ones(2)), t(np.zeros(2)), rm, rv, training=False).data
    np.testing.assert_allclose(out, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))


def test_backward_sum_and_square():
    x = t(np.random.default_rng(0).normal(size=(1, 2, 3, 3)), grad=True)
    ops.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))
    x.zero_grad()
    ops.sum_all(ops.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_usage_errors():
    x = t(np.ones((1, 1, 2, 2)), grad=True)
    with pytest.raises(UsageError):
        ops.relu(x).backward()
    root = ops.sum_all(x)
    root.backward()
    with pytest.raises(UsageError):
        root.backward()
    # stale leaf gradient is rejected unless accumulation is requested
    with pytest.raises(UsageError):
        ops.sum_all(x).backward()
    ops.sum_all(x).backward(accumulate=True)
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))


def test_ops_deterministic():
    rng = np.random.default_rng(7)
    x, w = rng.normal(size=(2, 4, 8, 8)), rng.normal(size=(4, 2, 3, 3))

    def run():
        y = ops.conv2d(t(x), t(w), padding=1, groups=2)
        return ops.bilinear_upsample2(ops.avg_pool(ops.relu(y), 5)).data

    assert np.array_equal(run(), run())


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradcheck(name):
    res = run_op(name)
    assert res.passed, res.line()


def test_gradcheck_catches_wrong_backward():
    from recalnet.gradcheck import check_gradients
    from recalnet.tensor import accumulate_grad, make_result

    def bad_square(x):
        # derivative off by 1%
        return make_result(x.data ** 2, (x,), lambda g: accumulate_grad(x, g * 2.02 * x.data))

    x = t(np.random.default_rng(0).normal(size=(1, 2, 3, 3)), grad=True)
    res = check_gradients("bad", lambda: bad_square(x), {"x": x})
    assert not res.passed
    assert res.max_rel_err > 5e-3


def test_gradcheck_agreed_zero_for_bias_before_batch_norm():
    from recalnet.gradcheck import check_gradients

    rng = np.random.default_rng(0)
    x, w, b = t(rng.normal(size=(2, 2, 4, 4))), t(rng.normal(size=(3, 2, 3, 3))), t(rng.normal(size=3), grad=True)

    def fn():
        y = ops.conv2d(x, w, b, padding=1)
        return ops.batch_norm(y, t(np.ones(3)), t(np.zeros(3)), np.zeros(3), np.ones(3), training=True)

    res = check_gradients("bias-bn", fn, {"b": b})
    assert res.passed and res.zeros == 3

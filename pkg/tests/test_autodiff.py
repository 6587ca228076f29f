import numpy as np
import pytest

from awsup import autodiff as ad
from awsup.errors import ContractError, DimensionError, TrainingError

from oracles import conv_loops, grad_check, upsample_1d


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- conv2d

def test_conv_1x1_scaling():
    out = ad.conv2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), np.array([[[[2.0]]]]), np.zeros(1))
    np.testing.assert_array_equal(out.data[0], [[2, 4], [6, 8]])


def test_conv_delta_kernel_is_identity():
    x = rng().normal(size=(1, 6, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ad.conv2d(x, k).data, x)


def test_conv_matches_loop_oracle():
    r = rng(1)
    x, w, b = r.normal(size=(3, 5, 5)), r.normal(size=(2, 3, 3, 3)), r.normal(size=2)
    np.testing.assert_allclose(ad.conv2d(x, w, b).data, conv_loops(x, w, b), rtol=0, atol=1e-12)


def test_conv_batched_equals_per_image():
    r = rng(2)
    x, w = r.normal(size=(2, 3, 6, 6)), r.normal(size=(4, 2, 3, 3))
    batched = ad.conv2d(x, w).data
    for n in range(3):
        np.testing.assert_allclose(batched[:, n], ad.conv2d(x[:, n], w).data, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError, match="axis 0"):
        ad.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_conv_even_kernel_rejected():
    with pytest.raises(DimensionError):
        ad.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)))


def test_conv_grads_vs_finite_differences():
    r = rng(3)
    x = ad.parameter(r.normal(size=(2, 5, 4)))
    w = ad.parameter(r.normal(size=(3, 2, 3, 3)))
    b = ad.parameter(r.normal(size=3))
    wt = r.normal(size=(3, 5, 4))
    assert grad_check(lambda: ad.sum(ad.mul(ad.conv2d(x, w, b), wt)), [x, w, b]) <= 1e-6


# ---------------------------------------------------------------- resampling

def test_upsample_constant():
    out = ad.bilinear_upsample2x(np.full((1, 1, 1), 5.0)).data
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 5.0))


def test_upsample_align_corners_closed_form():
    x = np.array([[[0.0, 1.0]]])
    out = ad.bilinear_upsample2x(x).data[0, 0]
    np.testing.assert_allclose(out, [0, 1 / 3, 2 / 3, 1], atol=1e-15)


def test_upsample_separable_oracle():
    x = rng(4).normal(size=(1, 3, 4))
    rows = np.stack([upsample_1d(r, 8) for r in x[0]])
    full = np.stack([upsample_1d(c, 6) for c in rows.T]).T
    np.testing.assert_allclose(ad.bilinear_upsample2x(x).data[0], full, atol=1e-12)


def test_upsample_and_pool_grads():
    r = rng(5)
    x = ad.parameter(r.normal(size=(2, 4, 6)))
    wt = r.normal(size=(2, 8, 12))
    assert grad_check(lambda: ad.sum(ad.mul(ad.bilinear_upsample2x(x), wt)), [x]) <= 1e-6
    wt2 = r.normal(size=(2, 2, 3))
    assert grad_check(lambda: ad.sum(ad.mul(ad.maxpool2(x), wt2)), [x]) <= 1e-6


def test_maxpool_odd_size_rejected():
    with pytest.raises(DimensionError):
        ad.maxpool2(np.zeros((1, 3, 4)))


# ---------------------------------------------------------------- elementwise

def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(ad.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert ad.sigmoid(np.array(0.0)).data == 0.5
    s = ad.sigmoid(np.array([-30.0, 30.0, -700.0, 700.0, -1e4, 1e4])).data
    assert np.all(np.isfinite(s))
    assert 0 < s[0] < s[1] < 1
    assert np.all((s > 0) & (s < 1))


def test_mul_grads_4x4():
    r = rng(6)
    a, b = ad.parameter(r.normal(size=(4, 4))), ad.parameter(r.normal(size=(4, 4)))
    assert grad_check(lambda: ad.sum(ad.mul(ad.mul(a, b), a)), [a, b]) <= 1e-6


def test_broadcast_grads():
    r = rng(7)
    a, b = ad.parameter(r.normal(size=(3, 1, 4))), ad.parameter(r.normal(size=(2, 1)))
    wt = r.normal(size=(3, 2, 4))
    fn = lambda: ad.sum(ad.mul(ad.div(ad.add(a, b), ad.add(ad.mul(b, b), 1.0)), wt))
    assert grad_check(fn, [a, b]) <= 1e-6


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.add(np.zeros((2, 3)), np.zeros((4, 3)))


def test_log_sigmoid_sub_grads():
    r = rng(8)
    a = ad.parameter(r.uniform(0.5, 2.0, size=(3, 3)))
    fn = lambda: ad.sum(ad.sub(ad.log(a), ad.sigmoid(ad.mul(a, a))))
    assert grad_check(fn, [a]) <= 1e-6


def test_concat_reshape_mean_grads():
    r = rng(9)
    a, b = ad.parameter(r.normal(size=(2, 3, 3))), ad.parameter(r.normal(size=(1, 3, 3)))
    wt = r.normal(size=(9, 3))
    fn = lambda: ad.mean(ad.mul(ad.reshape(ad.concat([a, b], axis=0), (9, 3)), wt))
    assert grad_check(fn, [a, b]) <= 1e-6


# ---------------------------------------------------------------- softmax / CE

def test_softmax_values():
    out = ad.softmax_channel(np.zeros((2, 1, 1))).data
    np.testing.assert_array_equal(out[:, 0, 0], [0.5, 0.5])
    z = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(ad.softmax_channel(z).data[:, 0, 0], e / e.sum(), atol=1e-12)


def test_softmax_shift_invariance_and_simplex():
    z = rng(10).normal(size=(4, 5, 5))
    a = ad.softmax_channel(z).data
    np.testing.assert_allclose(ad.softmax_channel(z + 123.4).data, a, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(a > 0)


def test_softmax_grads():
    r = rng(11)
    z = ad.parameter(r.normal(size=(3, 4, 4)))
    wt = r.normal(size=(3, 4, 4))
    assert grad_check(lambda: ad.sum(ad.mul(ad.softmax_channel(z), wt)), [z]) <= 1e-6


def test_cross_entropy_uniform_is_log_c():
    assert ad.cross_entropy(np.zeros((3, 2, 2)), np.zeros((2, 2), int)).item() == pytest.approx(np.log(3), abs=1e-15)


def test_cross_entropy_per_pixel_oracle():
    r = rng(12)
    z = r.normal(size=(3, 4, 5))
    y = r.integers(0, 3, size=(4, 5))
    ref = 0.0
    for i in range(4):
        for j in range(5):
            col = z[:, i, j]
            ref += -(col[y[i, j]] - np.log(np.exp(col).sum()))
    assert ad.cross_entropy(z, y).item() == pytest.approx(ref / 20, abs=1e-12)
    p = ad.parameter(z)
    assert grad_check(lambda: ad.cross_entropy(p, y), [p]) <= 1e-6


def test_cross_entropy_margin_limit():
    y = np.zeros((1, 1), int)
    vals = [ad.cross_entropy(np.array([m, 0.0]).reshape(2, 1, 1), y).item() for m in (0, 2, 5, 20, 50)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-20


def test_cross_entropy_label_range():
    with pytest.raises(ContractError):
        ad.cross_entropy(np.zeros((2, 2, 2)), np.full((2, 2), 2))


# ---------------------------------------------------------------- tape

def test_sum_of_squares_grad_exact():
    x = ad.parameter(rng(13).normal(size=(3, 3)))
    with ad.Tape() as t:
        t.backward(ad.sum(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_disconnected_parameter_has_zero_grad():
    x, y = ad.parameter(np.ones(3)), ad.parameter(np.ones(3))
    with ad.Tape() as t:
        t.backward(ad.sum(x))
    assert y.grad is None or not np.any(y.grad)


def test_grads_accumulate_until_zeroed():
    x = ad.parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        with ad.Tape() as t:
            t.backward(ad.sum(ad.mul(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None or not np.any(x.grad)


def test_non_scalar_loss_rejected():
    x = ad.parameter(np.ones(3))
    with ad.Tape() as t:
        y = ad.mul(x, 2.0)
        with pytest.raises(ContractError):
            t.backward(y)


def test_no_record_skips_tape():
    x = ad.parameter(np.ones(2))
    with ad.Tape() as t:
        with ad.no_record():
            ad.mul(x, 2.0)
        assert len(t) == 0


def test_closed_tape_releases_nodes():
    x = ad.parameter(np.ones(4))
    with ad.Tape() as t:
        loss = ad.sum(ad.mul(x, x))
        assert len(t) == 2
    assert len(t) == 0
    with pytest.raises(ContractError):
        t.backward(loss)


def test_forward_replay_identical():
    r = rng(14)
    x, w = r.normal(size=(2, 3, 8, 8)), ad.parameter(r.normal(size=(3, 2, 3, 3)))
    a = ad.softmax_channel(ad.conv2d(x, w)).data
    b = ad.softmax_channel(ad.conv2d(x, w)).data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- Adam

def test_adam_zero_grad_keeps_params():
    p = ad.parameter(np.array([1.0, -2.0]))
    st = ad.AdamState([p], lr=0.1)
    ad.adam_step([p], [np.zeros(2)], st)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st.t == 1


def test_adam_first_step_is_lr_sign():
    p = ad.parameter(np.zeros(3))
    st = ad.AdamState([p], lr=0.01)
    ad.adam_step([p], [np.array([3.0, -0.5, 1e-3])], st)
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], atol=1e-6)


def test_adam_scalar_recurrence():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    p = ad.parameter(np.array([0.7]))
    st = ad.AdamState([p], lr=lr)
    g = 0.3
    theta, m, v = 0.7, 0.0, 0.0
    for t in (1, 2):
        ad.adam_step([p], [np.array([g])], st)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert p.data[0] == pytest.approx(theta, abs=1e-12)


def test_adam_non_finite_names_block():
    p = ad.parameter(np.zeros(2), name="enc0.c0.w")
    with pytest.raises(TrainingError, match="enc0.c0.w"):
        ad.adam_step([p], [np.array([np.nan, 0.0])], ad.AdamState([p]))

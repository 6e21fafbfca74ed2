import numpy as np
import pytest

from gridcodec import autodiff as ad
from gridcodec.errors import ContractError, DimensionError

from oracles import (
    GRADCHECK_CASES,
    gradcheck,
    naive_conv1d_temporal,
    naive_conv2d,
    naive_conv3d,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- conv2d


def test_conv2d_pointwise_scales():
    x = np.ones((1, 1, 3, 3))
    out = ad.conv2d(x, np.full((1, 1, 1, 1), 2.0)).data
    np.testing.assert_array_equal(out, np.full((1, 1, 3, 3), 2.0))


def test_conv2d_zero_kernel(rng):
    out = ad.conv2d(rng.standard_normal((2, 3, 5, 5)), np.zeros((4, 3, 3, 3))).data
    assert out.shape == (2, 4, 5, 5)
    assert not out.any()


def test_conv2d_matches_naive_loops(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    np.testing.assert_allclose(ad.conv2d(x, w).data, naive_conv2d(x, w), rtol=1e-12, atol=1e-12)


def test_conv2d_depthwise_matches_naive(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((3, 1, 3, 3))
    expected = np.concatenate([naive_conv2d(x[:, c:c + 1], w[c:c + 1]) for c in range(3)], axis=1)
    np.testing.assert_allclose(ad.conv2d(x, w, groups=3).data, expected, atol=1e-12)


def test_conv2d_rejects_bad_shapes(rng):
    with pytest.raises(DimensionError):
        ad.conv2d(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 3, 3)))
    with pytest.raises(DimensionError):
        ad.conv2d(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 2, 2, 2)))


# ---------------------------------------------------------------- conv1d


def test_conv1d_identity_single_frame(rng):
    x = rng.standard_normal((1, 1, 3, 3))
    out = ad.conv1d_temporal(x, np.array([[[0.0, 1.0, 0.0]]])).data
    np.testing.assert_array_equal(out, x)


def test_conv1d_constant_input_interior_scaled(rng):
    frame = rng.standard_normal((1, 1, 2, 2))
    x = np.repeat(frame, 5, axis=0)
    k = np.array([[[0.5, 1.5, -0.25]]])
    out = ad.conv1d_temporal(x, k).data
    np.testing.assert_allclose(out[1:-1], x[1:-1] * k.sum(), atol=1e-12)


def test_conv1d_matches_naive(rng):
    x = rng.standard_normal((4, 1, 2, 2))
    w = rng.standard_normal((2, 1, 3))
    np.testing.assert_allclose(ad.conv1d_temporal(x, w).data, naive_conv1d_temporal(x, w), atol=1e-12)


# ---------------------------------------------------------------- conv3d


def test_conv3d_identity_and_zero(rng):
    x = rng.standard_normal((3, 1, 4, 4))
    np.testing.assert_array_equal(ad.conv3d(x, np.ones((1, 1, 1, 1, 1))).data, x)
    assert not ad.conv3d(x, np.zeros((2, 1, 3, 3, 3))).data.any()


def test_conv3d_matches_naive(rng):
    x = rng.standard_normal((3, 1, 3, 3))
    w = rng.standard_normal((2, 1, 3, 3, 3))
    b = rng.standard_normal(2)
    np.testing.assert_allclose(ad.conv3d(x, w, b).data, naive_conv3d(x, w, b), atol=1e-12)


@pytest.mark.parametrize("phase", [(0, 0), (1, 1), (1, 0), (0, 1)])
def test_conv3d_phase_is_subsampled_full_conv(rng, phase):
    x = rng.standard_normal((3, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    full = ad.conv3d(x, w).data
    part = ad.conv3d(x, w, phase=phase).data
    np.testing.assert_allclose(part, full[:, :, phase[0]::2, phase[1]::2], atol=1e-12)


def test_conv3d_batch_equals_per_volume(rng):
    x = rng.standard_normal((3, 2, 2, 4, 5))
    w = rng.standard_normal((4, 2, 3, 3, 3))
    out = ad.conv3d(x, w, phase=(1, 1)).data
    for b in range(3):
        np.testing.assert_allclose(out[b], ad.conv3d(x[b], w, phase=(1, 1)).data, atol=1e-12)


def test_conv_is_linear(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    alpha = 0.37
    np.testing.assert_allclose(ad.conv3d(alpha * x, w).data, alpha * ad.conv3d(x, w).data, rtol=1e-13, atol=1e-13)


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
    a = ad.gelu(ad.conv2d(x, w)).data
    b = ad.gelu(ad.conv2d(x.copy(), w.copy())).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- upsampling


def test_upsample_nearest():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
    np.testing.assert_array_equal(ad.upsample_nearest2x(x).data[0, 0], expected)


def test_upsample_constant_and_downsample_roundtrip(rng):
    const = np.full((2, 3, 4, 5), 0.3)
    np.testing.assert_array_equal(ad.upsample_nearest2x(const).data, np.full((2, 3, 8, 10), 0.3))
    x = rng.standard_normal((2, 1, 3, 3))
    up = ad.upsample_nearest2x(x).data
    down = up.reshape(2, 1, 3, 2, 3, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(down, x, atol=1e-15)


# ---------------------------------------------------------------- backward


def test_grad_of_sum_is_ones(rng):
    x = ad.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(x)
    (g,) = ad.backward(tape, loss, [x])
    np.testing.assert_array_equal(g, np.ones((2, 3, 4)))


def test_grad_of_mse_self_is_zero(rng):
    x = ad.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.mse_loss(x, x)
    (g,) = ad.backward(tape, loss, [x])
    assert not g.any()


def test_nonparticipating_leaf_gets_zero(rng):
    x = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    y = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(ad.square(x))
    gx, gy = ad.backward(tape, loss, [x, y])
    np.testing.assert_allclose(gx, 2 * x.data)
    assert gy.shape == (3,) and not gy.any()


def test_backward_rejects_nonscalar(rng):
    x = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, 2.0)
    with pytest.raises(ContractError):
        ad.backward(tape, y)


def test_no_recording_outside_tape(rng):
    x = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    y = ad.mul(x, 2.0)
    assert not y.requires_grad


def test_each_node_visited_once_with_shared_inputs(rng):
    x = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    with ad.Tape() as tape:
        h = ad.mul(x, x)
        loss = ad.sum(ad.add(h, h))
    (g,) = ad.backward(tape, loss, [x])
    np.testing.assert_allclose(g, 4 * x.data)


def test_two_layer_conv_net_finite_difference(rng):
    def net(x, w1, w2):
        return ad.conv2d(ad.gelu(ad.conv2d(x, w1)), w2)

    err = gradcheck(net, [rng.standard_normal((2, 2, 5, 5)), 0.5 * rng.standard_normal((3, 2, 3, 3)),
                          0.5 * rng.standard_normal((2, 3, 3, 3))], rng)
    assert err < 1e-4


@pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
def test_op_gradients_match_finite_differences(name, rng):
    op, gen = GRADCHECK_CASES[name]
    for _ in range(3):
        assert gradcheck(op, gen(rng), rng) < 1e-4


def test_ste_round_passes_gradient_and_rounds_half_away():
    x = ad.Tensor(np.array([0.5, -0.5, 1.49, -2.5, 300.0]), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.ste_round(x)
        loss = ad.sum(y)
    np.testing.assert_array_equal(y.data, [1, -1, 1, -3, 255])
    (g,) = ad.backward(tape, loss, [x])
    np.testing.assert_array_equal(g, np.ones(5))


def test_gaussian_bits_value():
    bits = ad.gaussian_bits(np.zeros(1), np.zeros(1), np.ones(1)).data
    # P(-0.5 < N(0,1) < 0.5) = 0.382925
    np.testing.assert_allclose(bits, -np.log2(0.38292492254802624), rtol=1e-12)


def test_gaussian_bits_floor():
    bits = ad.gaussian_bits(np.array([200.0]), np.zeros(1), np.full(1, 0.05)).data
    assert bits[0] == pytest.approx(16.0)


def test_float32_stays_float32(rng):
    x = rng.standard_normal((2, 2, 4, 4)).astype(np.float32)
    w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    assert ad.gelu(ad.conv2d(x, w)).dtype == np.float32


@pytest.mark.parametrize("H,W,ci,co", [(6, 8, 2, 4), (5, 7, 2, 4), (1, 2, 2, 4), (5, 6, 5, 2), (3, 1, 4, 1)])
def test_polyphase_terms_sum_to_dense_conv(H, W, ci, co):
    rng = np.random.default_rng(H * W)
    x = rng.standard_normal((2, 3, ci, H, W))
    w = rng.standard_normal((co, ci, 3, 3, 3))
    dense = ad.conv3d(x, w).data
    for r in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        out_hw = (len(range(r[0], H, 2)), len(range(r[1], W, 2)))
        total = np.zeros(dense[..., r[0]::2, r[1]::2].shape)
        for s in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            xs = x[..., s[0]::2, s[1]::2]
            if xs.size:
                total += ad.conv3d_polyphase(xs, w, r, s, out_hw).data
        np.testing.assert_allclose(total, dense[..., r[0]::2, r[1]::2], rtol=1e-10, atol=1e-10)

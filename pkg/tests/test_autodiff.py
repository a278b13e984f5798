"""Engine tests: op semantics, gradient checks against finite differences,
tape/backward laws, and the Adam step."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentdepth import autodiff as ad
from latentdepth import nn
from latentdepth.errors import ConfigError, DimensionError, UsageError

from conftest import finite_difference, rel_error


def t64(x, requires_grad=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_scalar_kernel_scales():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = t64([[[[2.0]]]])
    b = t64([0.0])
    out = ad.conv2d(x, w, b, stride=1, padding=0)
    np.testing.assert_allclose(out.data, [[[[2.0, 4.0], [6.0, 8.0]]]])


def test_conv2d_all_ones_matches_direct_summation():
    x = t64(np.ones((1, 1, 3, 3)))
    w = t64(np.ones((1, 1, 3, 3)))
    b = t64([0.0])
    out = ad.conv2d(x, w, b)
    # independent oracle: direct summation over the receptive field
    expected = sum(1.0 * 1.0 for _ in range(9))
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == expected == 9.0


def test_conv2d_channel_mismatch_names_axes():
    x = t64(np.zeros((1, 3, 4, 4)))
    w = t64(np.zeros((2, 4, 3, 3)))
    b = t64(np.zeros(2))
    with pytest.raises(DimensionError, match="3"):
        ad.conv2d(x, w, b, padding=1)


def test_conv2d_grad_weight_matches_finite_differences():
    gen = np.random.default_rng(0)
    x = t64(gen.standard_normal((2, 3, 5, 5)))
    w = t64(gen.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = t64(gen.standard_normal(4), requires_grad=True)

    with ad.Tape() as tape:
        loss = ad.sum_all(ad.conv2d(x, w, b, stride=1, padding=1))
    ad.backward(loss, tape)

    def loss_fn():
        return float(ad.conv2d(x, w, b, stride=1, padding=1).data.sum())

    fd_w = finite_difference(loss_fn, w.data)
    assert rel_error(w.grad, fd_w) < 1e-4
    fd_b = finite_difference(loss_fn, b.data)
    assert rel_error(b.grad, fd_b) < 1e-4


# ---------------------------------------------------------------------------
# linear


def test_linear_identity_weight_is_identity():
    x = t64([[1.0, -2.0], [0.5, 3.0]])
    w = t64(np.eye(2))
    b = t64(np.zeros(2))
    out = ad.linear(x, w, b)
    np.testing.assert_array_equal(out.data, x.data)


def test_linear_hand_matrix_product():
    x = t64([[1.0, 2.0]])
    w = t64([[1.0, 1.0], [0.0, 1.0]])
    b = t64([0.0, 0.0])
    out = ad.linear(x, w, b)
    np.testing.assert_allclose(out.data, [[3.0, 2.0]])


def test_linear_gradcheck():
    gen = np.random.default_rng(1)
    x = t64(gen.standard_normal((3, 4)), requires_grad=True)
    w = t64(gen.standard_normal((2, 4)), requires_grad=True)
    b = t64(gen.standard_normal(2), requires_grad=True)
    tgt = t64(gen.standard_normal((3, 2)))

    with ad.Tape() as tape:
        loss = ad.mse_loss(ad.linear(x, w, b), tgt)
    ad.backward(loss, tape)

    def loss_fn():
        return float(np.mean((x.data @ w.data.T + b.data - tgt.data) ** 2))

    for tensor in (x, w, b):
        assert rel_error(tensor.grad, finite_difference(loss_fn, tensor.data)) < 1e-4


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.linear(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))), t64(np.zeros(4)))


# ---------------------------------------------------------------------------
# silu


def test_silu_values():
    x = t64([0.0, 50.0, -50.0])
    out = ad.silu(x)
    assert out.data[0] == 0.0
    np.testing.assert_allclose(out.data[1], 50.0, rtol=1e-12)
    np.testing.assert_allclose(out.data[2], 0.0, atol=1e-12)


def test_silu_gradient_at_one():
    x = t64([1.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.silu(x))
    ad.backward(loss, tape)

    def loss_fn():
        return float((x.data / (1.0 + np.exp(-x.data))).sum())

    assert rel_error(x.grad, finite_difference(loss_fn, x.data)) < 1e-4


# ---------------------------------------------------------------------------
# group_norm


def test_group_norm_constant_input_gives_zeros():
    x = t64(np.full((2, 4, 3, 3), 7.0))
    gamma = t64(np.ones(4))
    beta = t64(np.zeros(4))
    out = ad.group_norm(x, 2, gamma, beta)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_group_norm_standardizes_per_group():
    gen = np.random.default_rng(2)
    x = t64(gen.standard_normal((2, 6, 4, 4)) * 3.0 + 1.0)
    out = ad.group_norm(x, 3, t64(np.ones(6)), t64(np.zeros(6)), eps=1e-12)
    grouped = out.data.reshape(2, 3, -1)
    np.testing.assert_allclose(grouped.mean(axis=2), 0.0, atol=1e-5)
    np.testing.assert_allclose(grouped.var(axis=2), 1.0, atol=1e-5)


def test_group_norm_requires_divisible_channels():
    x = t64(np.zeros((1, 5, 2, 2)))
    with pytest.raises(ConfigError):
        ad.group_norm(x, 2, t64(np.ones(5)), t64(np.zeros(5)))


def test_group_norm_gradcheck():
    gen = np.random.default_rng(3)
    x = t64(gen.standard_normal((2, 4, 3, 3)), requires_grad=True)
    gamma = t64(gen.standard_normal(4) + 1.0, requires_grad=True)
    beta = t64(gen.standard_normal(4), requires_grad=True)
    tgt = t64(gen.standard_normal((2, 4, 3, 3)))

    with ad.Tape() as tape:
        loss = ad.mse_loss(ad.group_norm(x, 2, gamma, beta), tgt)
    ad.backward(loss, tape)

    def loss_fn():
        xg = x.data.reshape(2, 2, -1)
        xhat = (xg - xg.mean(axis=2, keepdims=True)) / np.sqrt(xg.var(axis=2, keepdims=True) + 1e-5)
        y = xhat.reshape(2, 4, 3, 3) * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
        return float(np.mean((y - tgt.data) ** 2))

    for tensor in (x, gamma, beta):
        assert rel_error(tensor.grad, finite_difference(loss_fn, tensor.data)) < 1e-4


# ---------------------------------------------------------------------------
# upsample / concat / slice


def test_upsample_replicates_pixel():
    x = t64(np.array([[[[1.0]]]]))
    out = ad.upsample_nearest2x(x)
    np.testing.assert_array_equal(out.data, [[[[1.0, 1.0], [1.0, 1.0]]]])


def test_upsample_backward_sums_blocks():
    x = t64(np.ones((1, 1, 2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.upsample_nearest2x(x))
    ad.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))


def test_upsample_then_stride2_average_is_identity():
    gen = np.random.default_rng(4)
    x = gen.standard_normal((2, 3, 4, 4))
    up = ad.upsample_nearest2x(t64(x)).data
    down = up.reshape(2, 3, 4, 2, 4, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(down, x, rtol=1e-12)


def test_concat_with_zero_channels_is_identity():
    x = t64(np.ones((1, 3, 2, 2)))
    empty = t64(np.zeros((1, 0, 2, 2)))
    out = ad.concat_channels(x, empty)
    np.testing.assert_array_equal(out.data, x.data)


def test_concat_shape_law_and_slice_roundtrip():
    gen = np.random.default_rng(5)
    a = t64(gen.standard_normal((1, 4, 8, 8)))
    b = t64(gen.standard_normal((1, 4, 8, 8)))
    out = ad.concat_channels(a, b)
    assert out.shape == (1, 8, 8, 8)
    np.testing.assert_array_equal(ad.slice_channels(out, 0, 4).data, a.data)
    np.testing.assert_array_equal(ad.slice_channels(out, 4, 8).data, b.data)


def test_concat_spatial_mismatch():
    with pytest.raises(DimensionError):
        ad.concat_channels(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 2, 5, 4))))


def test_concat_backward_routes_to_sources():
    a = t64(np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2), requires_grad=True)
    b = t64(np.arange(12, dtype=np.float64).reshape(1, 3, 2, 2) + 100.0, requires_grad=True)
    with ad.Tape() as tape:
        cat = ad.concat_channels(a, b)
        loss = ad.sum_all(ad.mul(cat, cat))
    ad.backward(loss, tape)
    # d/dx sum(cat^2) = 2*cat, split back to the exact source channels
    np.testing.assert_allclose(a.grad, 2.0 * a.data)
    np.testing.assert_allclose(b.grad, 2.0 * b.data)


# ---------------------------------------------------------------------------
# mse_loss and backward laws


def test_mse_zero_for_equal_inputs():
    x = t64(np.ones((3, 3)))
    assert ad.mse_loss(x, t64(np.ones((3, 3)))).item() == 0.0


def test_mse_hand_value():
    assert ad.mse_loss(t64([0.0, 0.0]), t64([1.0, 1.0])).item() == 1.0


def test_mse_gradient_closed_form():
    gen = np.random.default_rng(6)
    p = t64(gen.standard_normal(5), requires_grad=True)
    tgt = t64(gen.standard_normal(5))
    with ad.Tape() as tape:
        loss = ad.mse_loss(p, tgt)
    ad.backward(loss, tape)
    np.testing.assert_allclose(p.grad, 2.0 * (p.data - tgt.data) / 5.0, rtol=1e-12)

    def loss_fn():
        return float(np.mean((p.data - tgt.data) ** 2))

    assert rel_error(p.grad, finite_difference(loss_fn, p.data)) < 1e-4


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.mse_loss(t64(np.zeros(3)), t64(np.zeros(4)))


def test_backward_identity_chain_gives_ones():
    x = t64(np.zeros((2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.affine(x, 1.0, 0.0)
        loss = ad.sum_all(y)
    ad.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_backward_accumulates_across_calls():
    x = t64([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    ad.backward(loss, tape)
    first = x.grad.copy()
    ad.backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2.0 * first)


def test_backward_rejects_nonscalar():
    x = t64(np.zeros(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(UsageError):
        ad.backward(y, tape)


def test_tape_replay_is_deterministic():
    def run():
        gen = np.random.default_rng(7)
        x = t64(gen.standard_normal((2, 3, 4, 4)), requires_grad=True)
        w = t64(gen.standard_normal((3, 3, 3, 3)), requires_grad=True)
        b = t64(np.zeros(3), requires_grad=True)
        with ad.Tape() as tape:
            h = ad.conv2d(x, w, b, padding=1)
            h = ad.silu(h)
            loss = ad.mse_loss(h, t64(np.zeros((2, 3, 4, 4))))
        ad.backward(loss, tape)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)


def test_gradient_accumulation_linearity():
    gen = np.random.default_rng(8)
    w = t64(gen.standard_normal((2, 3)), requires_grad=True)
    xs = [t64(gen.standard_normal((4, 3))) for _ in range(3)]
    tgts = [t64(gen.standard_normal((4, 2))) for _ in range(3)]
    b = t64(np.zeros(2), requires_grad=True)

    for x, tgt in zip(xs, tgts):
        with ad.Tape() as tape:
            loss = ad.mse_loss(ad.linear(x, w, b), tgt)
        ad.backward(loss, tape)
    accumulated = w.grad.copy()

    w.zero_grad()
    b.zero_grad()
    with ad.Tape() as tape:
        total = ad.sum_all(ad.mse_loss(ad.linear(xs[0], w, b), tgts[0]))
        for x, tgt in zip(xs[1:], tgts[1:]):
            total = ad.add(total, ad.mse_loss(ad.linear(x, w, b), tgt))
    ad.backward(total, tape)
    np.testing.assert_allclose(accumulated, w.grad, rtol=1e-12)


# ---------------------------------------------------------------------------
# property tests: every differentiable op against finite differences


@st.composite
def small_conv_case(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    stride = draw(st.sampled_from([1, 2]))
    return seed, stride


@settings(max_examples=24, deadline=None)
@given(small_conv_case())
def test_property_conv2d_gradcheck(case):
    seed, stride = case
    gen = np.random.default_rng(seed)
    cin, cout = int(gen.integers(1, 4)), int(gen.integers(1, 4))
    h = w = int(gen.integers(3, 6)) * stride + 1
    x = t64(gen.standard_normal((1, cin, h, w)), requires_grad=True)
    wt = t64(gen.standard_normal((cout, cin, 3, 3)), requires_grad=True)
    b = t64(gen.standard_normal(cout), requires_grad=True)

    def forward():
        return ad.conv2d(x, wt, b, stride=stride, padding=1)

    with ad.Tape() as tape:
        out = forward()
        loss = ad.mse_loss(out, t64(np.zeros(out.shape)))
    ad.backward(loss, tape)

    def loss_fn():
        return float(np.mean(forward().data ** 2))

    for tensor in (x, wt, b):
        assert rel_error(tensor.grad, finite_difference(loss_fn, tensor.data)) < 1e-4


@settings(max_examples=24, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_pointwise_ops_gradcheck(seed):
    gen = np.random.default_rng(seed)
    shape = tuple(gen.integers(1, 5, size=2))
    x = t64(gen.standard_normal(shape), requires_grad=True)
    tgt = t64(gen.standard_normal(shape))

    cases = {
        "silu": (lambda: ad.silu(x), lambda: x.data / (1.0 + np.exp(-x.data))),
        "tanh": (lambda: ad.tanh(x), lambda: np.tanh(x.data)),
        "exp": (lambda: ad.exp(x), lambda: np.exp(x.data)),
        "affine": (lambda: ad.affine(x, 1.7, -0.3), lambda: 1.7 * x.data - 0.3),
    }
    for name, (op, ref) in cases.items():
        x.zero_grad()
        with ad.Tape() as tape:
            loss = ad.mse_loss(op(), tgt)
        ad.backward(loss, tape)

        def loss_fn():
            return float(np.mean((ref() - tgt.data) ** 2))

        assert rel_error(x.grad, finite_difference(loss_fn, x.data)) < 1e-4, name


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_groupnorm_linear_gradcheck(seed):
    gen = np.random.default_rng(seed)
    groups = int(gen.integers(1, 3))
    c = groups * int(gen.integers(1, 3))
    x = t64(gen.standard_normal((2, c, 3, 3)), requires_grad=True)
    gamma = t64(gen.standard_normal(c) + 1.0, requires_grad=True)
    beta = t64(gen.standard_normal(c), requires_grad=True)
    tgt = t64(gen.standard_normal((2, c, 3, 3)))

    with ad.Tape() as tape:
        loss = ad.mse_loss(ad.group_norm(x, groups, gamma, beta), tgt)
    ad.backward(loss, tape)

    def loss_fn():
        xg = x.data.reshape(2, groups, -1)
        xhat = (xg - xg.mean(axis=2, keepdims=True)) / np.sqrt(xg.var(axis=2, keepdims=True) + 1e-5)
        y = xhat.reshape(x.shape) * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
        return float(np.mean((y - tgt.data) ** 2))

    for tensor in (x, gamma, beta):
        assert rel_error(tensor.grad, finite_difference(loss_fn, tensor.data)) < 1e-4


# ---------------------------------------------------------------------------
# finite guard


@pytest.mark.filterwarnings("ignore:overflow")
def test_overflow_is_an_error_not_a_value():
    x = ad.Tensor(np.array([1e30], dtype=np.float32))
    with pytest.raises(FloatingPointError):
        ad.mul(x, x)


@pytest.mark.filterwarnings("ignore:overflow")
def test_finite_checks_can_be_disabled():
    x = ad.Tensor(np.array([1e30], dtype=np.float32))
    with ad.finite_checks(False):
        out = ad.mul(x, x)
    assert np.isinf(out.data[0])


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = nn.Parameter((3,), "kaiming_uniform", fan_in=3)
    p.name = "w"
    p.materialize(seed=0, dtype=np.float64)
    before = p.data.copy()
    p.tensor.grad = np.zeros(3)
    nn.adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, before)
    assert p.step_count == 1


def test_adam_first_step_is_signed_lr():
    p = nn.Parameter((4,), "zeros")
    p.name = "w"
    p.materialize(seed=0, dtype=np.float64)
    g = np.array([0.5, -2.0, 1e-3, -1e-3])
    p.tensor.grad = g.copy()
    nn.adam_step([p], lr=5e-5)
    # closed-form first step: -lr * g / (|g| + eps) = -lr * sign(g) for |g| >> eps
    np.testing.assert_allclose(p.data, -5e-5 * np.sign(g), atol=1e-6)


def test_adam_default_lr_matches_config():
    import inspect

    sig = inspect.signature(nn.adam_step)
    assert sig.parameters["lr"].default == 5e-5


def test_adam_missing_grad_names_parameter():
    p = nn.Parameter((2,), "zeros")
    p.name = "enc.conv.weight"
    p.materialize(seed=0, dtype=np.float32)
    with pytest.raises(UsageError, match="enc.conv.weight"):
        nn.adam_step([p])


def test_initialize_is_deterministic_per_name():
    a = nn.Conv2d(3, 8, 3, padding=1)
    b = nn.Conv2d(3, 8, 3, padding=1)
    nn.initialize_parameters(a, "m", seed=123)
    nn.initialize_parameters(b, "m", seed=123)
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    nn.initialize_parameters(b, "m", seed=124)
    assert not np.array_equal(a.weight.data, b.weight.data)

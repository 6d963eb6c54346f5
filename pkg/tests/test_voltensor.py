import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volshift.errors import PreconditionError, ShapeError
from volshift.voltensor import (
    AdamState, PadSpec, Tape, Tensor, adam_step, bce_loss, conv3d, conv_transpose3d, cross_entropy,
    instance_norm3d, l1_loss, leaky_relu, maxpool3d, ops, relu, reflection_pad3d, sigmoid,
    softmax_channels, sum_all, upsample_nearest3d,
)
from volshift.voltensor.gradcheck import OP_CASES, directional_check, gradcheck


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------- oracles

def naive_conv(x, w, b, stride, pad):
    x = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    n, cin, d, h, wd = x.shape
    cout, _, k = w.shape[:3]
    od, oh, ow = ((d - k) // stride + 1, (h - k) // stride + 1, (wd - k) // stride + 1)
    out = np.zeros((n, cout, od, oh, ow))
    for bi, co, i, j, l in itertools.product(range(n), range(cout), range(od), range(oh), range(ow)):
        acc = b[co]
        for ci, a, bb, c in itertools.product(range(cin), range(k), range(k), range(k)):
            acc += x[bi, ci, i * stride + a, j * stride + bb, l * stride + c] * w[co, ci, a, bb, c]
        out[bi, co, i, j, l] = acc
    return out


def scatter_convt(x, w, stride):
    n, cin, d, h, wd = x.shape
    cout, k = w.shape[1], w.shape[2]
    out = np.zeros((n, cout) + tuple((e - 1) * stride + k for e in (d, h, wd)))
    for bi, ci, i, j, l in itertools.product(range(n), range(cin), range(d), range(h), range(wd)):
        out[bi, :, i * stride:i * stride + k, j * stride:j * stride + k, l * stride:l * stride + k] += (
            x[bi, ci, i, j, l] * w[ci])
    return out


# ---------------------------------------------------------------- conv3d

def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 3, 3, 3))
    out = conv3d(t64(x), t64(np.ones((1, 1, 1, 1, 1))), t64([0.0]))
    np.testing.assert_array_equal(out.data, x)


def test_conv_sum_of_ones():
    out = conv3d(t64(np.ones((1, 1, 3, 3, 3))), t64(np.ones((1, 1, 3, 3, 3))), t64([0.0]))
    assert out.shape == (1, 1, 1, 1, 1) and out.data.item() == 27


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 2, 5, 5, 5)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    out = conv3d(t64(x), t64(w), t64(b), stride=2, pad=1)
    assert out.shape == (2, 3, 3, 3, 3)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, 2, 1), atol=1e-5)


def test_conv_float32_matches_oracle():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(1, 2, 6, 6, 6)), rng.normal(size=(2, 2, 3, 3, 3)), rng.normal(size=2)
    out = conv3d(*(Tensor(a, dtype=np.float32) for a in (x, w, b)), stride=1, pad=1)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, 1, 1), atol=1e-4)


def test_fft_path_matches_loop_oracle():
    # k >= 5 at stride 1 takes the FFT route
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(1, 2, 7, 7, 7)), rng.normal(size=(2, 2, 5, 5, 5)), rng.normal(size=2)
    out = conv3d(t64(x), t64(w), t64(b), stride=1, pad=2)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, 1, 2), atol=1e-9)


def test_chunked_correlation_is_identical(monkeypatch):
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(2, 4, 6, 6, 6)), rng.normal(size=(3, 4, 3, 3, 3))
    full = conv3d(t64(x), t64(w), None, pad=1).data
    monkeypatch.setattr(ops, "CHUNK_ELEMS", 600)
    chunked = conv3d(t64(x), t64(w), None, pad=1).data
    np.testing.assert_allclose(chunked, full, rtol=0, atol=1e-12)


def test_conv_reflect_padspec_equals_explicit_pad():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(1, 1, 5, 5, 5)), rng.normal(size=(1, 1, 3, 3, 3))
    a = conv3d(t64(x), t64(w), None, pad=PadSpec.reflect(1)).data
    xp = np.pad(x, ((0, 0), (0, 0)) + ((1, 1),) * 3, mode="reflect")
    np.testing.assert_allclose(a, naive_conv(xp, w, np.zeros(1), 1, 0), atol=1e-10)


def test_conv_shape_errors_name_axes():
    x = t64(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(ShapeError, match="axis 1|channel|in_ch|2"):
        conv3d(x, t64(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ShapeError, match="larger than padded extent"):
        conv3d(x, t64(np.zeros((1, 2, 5, 5, 5))))
    with pytest.raises(PreconditionError):
        conv3d(x, t64(np.zeros((1, 2, 3, 3, 3))), stride=0)


# ---------------------------------------------------------------- conv_transpose3d

def test_convt_single_tap_scatter():
    out = conv_transpose3d(t64(np.full((1, 1, 1, 1, 1), 2.5)), t64(np.ones((1, 1, 2, 2, 2))), None, stride=2)
    assert out.shape == (1, 1, 2, 2, 2)
    assert np.all(out.data == 2.5)


def test_convt_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 3, 3, 3))
    out = conv_transpose3d(t64(x), t64(np.ones((1, 1, 1, 1, 1))), None, stride=1)
    np.testing.assert_array_equal(out.data, x)


def test_convt_matches_scatter_oracle():
    rng = np.random.default_rng(6)
    x, w = rng.normal(size=(1, 2, 3, 3, 3)), rng.normal(size=(2, 1, 3, 3, 3))
    out = conv_transpose3d(t64(x), t64(w), None, stride=2)
    assert out.shape == (1, 1, 7, 7, 7)
    np.testing.assert_allclose(out.data, scatter_convt(x, w, 2), atol=1e-5)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), stride=st.sampled_from([1, 2]), k=st.sampled_from([1, 2, 3]),
       cin=st.integers(1, 3), cout=st.integers(1, 3))
def test_convt_is_conv_adjoint(seed, stride, k, cin, cout):
    # <conv(x, w), y> == <x, convT(y, w)> with w read as [cout, cin, ...] in both
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, cin, 5, 5, 5))
    w = rng.normal(size=(cout, cin, k, k, k))
    y_shape = conv3d(t64(x), t64(w), None, stride=stride).shape
    y = rng.normal(size=y_shape)
    lhs = float((conv3d(t64(x), t64(w), None, stride=stride).data * y).sum())
    back = conv_transpose3d(t64(y), t64(w), None, stride=stride).data
    # output voxels past the last full window receive nothing from conv3d
    back = np.pad(back, [(0, 0), (0, 0)] + [(0, max(0, 5 - e)) for e in back.shape[2:]])[:, :, :5, :5, :5]
    rhs = float((x * back).sum())
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


# ---------------------------------------------------------------- resampling and padding

def test_upsample_cases():
    x = np.random.default_rng(0).normal(size=(1, 1, 2, 2, 2))
    np.testing.assert_array_equal(upsample_nearest3d(t64(x), 1).data, x)
    assert np.all(upsample_nearest3d(t64(np.full((1, 1, 1, 1, 1), 7.0)), 2).data == 7)
    up = upsample_nearest3d(t64(x), 3).data
    assert up.shape == (1, 1, 6, 6, 6)
    for i, j, k in itertools.product(range(6), repeat=3):
        assert up[0, 0, i, j, k] == x[0, 0, i // 3, j // 3, k // 3]


def test_reflection_pad_cases():
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 4, 4))
    np.testing.assert_array_equal(reflection_pad3d(t64(x), 0).data, x)
    line = np.zeros((1, 1, 3, 3, 3))
    line[0, 0, :, 1, 1] = [1.0, 2.0, 3.0]
    out = reflection_pad3d(t64(line), 1).data
    np.testing.assert_array_equal(out[0, 0, :, 2, 2], [2, 1, 2, 3, 2])
    out = reflection_pad3d(t64(x), 2).data

    def mirror(i, n):
        i -= 2
        return -i if i < 0 else (2 * (n - 1) - i if i >= n else i)

    for i, j, k in itertools.product(range(8), repeat=3):
        assert out[0, 0, i, j, k] == x[0, 0, mirror(i, 4), mirror(j, 4), mirror(k, 4)]
    with pytest.raises(PreconditionError):
        reflection_pad3d(t64(x), 4)


# ---------------------------------------------------------------- norm, activations, softmax, pool

def test_instance_norm_cases():
    assert np.all(instance_norm3d(t64(np.full((1, 1, 2, 2, 2), 3.0))).data == 0)
    x = np.ones((1, 1, 2, 2, 2))
    x[0, 0, 0] = -1
    out = instance_norm3d(t64(x), eps=1e-5).data
    np.testing.assert_allclose(np.unique(out), [-1 / np.sqrt(1 + 1e-5), 1 / np.sqrt(1 + 1e-5)])
    r = instance_norm3d(t64(np.random.default_rng(0).normal(2, 3, size=(2, 3, 4, 4, 4)))).data
    assert np.abs(r.mean(axis=(2, 3, 4))).max() < 1e-6
    assert np.abs(r.var(axis=(2, 3, 4)) - 1).max() < 1e-3


def test_activation_values():
    x = t64([-2.0, 3.0, 0.0])
    np.testing.assert_array_equal(relu(x).data, [0, 3, 0])
    assert leaky_relu(x).data[0] == pytest.approx(-0.4)
    assert sigmoid(x).data[2] == 0.5


def test_softmax_cases():
    eq = softmax_channels(t64(np.zeros((1, 2, 1, 1, 1)))).data
    np.testing.assert_allclose(eq.ravel(), [0.5, 0.5])
    big = softmax_channels(t64(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1, 1))).data.ravel()
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300 + 1e-12
    z = np.random.default_rng(0).normal(size=(1, 3, 1, 1, 1))
    direct = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(softmax_channels(t64(z)).data, direct, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=6, max_size=6))
def test_softmax_sums_to_one_property(vals):
    z = np.array(vals).reshape(1, 3, 2, 1, 1)
    s = softmax_channels(Tensor(z)).data.sum(axis=1)
    assert np.all(np.abs(s - 1) <= 1e-6)


def test_maxpool_cases():
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 4, 4))
    np.testing.assert_array_equal(maxpool3d(t64(x), 1).data, x)
    assert maxpool3d(t64(np.arange(8.0).reshape(1, 1, 2, 2, 2)), 2).data.item() == 7
    out = maxpool3d(t64(x), 2).data
    for i, j, k in itertools.product(range(2), repeat=3):
        assert out[0, 0, i, j, k] == x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2].max()
    with pytest.raises(PreconditionError, match="not divisible"):
        maxpool3d(t64(np.zeros((1, 1, 3, 4, 4))), 2)


def test_maxpool_tie_routes_to_first_voxel():
    x = t64(np.zeros((1, 1, 2, 2, 2)), grad=True)
    with Tape() as tape:
        loss = sum_all(maxpool3d(x, 2))
    tape.backward(loss)
    g = x.grad.ravel()
    assert g[0] == 1 and g[1:].sum() == 0


# ---------------------------------------------------------------- losses and backward

def test_loss_values():
    x = t64(np.random.default_rng(0).normal(size=(2, 3)))
    assert l1_loss(x, x).data.item() == 0
    p = t64(np.full((4,), 0.5))
    assert bce_loss(p, np.array([0, 1, 1, 0.0])).data.item() == pytest.approx(np.log(2))
    prob = np.zeros((1, 2, 2, 2, 2))
    prob[:, 1] = 1
    assert cross_entropy(t64(prob), np.ones((1, 2, 2, 2), dtype=np.uint8)).data.item() == pytest.approx(0, abs=1e-12)
    with pytest.raises(ShapeError):
        l1_loss(x, t64(np.zeros((3, 2))))


def test_bce_is_finite_at_saturation():
    v = bce_loss(t64([0.0, 1.0]), np.array([1.0, 0.0])).data.item()
    assert np.isfinite(v) and v == pytest.approx(-np.log(1e-7), rel=1e-6)


def test_backward_simple_cases():
    x = t64(np.random.default_rng(0).uniform(0.1, 1, size=(2, 3)), grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x.zero_grad()
    with Tape() as tape:
        loss = l1_loss(x, np.zeros((2, 3)))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))


def test_backward_rejects_non_scalar():
    x = t64(np.ones(3), grad=True)
    with Tape() as tape:
        y = relu(x)
    with pytest.raises(PreconditionError):
        tape.backward(y)


def test_tape_records_in_topological_order():
    x = t64(np.ones((1, 1, 2, 2, 2)), grad=True)
    with Tape() as tape:
        a = relu(x)
        b = ops.mul(a, 2.0)
        sum_all(b)
    seen = {id(x)}
    for rec in tape.records:
        assert all(id(i) in seen or not i.requires_grad for i in rec.inputs)
        seen.add(id(rec.output))


def test_gradient_shapes_match_parameters():
    rng = np.random.default_rng(0)
    x = t64(rng.normal(size=(1, 2, 4, 4, 4)))
    w, b = t64(rng.normal(size=(3, 2, 3, 3, 3)), grad=True), t64(rng.normal(size=3), grad=True)
    with Tape() as tape:
        loss = sum_all(relu(conv3d(x, w, b, pad=1)))
    tape.backward(loss)
    assert w.grad.shape == w.shape and b.grad.shape == b.shape


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradcheck_per_op(name):
    for seed in (0, 1):
        fn, inputs = OP_CASES[name](np.random.default_rng(seed))
        assert max(gradcheck(fn, inputs, h=1e-3, proj_seed=seed)) <= 1e-4


def test_directional_check_on_composite():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(2, 2, 3, 3, 3)) * 0.3

    def fn(x):
        h = relu(conv3d(x, t64(w), None, pad=PadSpec.reflect(1)))
        return instance_norm3d(upsample_nearest3d(h, 2))

    assert directional_check(fn, [rng.normal(size=(2, 2, 4, 4, 4))]) <= 1e-4


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 3, 8, 8, 8)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ops.mean_all(relu(conv3d(x, w, None, stride=2, pad=1)))
        tape.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------- Adam

def test_adam_zero_grad_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    stt = AdamState.for_params([p], lr=0.1)
    adam_step([p], [np.zeros(2, np.float32)], stt)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert stt.step == 1
    # moments decay toward zero under zero gradients
    adam_step([p], [np.ones(2, np.float32)], stt)
    m1, v1 = stt.m[0].copy(), stt.v[0].copy()
    adam_step([p], [None], stt)
    np.testing.assert_allclose(stt.m[0], 0.9 * m1)
    np.testing.assert_allclose(stt.v[0], 0.999 * v1)


def test_adam_first_step_is_lr_sign():
    p = Tensor(np.zeros(3), requires_grad=True)
    stt = AdamState.for_params([p], lr=0.01)
    adam_step([p], [np.array([3.0, -0.5, 1e-3], np.float32)], stt)
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-3)


def test_adam_scalar_quadratic():
    w = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
    stt = AdamState.for_params([w], lr=0.1)
    for _ in range(100):
        adam_step([w], [2 * (w.data - 3.0)], stt)
    assert abs(w.data.item() - 3) < 0.1
    assert stt.step == 100


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=4)
    p = Tensor(p0.copy(), requires_grad=True, dtype=np.float64)
    stt = AdamState.for_params([p], lr=0.05)
    m = v = np.zeros(4)
    ref = p0.copy()
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step([p], [g], stt)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-10)


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    stt = AdamState.for_params([p])
    with pytest.raises(ShapeError):
        adam_step([p], [], stt)

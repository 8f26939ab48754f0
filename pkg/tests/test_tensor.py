import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdfcn import tensor as T
from fdfcn.errors import (
    KernelExceedsInput,
    LabelOutOfRange,
    NonFiniteTensor,
    ParityMismatch,
    ShapeMismatch,
)
from fdfcn.tensor import ConvSpec, conv_out_size, dilated_kernel_size
from oracles import check_grad, direct_conv3d, zero_insert

rng0 = np.random.default_rng


# --- output size -----------------------------------------------------------

@pytest.mark.parametrize("i,k,p,s,r,expected", [
    (27, 7, 3, 1, 1, 27),
    (5, 1, 0, 1, 1, 5),
    (27, 3, 0, 2, 1, 13),
    (13, 3, 0, 1, 1, 11),
    (11, 3, 0, 1, 1, 9),
])
def test_conv_out_size(i, k, p, s, r, expected):
    assert conv_out_size(i, ConvSpec(k, 1, 1, s, p, r)) == expected


def test_out_size_matches_placement_count():
    # count valid kernel placements along one axis
    for i in range(3, 30):
        for s in (1, 2, 3):
            spec = ConvSpec(3, 1, 1, s, 0, 1)
            placements = len(range(0, i - 3 + 1, s))
            assert conv_out_size(i, spec) == placements


def test_dilated_kernel_size():
    assert dilated_kernel_size(3, 2) == 5
    assert dilated_kernel_size(3, 3) == 7
    assert dilated_kernel_size(1, 4) == 1
    assert ConvSpec(3, 1, 1, r=2).kd == 5


def test_kernel_exceeds_input():
    with pytest.raises(KernelExceedsInput):
        conv_out_size(4, ConvSpec(3, 1, 1, p=0, r=2))


@pytest.mark.parametrize("kwargs", [dict(k=0), dict(s=0), dict(p=-1), dict(r=0)])
def test_convspec_rejects_bad_fields(kwargs):
    base = dict(k=3, c_in=1, c_out=1, s=1, p=0, r=1)
    base.update(kwargs)
    with pytest.raises(ValueError):
        ConvSpec(**base)


# --- conv3d forward ----------------------------------------------------------

def test_conv_sum_of_ones():
    x = np.ones((1, 1, 3, 3, 3), np.float32)
    y, _ = T.conv3d(x, np.ones((1, 1, 3, 3, 3), np.float32), np.zeros(1, np.float32),
                    ConvSpec(3, 1, 1))
    assert y.shape == (1, 1, 1, 1, 1)
    assert y.item() == 27.0


@pytest.mark.parametrize("case", range(8))
def test_conv_matches_direct_loops(case):
    rng = rng0(case)
    k = int(rng.choice([1, 3]))
    r = int(rng.integers(1, 4)) if k > 1 else 1
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, 3))
    ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.normal(size=(2, ci, 8, 8, 8))
    w = rng.normal(size=(co, ci, k, k, k))
    b = rng.normal(size=co)
    spec = ConvSpec(k, ci, co, s, p, r)
    y, _ = T.conv3d(x, w, b, spec)
    ref = direct_conv3d(x, w, b, s, p, r)
    assert y.shape == ref.shape
    assert np.max(np.abs(y - ref)) <= 1e-6 * np.max(np.abs(ref))


@pytest.mark.parametrize("r", [2, 3])
def test_dilated_equals_zero_inserted(r):
    rng = rng0(r)
    x = rng.normal(size=(1, 1, 7, 7, 7)).astype(np.float32)
    w = rng.normal(size=(1, 1, 3, 3, 3)).astype(np.float32)
    b = np.zeros(1, np.float32)
    p = r
    dil, _ = T.conv3d(x, w, b, ConvSpec(3, 1, 1, 1, p, r))
    plain, _ = T.conv3d(x, zero_insert(w, r), b, ConvSpec(dilated_kernel_size(3, r), 1, 1, 1, p))
    np.testing.assert_allclose(dil, plain, rtol=1e-6, atol=1e-6 * np.abs(plain).max())


def test_fused_branches_equal_sum_of_single_convs():
    rng = rng0(3)
    x = rng.normal(size=(2, 3, 9, 9, 9))
    specs = [ConvSpec(3, 3, 4, 1, r, r) for r in (1, 2, 3)]
    ws = [rng.normal(size=(4, 3, 3, 3, 3)) for _ in specs]
    bs = [rng.normal(size=4) for _ in specs]
    fused, _ = T.conv3d_sum(x, ws, bs, specs)
    parts = sum(T.conv3d(x, w, b, s)[0] for w, b, s in zip(ws, bs, specs))
    np.testing.assert_allclose(fused, parts, rtol=1e-12, atol=1e-10)


def test_conv_branch_shapes_must_agree():
    x = np.zeros((1, 1, 9, 9, 9))
    specs = [ConvSpec(3, 1, 1, 1, 1, 1), ConvSpec(3, 1, 1, 1, 0, 2)]
    with pytest.raises(ShapeMismatch):
        T.conv3d_sum(x, [np.zeros((1, 1, 3, 3, 3))] * 2, [np.zeros(1)] * 2, specs)


def test_conv_shape_errors():
    x = np.zeros((1, 2, 5, 5, 5), np.float32)
    with pytest.raises(ShapeMismatch):
        T.conv3d(x, np.zeros((1, 3, 3, 3, 3), np.float32), np.zeros(1, np.float32), ConvSpec(3, 3, 1))
    with pytest.raises(ShapeMismatch):
        T.conv3d(x, np.zeros((1, 2, 3, 3, 3), np.float32), np.zeros(2, np.float32), ConvSpec(3, 2, 1))
    with pytest.raises(ShapeMismatch):
        T.conv3d(np.zeros((2, 5, 5, 5)), np.zeros((1, 2, 3, 3, 3)), np.zeros(1), ConvSpec(3, 2, 1))


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_conv_is_linear(a, b, seed):
    rng = rng0(seed)
    x, y = rng.normal(size=(2, 1, 2, 6, 6, 6))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    zero = np.zeros(2)
    spec = ConvSpec(3, 2, 2, 1, 1, 2)
    lhs = T.conv3d(a * x + b * y, w, zero, spec)[0]
    rhs = a * T.conv3d(x, w, zero, spec)[0] + b * T.conv3d(y, w, zero, spec)[0]
    scale = max(np.abs(lhs).max(), np.abs(rhs).max(), 1e-12)
    assert np.abs(lhs - rhs).max() <= 1e-5 * scale


# --- gradient checks (float64) ----------------------------------------------

@pytest.mark.parametrize("s,p,r", [(1, 0, 1), (1, 2, 2), (1, 3, 3), (2, 0, 1), (2, 1, 1)])
def test_conv_gradients(s, p, r):
    rng = rng0(10 * r + s)
    x = rng.normal(size=(2, 2, 4, 4, 4)) if r == 1 else rng.normal(size=(1, 2, 4, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    spec = ConvSpec(3, 2, 3, s, p, r)
    y, cache = T.conv3d(x, w, b, spec)
    dy = rng.normal(size=y.shape)
    dx, dw, db = T.conv3d_backward(dy, cache)

    def f():
        return float((T.conv3d(x, w, b, spec)[0] * dy).sum())

    assert check_grad(f, x, dx, rng) <= 1e-4
    assert check_grad(f, w, dw, rng) <= 1e-4
    assert check_grad(f, b, db, rng, count=3) <= 1e-4


def test_fused_conv_gradients():
    rng = rng0(7)
    x = rng.normal(size=(1, 2, 5, 5, 5))
    specs = [ConvSpec(3, 2, 2, 1, r, r) for r in (1, 2, 3)]
    ws = [rng.normal(size=(2, 2, 3, 3, 3)) for _ in specs]
    bs = [rng.normal(size=2) for _ in specs]
    y, cache = T.conv3d_sum(x, ws, bs, specs)
    dy = rng.normal(size=y.shape)
    dx, dws, dbs = T.conv3d_sum_backward(dy, cache)

    def f():
        return float((T.conv3d_sum(x, ws, bs, specs)[0] * dy).sum())

    assert check_grad(f, x, dx, rng) <= 1e-4
    for w, dw in zip(ws, dws):
        assert check_grad(f, w, dw, rng, count=8) <= 1e-4


def test_batch_norm_gradients():
    rng = rng0(1)
    x = rng.normal(size=(2, 3, 3, 3, 3)) * 2 + 1
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    dy = rng.normal(size=x.shape)

    def run():
        return T.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), train=True)

    y, cache = run()
    dx, dgamma, dbeta = T.batch_norm_backward(dy, cache)

    def f():
        return float((run()[0] * dy).sum())

    assert check_grad(f, x, dx, rng) <= 1e-4
    assert check_grad(f, gamma, dgamma, rng, count=3) <= 1e-4
    assert check_grad(f, beta, dbeta, rng, count=3) <= 1e-4


def test_batch_norm_infer_gradient():
    rng = rng0(2)
    x = rng.normal(size=(2, 2, 3, 3, 3))
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, 2)
    gamma, beta = rng.normal(size=2), rng.normal(size=2)
    dy = rng.normal(size=x.shape)
    _, cache = T.batch_norm(x, gamma, beta, rm, rv, train=False)
    dx, _, _ = T.batch_norm_backward(dy, cache)

    def f():
        return float((T.batch_norm(x, gamma, beta, rm, rv, train=False)[0] * dy).sum())

    assert check_grad(f, x, dx, rng) <= 1e-4


def test_batch_norm_normalizes():
    rng = rng0(3)
    x = (rng.normal(size=(4, 3, 5, 5, 5)) * 3 + 7).astype(np.float32)
    y, _ = T.batch_norm(x, np.ones(3, np.float32), np.zeros(3, np.float32),
                        np.zeros(3, np.float32), np.ones(3, np.float32), train=True)
    assert np.abs(y.mean(axis=(0, 2, 3, 4))).max() <= 1e-5
    assert np.abs(y.var(axis=(0, 2, 3, 4)) - 1).max() <= 1e-4


def test_batch_norm_train_infer_consistent():
    rng = rng0(4)
    x = rng.normal(size=(2, 3, 4, 4, 4)).astype(np.float32)
    ones, zeros = np.ones(3, np.float32), np.zeros(3, np.float32)
    train, _ = T.batch_norm(x, ones, zeros, zeros.copy(), ones.copy(), train=True)
    mean = x.mean(axis=(0, 2, 3, 4))
    var = x.var(axis=(0, 2, 3, 4))
    infer, _ = T.batch_norm(x, ones, zeros, mean, var, train=False)
    np.testing.assert_allclose(train, infer, atol=1e-5)


def test_batch_norm_running_update():
    rng = rng0(5)
    x = rng.normal(size=(2, 2, 3, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, train=True)
    m = x.size // 2
    mean = x.mean(axis=(0, 2, 3, 4))
    unbiased = x.var(axis=(0, 2, 3, 4)) * m / (m - 1)
    np.testing.assert_allclose(rm, 0.1 * mean)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * unbiased)


def test_batch_norm_shape_mismatch():
    x = np.zeros((1, 3, 2, 2, 2))
    with pytest.raises(ShapeMismatch):
        T.batch_norm(x, np.ones(2), np.zeros(3), np.zeros(3), np.ones(3), train=True)


def test_prelu_values():
    x = np.array([-2.0, 0.0, 3.0]).reshape(1, 1, 1, 1, 3)
    y, _ = T.prelu(x, np.array([0.25]))
    np.testing.assert_array_equal(y.ravel(), [-0.5, 0.0, 3.0])
    pos = np.abs(rng0(0).normal(size=(1, 2, 2, 2, 2)))
    np.testing.assert_array_equal(T.prelu(pos, np.array([0.25, 0.1]))[0], pos)
    with pytest.raises(ShapeMismatch):
        T.prelu(pos, np.array([0.25]))


def test_prelu_gradients():
    rng = rng0(6)
    x = rng.normal(size=(2, 3, 3, 3, 3))
    a = rng.uniform(0.05, 0.5, 3)
    dy = rng.normal(size=x.shape)
    _, cache = T.prelu(x, a)
    dx, da = T.prelu_backward(dy, cache)

    def f():
        return float((T.prelu(x, a)[0] * dy).sum())

    assert check_grad(f, x, dx, rng) <= 1e-4
    assert check_grad(f, a, da, rng, count=3) <= 1e-4


# --- structural ops ----------------------------------------------------------

def test_concat_order_and_split():
    rng = rng0(8)
    a, b = rng.normal(size=(2, 48, 3, 3, 3)), rng.normal(size=(2, 6, 3, 3, 3))
    y, sizes = T.concat_channels([a, b])
    assert y.shape == (2, 54, 3, 3, 3)
    np.testing.assert_array_equal(y[:, :48], a)
    np.testing.assert_array_equal(y[:, 48:], b)
    da, db = T.concat_channels_backward(y, sizes)
    np.testing.assert_array_equal(da, a)
    np.testing.assert_array_equal(db, b)
    with pytest.raises(ShapeMismatch):
        T.concat_channels([a, np.zeros((2, 6, 4, 3, 3))])


def test_concat_gradient():
    rng = rng0(9)
    a, b = rng.normal(size=(1, 2, 2, 2, 2)), rng.normal(size=(1, 3, 2, 2, 2))
    y, sizes = T.concat_channels([a, b])
    dy = rng.normal(size=y.shape)
    da, db = T.concat_channels_backward(dy, sizes)

    def f():
        return float((T.concat_channels([a, b])[0] * dy).sum())

    assert check_grad(f, a, da, rng) <= 1e-4
    assert check_grad(f, b, db, rng) <= 1e-4


def test_center_crop():
    x = np.arange(13**3, dtype=np.float64).reshape(1, 1, 13, 13, 13)
    y, cache = T.center_crop(x, 9)
    assert y.shape == (1, 1, 9, 9, 9)
    np.testing.assert_array_equal(y, x[:, :, 2:11, 2:11, 2:11])
    np.testing.assert_array_equal(T.center_crop(x, 13)[0], x)
    dx = T.center_crop_backward(np.ones_like(y), cache)
    assert dx.shape == x.shape and dx.sum() == 9**3
    assert dx[0, 0, 1].sum() == 0 and dx[0, 0, 2].sum() == 81
    with pytest.raises(ParityMismatch):
        T.center_crop(x, 10)
    with pytest.raises(ShapeMismatch):
        T.center_crop(x, 15)


def test_crop_and_sum_gradients():
    rng = rng0(10)
    x = rng.normal(size=(1, 2, 5, 5, 5))
    y, cache = T.center_crop(x, 3)
    dy = rng.normal(size=y.shape)
    dx = T.center_crop_backward(dy, cache)
    assert check_grad(lambda: float((T.center_crop(x, 3)[0] * dy).sum()), x, dx, rng) <= 1e-4

    a, b = rng.normal(size=(2, 1, 2, 2, 2, 2))
    s, count = T.elementwise_sum([a, b])
    np.testing.assert_array_equal(s, a + b)
    ds = rng.normal(size=s.shape)
    da, db = T.elementwise_sum_backward(ds, count)
    assert check_grad(lambda: float((T.elementwise_sum([a, b])[0] * ds).sum()), a, da, rng) <= 1e-4
    np.testing.assert_array_equal(db, ds)
    with pytest.raises(ShapeMismatch):
        T.elementwise_sum([a, np.zeros((1, 2, 2, 2, 3))])


# --- loss ----------------------------------------------------------------------

def test_uniform_logits_loss():
    logits = np.zeros((2, 12, 3, 3, 3), np.float32)
    loss, _ = T.softmax_cross_entropy(logits, np.zeros((2, 3, 3, 3), np.int64))
    assert loss == pytest.approx(math.log(12), rel=1e-6)


def test_confident_logits_loss():
    logits = np.zeros((1, 3, 2, 2, 2))
    logits[:, 1] = 1e4
    loss, _ = T.softmax_cross_entropy(logits, np.ones((1, 2, 2, 2), np.int64))
    assert loss < 1e-12


def test_label_out_of_range():
    with pytest.raises(LabelOutOfRange):
        T.softmax_cross_entropy(np.zeros((1, 3, 1, 1, 1)), np.full((1, 1, 1, 1), 3))
    with pytest.raises(LabelOutOfRange):
        T.softmax_cross_entropy(np.zeros((1, 3, 1, 1, 1)), np.full((1, 1, 1, 1), -1))


def test_softmax_ce_gradient():
    rng = rng0(11)
    logits = rng.normal(size=(2, 4, 2, 3, 2)) * 3
    targets = rng.integers(0, 4, size=(2, 2, 3, 2))
    _, cache = T.softmax_cross_entropy(logits, targets)
    grad = T.softmax_cross_entropy_backward(cache)
    onehot = np.moveaxis(np.eye(4)[targets], -1, 1)
    np.testing.assert_allclose(grad, (T.softmax(logits) - onehot) / targets.size, atol=1e-15)
    assert check_grad(lambda: T.softmax_cross_entropy(logits, targets)[0], logits, grad, rng) <= 1e-4


# --- debug audit ---------------------------------------------------------------

def test_debug_audit_catches_nan():
    x = np.ones((1, 1, 2, 2, 2), np.float32)
    x[0, 0, 0, 0, 0] = np.nan
    T.set_debug(True)
    try:
        with pytest.raises(NonFiniteTensor):
            T.prelu(x, np.array([0.25], np.float32))
    finally:
        T.set_debug(False)
    T.prelu(x, np.array([0.25], np.float32))  # silent when off


def test_float32_stays_float32():
    rng = rng0(12)
    x = rng.normal(size=(1, 2, 5, 5, 5)).astype(np.float32)
    w = rng.normal(size=(2, 2, 3, 3, 3)).astype(np.float32)
    y, cache = T.conv3d(x, w, np.zeros(2, np.float32), ConvSpec(3, 2, 2, 1, 1))
    assert y.dtype == np.float32
    dx, dw, db = T.conv3d_backward(np.ones_like(y), cache)
    assert dx.dtype == dw.dtype == np.float32

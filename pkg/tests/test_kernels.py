import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gynbtnet.kernels import _backend
from gynbtnet.kernels import autograd as A
from gynbtnet.kernels import functional as F
from gynbtnet.kernels.gradcheck import finite_diff_check
from oracles import naive_conv


@pytest.fixture(params=_backend.available())
def backend(request):
    prev = _backend.use(request.param)
    yield request.param
    _backend.use(prev)


def test_neighbor_counting(backend):
    y = F.conv3d(np.ones((1, 1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)), np.zeros(1))
    assert y[0, 0, 1, 1, 1] == 27
    assert y[0, 0, 0, 0, 0] == 8
    assert y[0, 0, 0, 1, 1] == 18


def test_unit_kernel_identity(backend):
    x = np.random.default_rng(0).standard_normal((2, 1, 3, 4, 5))
    y = F.conv3d(x, np.ones((1, 1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(y, x)


@pytest.mark.parametrize("k, stride", [(3, 1), (3, 2), (1, 1), (1, 2)])
def test_matches_direct_summation(backend, k, stride):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, k, k, k))
    b = rng.standard_normal(3)
    y = F.conv3d(x, w, b, stride)
    assert np.max(np.abs(y - naive_conv(x, w, b, stride))) < 1e-12


def test_odd_dims_stride2_output_is_ceil():
    x = np.zeros((1, 1, 5, 6, 7))
    assert F.conv3d(x, np.zeros((1, 1, 3, 3, 3)), np.zeros(1), 2).shape[2:] == (3, 3, 4)


def test_backward_is_adjoint():
    # <conv(x), g> = <x, conv^T(g)> and likewise for the weights
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 5, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    for stride in (1, 2):
        y = F.conv3d(x, w, np.zeros(4), stride)
        g = rng.standard_normal(y.shape)
        gx, gw, gb = F.conv3d_backward(g, x, w, stride)
        assert np.isclose(np.sum(y * g), np.sum(x * gx), rtol=1e-12)
        assert np.isclose(np.sum(y * g), np.sum(w * gw), rtol=1e-12)
        assert np.allclose(gb, g.sum(axis=(0, 2, 3, 4)))


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_linearity(a, c, seed):
    rng = np.random.default_rng(seed)
    x, z = rng.standard_normal((2, 1, 2, 4, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    zero = np.zeros(2)
    lhs = F.conv3d(a * x + c * z, w, zero)
    rhs = a * F.conv3d(x, w, zero) + c * F.conv3d(z, w, zero)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_channel_mismatch():
    with pytest.raises(F.ShapeError):
        F.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)), np.zeros(1))


def test_instance_norm_constant_channel():
    y, _ = F.instance_norm(np.full((1, 1, 2, 2, 2), 4.0), np.ones(1), np.zeros(1))
    assert np.all(y == 0)


def test_instance_norm_standardizes():
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 4, 4)) * 5 + 2
    y, _ = F.instance_norm(x, np.ones(3), np.zeros(3))
    yr = y.reshape(2, 3, -1)
    assert np.max(np.abs(yr.mean(axis=2))) < 1e-6
    assert np.max(np.abs(yr.var(axis=2) - 1)) < 1e-6


def test_instance_norm_two_voxel_closed_form():
    eps = 1e-5
    y, _ = F.instance_norm(np.array([0.0, 10.0]).reshape(1, 1, 1, 1, 2),
                           np.array([2.0]), np.array([3.0]), eps)
    delta = 1 - 5 / math.sqrt(25 + eps)
    assert np.allclose(y.ravel(), [3 - 2 * (1 - delta), 3 + 2 * (1 - delta)], atol=1e-12)
    assert np.max(np.abs(y.ravel() - [1, 5])) < 1e-3


def test_instance_norm_affine_invariance():
    rng = np.random.default_rng(2)
    # sigma^2 = 100 keeps the epsilon term negligible
    x = 10 * rng.standard_normal((1, 2, 4, 4, 4))
    g, b = rng.standard_normal(2), rng.standard_normal(2)
    y1, _ = F.instance_norm(x, g, b)
    y2, _ = F.instance_norm(7.5 * x - 3.0, g, b)
    assert np.max(np.abs(y1 - y2)) < 1e-6


def test_leaky_relu_values_and_tie():
    x = np.array([2.0, -1.0, 0.0])
    assert np.array_equal(F.leaky_relu(x, 0.01), [2.0, -0.01, 0.0])
    assert np.array_equal(F.leaky_relu_backward(np.ones(3), x, 0.01), [1.0, 0.01, 1.0])


def test_upsample_concat_replicates():
    x = np.full((1, 1, 1, 1, 1), 5.0)
    skip = np.random.default_rng(0).standard_normal((1, 1, 2, 2, 2))
    y = F.upsample_concat(x, skip, np.ones((1, 1, 1, 1, 1)), np.zeros(1))
    assert y.shape == (1, 2, 2, 2, 2)
    assert np.all(y[0, 0] == 5.0)
    assert np.array_equal(y[0, 1], skip[0, 0])


def test_upsample_concat_channel_rule_and_mismatch():
    x = np.zeros((1, 4, 2, 2, 2))
    skip = np.zeros((1, 3, 4, 4, 4))
    y = F.upsample_concat(x, skip, np.zeros((3, 4, 1, 1, 1)), np.zeros(3))
    assert y.shape == (1, 6, 4, 4, 4)
    with pytest.raises(F.ShapeError):
        F.upsample_concat(x, np.zeros((1, 3, 5, 4, 4)), np.zeros((3, 4, 1, 1, 1)), np.zeros(3))


def test_encoder_decoder_shape_algebra():
    dims = (48, 32, 16)
    cur = dims
    for _ in range(4):
        cur = F.conv_out_dims(cur, 3, 2)
    assert cur == (3, 2, 1)
    for _ in range(4):
        cur = tuple(2 * d for d in cur)
    assert cur == dims


@pytest.mark.parametrize("k, stride", [(1, 1), (1, 2), (3, 1), (3, 2)])
def test_conv_gradcheck(k, stride):
    rng = np.random.default_rng(k + stride)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((2, 2, k, k, k))
    b = rng.standard_normal(2)
    rep = finite_diff_check(lambda t, x, w, b: A.conv3d(t, x, w, b, stride), [x, w, b])
    assert rep.n_coords >= 50 and rep.max_rel_err < 1e-4


def test_instance_norm_gradcheck():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 3, 3, 3))
    rep = finite_diff_check(lambda t, x, g, b: A.instance_norm(t, x, g, b),
                            [x, rng.standard_normal(3) + 1, rng.standard_normal(3)])
    assert rep.max_rel_err < 1e-4


def test_leaky_relu_gradcheck_exact():
    x = np.random.default_rng(8).standard_normal((1, 2, 3, 3, 3))
    x = np.where(np.abs(x) < 0.2, 0.5, x)
    # a wide step is exact on a piecewise-linear map and keeps rounding out of the quotient
    rep = finite_diff_check(lambda t, x: A.leaky_relu(t, x), [x], h=0.1)
    assert rep.max_rel_err < 1e-10


def test_upsample_concat_gradcheck():
    rng = np.random.default_rng(9)
    args = [rng.standard_normal((1, 3, 2, 2, 2)), rng.standard_normal((1, 2, 4, 4, 4)),
            rng.standard_normal((2, 3, 1, 1, 1)), rng.standard_normal(2)]
    rep = finite_diff_check(lambda t, *a: A.upsample_concat(t, *a), args)
    assert rep.max_rel_err < 1e-4


def test_gradcheck_detects_wrong_gradient():
    def bad(tape, x):
        return A._emit(tape, "bad", (x,), x.data ** 2, lambda g: (g,))

    rep = finite_diff_check(bad, [np.random.default_rng(0).standard_normal((1, 1, 2, 2, 2)) + 3])
    assert not rep.passed


def test_tape_replays_in_reverse_order():
    tape = A.GradTape()
    x = A.Var(np.random.default_rng(0).standard_normal((1, 1, 2, 2, 2)), requires_grad=True)
    w = A.parameter(np.ones((1, 1, 1, 1, 1)))
    b = A.parameter(np.zeros(1))
    h = A.conv3d(tape, x, w, b)
    h = A.leaky_relu(tape, h)
    h = A.instance_norm(tape, h, A.parameter(np.ones(1)), A.parameter(np.zeros(1)))
    names = [r.name for r in tape.records]
    tape.backward(h, np.ones(h.shape))
    assert tape.replayed == names[::-1]


def test_backends_agree():
    if len(_backend.available()) < 2:
        pytest.skip("only one kernel backend available")
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 5, 4))
    w = rng.standard_normal((2, 3, 3, 3, 3))
    outs = []
    for name in _backend.available():
        prev = _backend.use(name)
        try:
            y = F.conv3d(x, w, np.zeros(2), 2)
            outs.append((y, F.conv3d_backward(np.ones_like(y), x, w, 2)))
        finally:
            _backend.use(prev)
    (y0, g0), (y1, g1) = outs[:2]
    assert np.max(np.abs(y0 - y1)) <= 1e-6 * np.max(np.abs(y0))
    for a, b in zip(g0, g1):
        assert np.allclose(a, b, rtol=1e-10, atol=1e-10)

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vunet import nn_primitives as P
from vunet.errors import ConfigError
from vunet.rng import RngStream


@pytest.fixture(autouse=True, scope="module")
def _float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def rnd(*shape, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).standard_normal(shape))


def naive_conv2d(x, w, b, stride, padding):
    x = np.pad(np.asarray(x), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w = np.asarray(w)
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for bi in range(n):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[bi, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[bi, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


# -- conv2d --------------------------------------------------------------------

def test_conv2d_sum_of_ones():
    x = torch.ones(1, 1, 3, 3)
    w = torch.ones(1, 1, 3, 3)
    out = P.conv2d(x, w, torch.zeros(1), stride=1, padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_identity_kernel():
    x = rnd(2, 1, 5, 4)
    out = P.conv2d(x, torch.ones(1, 1, 1, 1), torch.zeros(1), padding=0)
    assert torch.equal(out, x)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_matches_loop_oracle(stride, padding):
    x = rnd(1, 2, 5, 5, seed=1)
    w = rnd(3, 2, 3, 3, seed=2)
    b = rnd(3, seed=3)
    got = P.conv2d(x, w, b, stride=stride, padding=padding).numpy()
    want = naive_conv2d(x, w, b.numpy(), stride, padding)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_output_shape_formula():
    x = rnd(2, 3, 9, 7)
    out = P.conv2d(x, rnd(4, 3, 3, 2), None, stride=2, padding=1)
    assert out.shape == (2, 4, (9 + 2 - 3) // 2 + 1, (7 + 2 - 2) // 2 + 1)


def test_conv2d_channel_mismatch_names_dimension():
    with pytest.raises(ConfigError, match="channels"):
        P.conv2d(rnd(1, 2, 4, 4), rnd(3, 5, 3, 3))


def test_conv2d_kernel_too_large():
    with pytest.raises(ConfigError, match="height"):
        P.conv2d(rnd(1, 1, 2, 8), rnd(1, 1, 5, 1), padding=0)


# -- transposed conv -----------------------------------------------------------

def test_transposed_conv_kernel_stamping():
    out = P.transposed_conv2d(torch.ones(1, 1, 1, 1), torch.ones(1, 1, 2, 2), torch.zeros(1), stride=2)
    assert out.shape == (1, 1, 2, 2)
    assert torch.equal(out, torch.ones(1, 1, 2, 2))


@pytest.mark.parametrize("seed", range(5))
def test_transposed_conv_is_adjoint_of_conv(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    k = int(rng.integers(1, 4))
    x = rnd(1, 1, 4, 4, seed=seed)
    w = rnd(1, 1, k, k, seed=seed + 100)
    y = rnd(*P.conv2d(x, w, None, stride=stride, padding=0).shape, seed=seed + 200)
    lhs = float((P.conv2d(x, w, None, stride=stride, padding=0) * y).sum())
    back = P.transposed_conv2d(y, w, None, stride=stride, padding=0)
    # transposed output may be shorter than x when stride does not tile it exactly
    h, wd = back.shape[2:]
    rhs = float((x[:, :, :h, :wd] * back).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_transposed_conv_adjoint_multichannel_padded():
    x = rnd(2, 3, 6, 6, seed=4)
    w = rnd(5, 3, 3, 3, seed=5)
    y = rnd(2, 5, 6, 6, seed=6)
    lhs = float((P.conv2d(x, w, None, stride=1, padding=1) * y).sum())
    rhs = float((x * P.transposed_conv2d(y, w, None, stride=1, padding=1)).sum())
    assert math.isclose(lhs, rhs, rel_tol=1e-10)


def test_transposed_output_size_and_pool_roundtrip():
    x = rnd(1, 2, 4, 6)
    up = P.transposed_conv2d(x, rnd(2, 3, 2, 2), torch.zeros(3), stride=2)
    assert up.shape[2:] == ((4 - 1) * 2 + 2, (6 - 1) * 2 + 2)
    assert P.max_pool2d(up, 2).shape[2:] == x.shape[2:]


def test_transposed_conv_channel_mismatch():
    with pytest.raises(ConfigError, match="channels"):
        P.transposed_conv2d(rnd(1, 3, 2, 2), rnd(2, 1, 2, 2))


# -- elu -----------------------------------------------------------------------

def test_elu_values():
    x = torch.tensor([0.0, 2.0, -1.0])
    out = P.elu(x)
    assert out[0].item() == 0.0
    assert out[1].item() == 2.0
    assert out[2].item() == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    assert out[2].item() == pytest.approx(-0.632121, abs=1e-6)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=20))
def test_elu_monotone(xs):
    xs = sorted(xs)
    out = P.elu(torch.tensor(xs)).numpy()
    assert np.all(np.diff(out) >= 0)


# -- group norm ----------------------------------------------------------------

def test_group_norm_constant_input_gives_zero():
    out = P.group_norm(torch.full((2, 4, 3, 3), 7.5), 2, torch.ones(4), torch.zeros(4))
    # the backend's running-moment reduction leaves rounding residue
    assert torch.allclose(out, torch.zeros_like(out), atol=1e-9)


def test_group_norm_fixed_point():
    x = rnd(1, 4, 5, 5, seed=7)
    g = x.reshape(1, 2, -1)
    x = ((g - g.mean(-1, keepdim=True)) / g.std(-1, unbiased=False, keepdim=True)).reshape(x.shape)
    out = P.group_norm(x, 2, torch.ones(4), torch.zeros(4))
    # only the eps term separates out from x
    np.testing.assert_allclose(out.numpy(), x.numpy(), atol=1e-4)


@pytest.mark.parametrize("seed", range(4))
def test_group_norm_statistics(seed):
    x = rnd(2, 4, 3, 3, seed=seed) * 3 + 2
    out = P.group_norm(x, 2, torch.ones(4), torch.zeros(4)).reshape(2, 2, -1)
    assert out.mean(-1).abs().max().item() < 1e-6
    var = out.var(-1, unbiased=False)
    assert ((var - 1).abs() < 1e-3).all()


def test_group_norm_affine():
    x = rnd(1, 4, 3, 3)
    gamma = torch.tensor([1.0, 2.0, 3.0, 4.0])
    beta = torch.tensor([0.5, -0.5, 1.0, 0.0])
    base = P.group_norm(x, 4, torch.ones(4), torch.zeros(4))
    out = P.group_norm(x, 4, gamma, beta)
    np.testing.assert_allclose(out.numpy(), (base * gamma[:, None, None] + beta[:, None, None]).numpy(), atol=1e-12)


def test_group_norm_bad_groups():
    with pytest.raises(ConfigError):
        P.group_norm(rnd(1, 6, 2, 2), 4)


# -- dropout2d -----------------------------------------------------------------

def test_dropout_identity_cases():
    x = rnd(2, 3, 4, 4)
    assert P.dropout2d(x, 0.0, True, RngStream(0)) is x
    assert P.dropout2d(x, 0.7, False, RngStream(0)) is x


def test_dropout_rejects_rate_one():
    with pytest.raises(ConfigError):
        P.dropout2d(rnd(1, 1, 2, 2), 1.0, True, RngStream(0))


def test_dropout_zeroes_whole_planes_and_scales():
    x = torch.ones(4, 16, 3, 3)
    out = P.dropout2d(x, 0.5, True, RngStream(3))
    planes = out.reshape(4, 16, -1)
    for plane in planes.reshape(-1, 9):
        assert torch.all(plane == 0) or torch.all(plane == 2.0)


def test_dropout_monte_carlo_expectation():
    rng = RngStream(11)
    x = torch.full((1, 1, 2, 2), 3.0)
    acc = torch.zeros_like(x)
    n = 10_000
    for _ in range(n):
        acc += P.dropout2d(x, 0.5, True, rng)
    mean = acc / n
    assert torch.all((mean - 3.0).abs() / 3.0 < 0.03)


def test_dropout_reproducible_from_stream_state():
    x = rnd(2, 8, 3, 3)
    a = P.dropout2d(x, 0.3, True, RngStream(5))
    b = P.dropout2d(x, 0.3, True, RngStream(5))
    assert torch.equal(a, b)


# -- max pool ------------------------------------------------------------------

def test_max_pool_small():
    x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert P.max_pool2d(x).item() == 4.0


def test_max_pool_constant():
    out = P.max_pool2d(torch.full((1, 2, 4, 4), 1.5))
    assert torch.all(out == 1.5) and out.shape == (1, 2, 2, 2)


def test_max_pool_matches_loop_oracle():
    x = rnd(1, 1, 4, 4, seed=9)
    got = P.max_pool2d(x).numpy()
    xn = x.numpy()
    want = np.array([[max(xn[0, 0, 2 * i + u, 2 * j + v] for u in range(2) for v in range(2))
                      for j in range(2)] for i in range(2)])
    assert np.array_equal(got[0, 0], want)


def test_max_pool_gradient_goes_to_first_max_on_ties():
    x = torch.ones(1, 1, 2, 2, requires_grad=True)
    P.max_pool2d(x).sum().backward()
    assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_max_pool_indivisible():
    with pytest.raises(ConfigError):
        P.max_pool2d(rnd(1, 1, 5, 4))


# -- dense ---------------------------------------------------------------------

def test_dense_identity_and_bias():
    x = torch.tensor([1.0, -2.0, 3.0])
    assert torch.equal(P.dense(x, torch.eye(3), torch.zeros(3)), x)
    assert P.dense(torch.tensor([9.0]), torch.zeros(1, 1), torch.tensor([5.0])).tolist() == [5.0]


def test_dense_matches_hand_matmul():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((3, 4))
    x = rng.standard_normal(4)
    b = rng.standard_normal(3)
    want = [sum(w[i, j] * x[j] for j in range(4)) + b[i] for i in range(3)]
    got = P.dense(torch.as_tensor(x), torch.as_tensor(w), torch.as_tensor(b)).numpy()
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_dense_length_mismatch():
    with pytest.raises(ConfigError, match="length"):
        P.dense(torch.ones(3), torch.ones(2, 4))


# -- gradient checks -----------------------------------------------------------

def test_grad_check_linear_is_exact():
    err = P.grad_check(P.dense, [rnd(4, seed=1), rnd(3, 4, seed=2), rnd(3, seed=3)])
    assert err < 1e-9


def test_grad_check_elu_away_from_kink():
    x = rnd(2, 4, 8, 8, seed=4)
    x = torch.where(x.abs() < 1e-3, torch.full_like(x, 0.5), x)
    assert P.grad_check(P.elu, [x]) < 1e-6


def test_grad_check_conv_small():
    err = P.grad_check(lambda x, w, b: P.conv2d(x, w, b, padding=1),
                       [rnd(1, 2, 5, 5, seed=1), rnd(3, 2, 3, 3, seed=2), rnd(3, seed=3)])
    assert err < 1e-6


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2 x g

    assert P.grad_check(Wrong.apply, [rnd(5, seed=1) + 3]) > 0.1


def test_forwards_are_pure():
    x = rnd(2, 4, 8, 8)
    w = rnd(4, 4, 3, 3)
    assert torch.equal(P.conv2d(x, w, None), P.conv2d(x, w, None))
    assert torch.equal(P.group_norm(x, 2), P.group_norm(x, 2))
    assert torch.equal(P.dropout2d(x, 0.5, True, RngStream(1)), P.dropout2d(x, 0.5, True, RngStream(1)))


def test_forward_outputs_finite():
    x = rnd(2, 4, 8, 8) * 30
    for out in (P.elu(x), P.group_norm(x, 4), P.max_pool2d(x), P.conv2d(x, rnd(2, 4, 3, 3), None),
                P.transposed_conv2d(x, rnd(4, 2, 2, 2), None)):
        assert torch.isfinite(out).all()

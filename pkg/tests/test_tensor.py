import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focalmod import tensor as T
from focalmod.exceptions import ConfigError, DimensionError, GradCheckError, InputError, NonFiniteError
from focalmod.gradsuite import kernel_checks
from focalmod.tensor import PadMode


# ---------------------------------------------------------------- oracles

def matmul_loops(x, W):
    n, k = x.shape
    m = W.shape[1]
    out = np.zeros((n, m))
    for a in range(n):
        for c in range(m):
            s = 0.0
            for b in range(k):
                s += x[a, b] * W[b, c]
            out[a, c] = s
    return out


def dwconv_loops(x, w, b, circular=False):
    B, H, W, C = x.shape
    k = w.shape[0]
    p = k // 2
    out = np.zeros_like(x)
    for n in range(B):
        for i in range(H):
            for j in range(W):
                for c in range(C):
                    s = b[c]
                    for u in range(k):
                        for v in range(k):
                            ii, jj = i + u - p, j + v - p
                            if circular:
                                ii, jj = ii % H, jj % W
                            elif not (0 <= ii < H and 0 <= jj < W):
                                continue
                            s += x[n, ii, jj, c] * w[u, v, c]
                    out[n, i, j, c] = s
    return out


def conv_loops(x, w, b, stride, padding):
    B, H, W, C = x.shape
    k, _, _, Co = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, Ho, Wo, Co))
    for n in range(B):
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[n, i * stride:i * stride + k, j * stride:j * stride + k, :]
                for o in range(Co):
                    out[n, i, j, o] = (patch * w[..., o]).sum() + b[o]
    return out


# ---------------------------------------------------------------- linear

def test_linear_identity_and_zero_weight():
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(T.linear(x, np.eye(3), np.zeros(3)), x)
    out = T.linear(np.random.default_rng(0).normal(size=(4,)), np.zeros((4, 2)), np.array([5.0, 5.0]))
    np.testing.assert_array_equal(out, [5.0, 5.0])


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(1)
    for n, k, m in [(1, 2, 3), (5, 4, 7), (3, 1, 1)]:
        x, W, b = rng.normal(size=(n, k)), rng.normal(size=(k, m)), rng.normal(size=m)
        np.testing.assert_allclose(T.linear(x, W, b), matmul_loops(x, W) + b, rtol=1e-13, atol=1e-14)


def test_linear_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 4\).*\(3, 5\)"):
        T.linear(np.zeros((2, 4)), np.zeros((3, 5)), np.zeros(5))


def test_linear_rows_do_not_depend_on_batch_neighbours():
    rng = np.random.default_rng(2)
    x, W = rng.normal(size=(37, 24)), rng.normal(size=(24, 40))
    full = T.linear(x, W, None)
    for i in (0, 5, 36):
        np.testing.assert_array_equal(full[i], T.linear(x[i:i + 1], W, None)[0])


# ---------------------------------------------------------------- dwconv

def test_dwconv_delta_kernel_is_bitwise_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 5, 3))
    for k in (1, 3, 5, 7):
        w = np.zeros((k, k, 3))
        w[k // 2, k // 2] = 1.0
        for pad in PadMode:
            np.testing.assert_array_equal(T.dwconv2d(x, w, np.zeros(3), pad), x)


def test_dwconv_ones_kernel_hand_counts():
    out = T.dwconv2d(np.ones((1, 4, 4, 1)), np.ones((3, 3, 1)), np.zeros(1), PadMode.ZERO_SAME)
    assert out[0, 1, 1, 0] == 9.0
    assert out[0, 0, 0, 0] == 4.0
    assert out[0, 0, 1, 0] == 6.0
    circ = T.dwconv2d(np.ones((1, 4, 4, 1)), np.ones((3, 3, 1)), np.zeros(1), PadMode.CIRCULAR_SAME)
    np.testing.assert_array_equal(circ, 9.0)


@pytest.mark.parametrize("shape,k,circular", [((1, 5, 5, 2), 3, False), ((2, 4, 6, 3), 5, False),
                                              ((1, 5, 4, 2), 3, True), ((1, 3, 3, 1), 7, False)])
def test_dwconv_matches_loop_reference(shape, k, circular):
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=shape), rng.normal(size=(k, k, shape[3])), rng.normal(size=shape[3])
    pad = PadMode.CIRCULAR_SAME if circular else PadMode.ZERO_SAME
    np.testing.assert_allclose(T.dwconv2d(x, w, b, pad), dwconv_loops(x, w, b, circular), rtol=1e-12, atol=1e-13)


def test_dwconv_errors():
    with pytest.raises(ConfigError):
        T.dwconv2d(np.zeros((1, 4, 4, 2)), np.zeros((2, 2, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        T.dwconv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3)), np.zeros(3))


def test_dwconv_single_pixel_is_scaled_identity_through_center():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(2, 1, 1, 3)), rng.normal(size=(5, 5, 3))
    np.testing.assert_array_equal(T.dwconv2d(x, w, np.zeros(3)), x * w[2, 2])


def test_dwconv_circular_equivariance_all_shifts_bitwise():
    rng = np.random.default_rng(6)
    x, w, b = rng.normal(size=(1, 6, 5, 2)), rng.normal(size=(5, 5, 2)), rng.normal(size=2)
    base = T.dwconv2d(x, w, b, PadMode.CIRCULAR_SAME)
    for dy in range(6):
        for dx in range(5):
            shifted = T.dwconv2d(np.roll(x, (dy, dx), axis=(1, 2)), w, b, PadMode.CIRCULAR_SAME)
            np.testing.assert_array_equal(shifted, np.roll(base, (dy, dx), axis=(1, 2)))


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(-8, 8).filter(lambda a: abs(a) > 1e-3), seed=st.integers(0, 2**16))
def test_linear_and_dwconv_are_homogeneous(alpha, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 4, 4, 3))
    W = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 3, 3))
    for f in (lambda v: T.linear(v, W, None), lambda v: T.dwconv2d(v, w, np.zeros(3))):
        np.testing.assert_allclose(f(alpha * x), alpha * f(x), rtol=1e-12, atol=1e-12 * abs(alpha))


# ---------------------------------------------------------------- conv2d (patch embedding)

@pytest.mark.parametrize("shape,k,s,p,co", [((1, 8, 8, 3), 4, 4, 0, 4), ((2, 6, 6, 2), 3, 2, 1, 3),
                                            ((1, 8, 8, 2), 7, 4, 2, 2)])
def test_conv2d_matches_loop_reference(shape, k, s, p, co):
    rng = np.random.default_rng(7)
    x, w, b = rng.normal(size=shape), rng.normal(size=(k, k, shape[3], co)), rng.normal(size=co)
    np.testing.assert_allclose(T.conv2d_forward(x, w, b, s, p)[0], conv_loops(x, w, b, s, p), rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- gelu

def test_gelu_values():
    assert T.gelu(np.array(0.0)) == 0.0
    assert abs(T.gelu(np.array(10.0)) - 10.0) < 1e-9
    ref = float(mpmath.mpf(1) * mpmath.ncdf(1))
    assert abs(float(T.gelu(np.array(1.0))) - ref) < 1e-15
    assert abs(float(T.gelu(np.array(1.0))) - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) < 1e-15
    assert str(round(ref, 9)) == "0.841344746"


def test_gelu_matches_math_erf_on_grid():
    xs = np.linspace(-6, 6, 121)
    ref = np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in xs])
    np.testing.assert_allclose(T.gelu(xs), ref, rtol=1e-14, atol=1e-16)


# ---------------------------------------------------------------- pooling

def test_global_avg_pool_examples_and_backward():
    x = np.array([1.0, 3.0, 5.0, 7.0]).reshape(1, 2, 2, 1)
    assert T.global_avg_pool(x).item() == 4.0
    np.testing.assert_array_equal(T.global_avg_pool(np.full((2, 3, 3, 2), 2.5)), 2.5)
    g = T.global_avg_pool_backward(np.full((1, 1, 1, 1), 8.0), (1, 2, 2, 1))
    np.testing.assert_array_equal(g, 2.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_global_avg_pool_permutation_invariant_bitwise(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 4, 3))
    perm = rng.permutation(20)
    xp = x.reshape(2, 20, 3)[:, perm].reshape(2, 5, 4, 3)
    np.testing.assert_array_equal(T.global_avg_pool(x), T.global_avg_pool(xp))


def test_avg_pool_excludes_padding():
    out = T.avg_pool_same_forward(np.ones((1, 4, 4, 1)), 3)[0]
    np.testing.assert_array_equal(out, 1.0)
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    assert T.avg_pool_same_forward(x, 3)[0][0, 0, 0, 0] == np.mean([0, 1, 4, 5])


# ---------------------------------------------------------------- layer norm

def test_layer_norm_cases():
    C = 4
    x = np.array([-1.5, -0.5, 0.5, 1.5])
    x = x / x.std()
    np.testing.assert_allclose(T.layer_norm(x, np.ones(C), np.zeros(C)), x, atol=1e-5)
    np.testing.assert_array_equal(T.layer_norm(np.full(3, 7.0), np.ones(3), np.zeros(3)), 0.0)
    rng = np.random.default_rng(8)
    t = rng.normal(size=(5, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    mean = t.sum(axis=1, keepdims=True) / 6
    var = ((t - mean) ** 2).sum(axis=1, keepdims=True) / 6
    np.testing.assert_allclose(T.layer_norm(t, g, b), (t - mean) / np.sqrt(var + 1e-5) * g + b, rtol=1e-12)


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ConfigError):
        T.layer_norm(np.ones(3), np.ones(3), np.zeros(3), eps=0.0)


# ---------------------------------------------------------------- softmax cross-entropy

def test_softmax_ce_uniform_and_limit():
    loss, _ = T.softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert abs(loss - math.log(4)) < 1e-15
    loss, _ = T.softmax_cross_entropy(np.array([[800.0, 0.0, 0.0]]), np.array([0]))
    assert 0.0 <= loss < 1e-300 + 1e-12


def test_softmax_ce_matches_logsumexp_oracle():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(2, 3))
    y = np.array([2, 0])
    ref = np.mean([math.log(sum(math.exp(v) for v in z[i])) - z[i, y[i]] for i in range(2)])
    loss, grad = T.softmax_cross_entropy(z, y)
    assert abs(loss - ref) < 1e-14
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[np.arange(2), y] -= 1
    np.testing.assert_allclose(grad, p / 2, rtol=1e-13)


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-1e3, 1e3), seed=st.integers(0, 2**16))
def test_softmax_ce_shift_invariant(shift, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(3, 5))
    y = rng.integers(0, 5, size=3)
    assert abs(T.softmax_cross_entropy(z + shift, y, 0.1)[0] - T.softmax_cross_entropy(z, y, 0.1)[0]) < 1e-10


def test_softmax_ce_label_errors():
    with pytest.raises(InputError):
        T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(DimensionError):
        T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0]))


# ---------------------------------------------------------------- gradient checks

def test_every_kernel_passes_gradient_check():
    reports = kernel_checks(seed=0)
    bad = [str(r) for r in reports if not r.passed(1e-4)]
    assert not bad, bad
    by_kernel = {}
    for r in reports:
        name = r.op.split("(")[0].split("[")[0]
        by_kernel[name] = by_kernel.get(name, 0) + 1
    assert all(n >= 3 for n in by_kernel.values()), by_kernel


def test_named_gradcheck_examples():
    rng = np.random.default_rng(10)
    from focalmod.gradsuite import check_gelu, check_linear
    assert check_linear(rng, (3, 4, 4)).max_rel_err < 1e-6
    assert check_gelu(rng).max_rel_err < 1e-7


def test_gradcheck_detects_wrong_gradient_and_reports_location():
    x = np.array([1.0, 2.0, 3.0])
    rep = T.grad_check(lambda: float((x ** 2).sum()), {"x": x}, {"x": np.array([2.0, 4.0, 7.0])})
    assert not rep.passed(1e-4)
    assert rep.worst_index == 2 and rep.worst_param == "x"
    assert "x[2]" in str(rep)


def test_gradcheck_rejects_float32_and_nonfinite():
    with pytest.raises(GradCheckError):
        T.grad_check(lambda: 0.0, {"x": np.zeros(2, np.float32)}, {"x": np.zeros(2)})
    x = np.zeros(2)
    with pytest.raises(GradCheckError, match=r"x\[0\]"):
        T.grad_check(lambda: float("nan"), {"x": x}, {"x": np.zeros(2)})


def test_rel_error_denominator_floor():
    assert T.rel_error(0.0, 1e-12) == pytest.approx(1e-4)
    assert T.rel_error(2.0, 1.0) == 0.5


def test_check_finite():
    with pytest.raises(NonFiniteError, match="index 1"):
        T.as_tensor([0.0, np.inf])


def test_flop_counter_linear():
    with T.count_flops() as c:
        T.linear(np.zeros((5, 3)), np.zeros((3, 4)), np.zeros(4))
    assert c.by_op == {"linear": 60, "bias": 20}

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topformer import tensor as T
from topformer.errors import ConfigError, InputError, InvariantError, ShapeError
from topformer.tensor import BatchNormParams, ConvSpec, Tensor


def t(a):
    return Tensor(np.asarray(a, np.float32))


# ---- tensor / spec basics

def test_tensor_is_read_only():
    x = t(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        x.data[0, 0, 0, 0] = 1


def test_tensor_rank_must_be_4():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2)))


def test_convspec_group_divisibility():
    with pytest.raises(ConfigError):
        ConvSpec.same(3, 4, 3, groups=2)


def test_convspec_same_padding_halves_at_stride_2():
    spec = ConvSpec.same(3, 16, 3, stride=2)
    assert spec.padding == (1, 1)
    assert spec.output_hw(512, 512) == (256, 256)


# ---- conv2d

def test_conv_1x1_scalar_scaling():
    y = T.conv2d(t([[[[1, 2], [3, 4]]]]), ConvSpec.same(1, 1, 1), np.full((1, 1, 1, 1), 2.0))
    np.testing.assert_array_equal(y.data[0, 0], [[2, 4], [6, 8]])


def test_conv_3x3_ones_corner_edge_center():
    y = T.conv2d(t(np.ones((1, 1, 3, 3))), ConvSpec.same(1, 1, 3), np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(y.data[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_identity(rng):
    x = t(rng.standard_normal((2, 3, 5, 4)))
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(T.conv2d(x, ConvSpec.same(3, 3, 1), w).data, x.data)


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(ShapeError, match="channel"):
        T.conv2d(t(np.zeros((1, 2, 3, 3))), ConvSpec.same(3, 1, 1), np.zeros((1, 3, 1, 1)))


def test_conv_weight_shape_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(t(np.zeros((1, 3, 3, 3))), ConvSpec.same(3, 2, 3), np.zeros((2, 3, 1, 1)))


@pytest.mark.parametrize("k,stride,groups,cin,cout,bias", [
    (1, 1, 1, 3, 4, False), (3, 1, 1, 2, 3, True), (3, 2, 1, 3, 2, False),
    (5, 1, 1, 2, 2, True), (5, 2, 4, 4, 4, False), (3, 1, 2, 4, 6, True),
])
def test_conv_matches_direct_summation(rng, k, stride, groups, cin, cout, bias):
    for h, w in [(5, 5), (4, 3), (1, 1)]:
        spec = ConvSpec.same(cin, cout, k, stride, groups, has_bias=bias)
        x = t(rng.standard_normal((2, cin, h, w)))
        wt = rng.standard_normal(spec.weight_dims).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32) if bias else None
        got = T.conv2d(x, spec, wt, b).data
        ref = T.conv2d_reference(x, spec, wt, b)
        assert np.max(np.abs(got - ref)) < 1e-5


def test_grouped_conv_equals_per_group_convs(rng):
    spec = ConvSpec.same(4, 6, 3, groups=2)
    x = rng.standard_normal((1, 4, 5, 5)).astype(np.float32)
    w = rng.standard_normal(spec.weight_dims).astype(np.float32)
    got = T.conv2d(t(x), spec, w).data
    sub = ConvSpec.same(2, 3, 3)
    parts = [T.conv2d(t(x[:, 2 * g:2 * g + 2]), sub, w[3 * g:3 * g + 3]).data for g in range(2)]
    np.testing.assert_allclose(got, np.concatenate(parts, 1), atol=1e-5)


# ---- depthwise

def test_depthwise_per_channel_scaling():
    x = t(np.ones((1, 2, 2, 2)))
    y = T.depthwise_conv2d(x, ConvSpec.same(2, 2, 1, groups=2), np.array([2, 3], np.float32).reshape(2, 1, 1, 1))
    np.testing.assert_array_equal(y.data[0, 0], 2)
    np.testing.assert_array_equal(y.data[0, 1], 3)


def test_depthwise_zero_weight(rng):
    spec = ConvSpec.same(3, 3, 3, groups=3)
    y = T.depthwise_conv2d(t(rng.standard_normal((1, 3, 4, 4))), spec, np.zeros(spec.weight_dims))
    assert not y.data.any()


def test_depthwise_requires_groups_equal_channels():
    with pytest.raises(ConfigError):
        T.depthwise_conv2d(t(np.ones((1, 2, 2, 2))), ConvSpec.same(2, 2, 1), np.ones((2, 2, 1, 1)))


# ---- batch norm folding

def _bn(c, gamma=1.0, beta=0.0, mean=0.0, var=1.0, eps=0.0):
    f = lambda v: np.full(c, v, np.float32)
    return BatchNormParams(f(gamma), f(beta), f(mean), f(var), eps)


def test_fold_identity(rng):
    spec = ConvSpec.same(2, 3, 3, has_bias=True)
    w = rng.standard_normal(spec.weight_dims).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    w2, b2 = T.batchnorm_fold(spec, w, b, _bn(3))
    np.testing.assert_array_equal(w2, w)
    np.testing.assert_array_equal(b2, b)


def test_fold_pure_scaling(rng):
    spec = ConvSpec.same(2, 3, 1)
    w = rng.standard_normal(spec.weight_dims).astype(np.float32)
    w2, b2 = T.batchnorm_fold(spec, w, None, _bn(3, gamma=2.0))
    np.testing.assert_array_equal(w2, 2 * w)
    np.testing.assert_array_equal(b2, 0)


def test_fold_negative_variance_is_invariant_violation():
    with pytest.raises(InvariantError, match="negative"):
        T.batchnorm_fold(ConvSpec.same(1, 1, 1), np.ones((1, 1, 1, 1)), None, _bn(1, var=-1.0))


@pytest.mark.parametrize("seed", range(5))
def test_fold_equivalence_random(seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec.same(4, 5, 3, stride=2)
    w = rng.standard_normal(spec.weight_dims).astype(np.float32)
    bn = BatchNormParams(rng.uniform(0.5, 2, 5), rng.uniform(-1, 1, 5), rng.uniform(-1, 1, 5),
                         np.exp(rng.uniform(np.log(1e-3), np.log(10), 5)))
    x = t(rng.standard_normal((2, 4, 6, 6)))
    ref = T.batchnorm(T.conv2d(x, spec, w), bn).data.astype(np.float64)
    w2, b2 = T.batchnorm_fold(spec, w, None, bn)
    got = T.conv2d(x, ConvSpec.same(4, 5, 3, stride=2, has_bias=True), w2, b2).data
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-4


# ---- activations, softmax

def test_relu6_clamps():
    y = T.relu6(t(np.array([-3, 0, 2.5, 6, 9], np.float32).reshape(1, 1, 1, 5)))
    np.testing.assert_array_equal(y.flat(), [0, 0, 2.5, 6, 6])


def test_sigmoid_zero_and_extremes():
    y = T.sigmoid(t(np.array([0, -1000, 1000], np.float32).reshape(1, 1, 1, 3))).flat()
    np.testing.assert_array_equal(y, [0.5, 0, 1])


def test_softmax_symmetric_and_stable():
    y = T.softmax_lastdim(t([[[[0, 0], [1000, 1000]]]])).data
    np.testing.assert_array_equal(y, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 9), st.floats(-50, 50), st.integers(0, 10_000))
def test_softmax_rows_and_shift(rows, cols, shift, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, rows, cols)) * 10
    s = T.softmax_lastdim(Tensor(x)).data
    assert np.all(np.abs(s.sum(-1) - 1) < 1e-6)
    assert np.max(np.abs(T.softmax_lastdim(Tensor(x + shift)).data - s)) < 1e-6


# ---- pooling / interpolation

def test_pool_constant():
    np.testing.assert_array_equal(T.adaptive_avg_pool(t(np.full((1, 1, 4, 4), 7)), 2, 2).data, 7)


def test_pool_bin_average():
    x = t(np.arange(1, 17).reshape(1, 1, 4, 4))
    np.testing.assert_allclose(T.adaptive_avg_pool(x, 2, 2).data[0, 0], [[3.5, 5.5], [11.5, 13.5]])


def test_pool_identity(rng):
    x = t(rng.standard_normal((1, 2, 3, 5)))
    np.testing.assert_array_equal(T.adaptive_avg_pool(x, 3, 5).data, x.data)


def test_pool_uneven_bins():
    # bins [0,2) and [1,3) over a length-3 axis
    x = t(np.array([1, 2, 4], np.float32).reshape(1, 1, 1, 3))
    np.testing.assert_allclose(T.adaptive_avg_pool(x, 1, 2).flat(), [1.5, 3.0])


def test_pool_upscale_rejected():
    with pytest.raises(InputError):
        T.adaptive_avg_pool(t(np.ones((1, 1, 2, 2))), 4, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_pool_preserves_mean_on_even_bins(oh, ow, fh, fw, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, oh * fh, ow * fw))
    y = T.adaptive_avg_pool(Tensor(x), oh, ow).data
    assert abs(y.mean() - x.mean()) < 1e-6


def test_bilinear_constant_and_degenerate():
    np.testing.assert_allclose(T.bilinear_upsample(t(np.full((1, 2, 3, 2), 4.0)), 7, 5).data, 4.0, rtol=1e-6)
    np.testing.assert_array_equal(T.bilinear_upsample(t(np.full((1, 1, 1, 1), -2.5)), 3, 4).data, -2.5)


def test_bilinear_half_pixel_rows():
    y = T.bilinear_upsample(t([[[[0, 1], [0, 1]]]]), 2, 4).data[0, 0]
    np.testing.assert_allclose(y, [[0, 0.25, 0.75, 1]] * 2)


def test_bilinear_align_corners_rows():
    y = T.bilinear_upsample(t([[[[0, 1]]]]), 1, 4, align_corners=True).flat()
    np.testing.assert_allclose(y, [0, 1 / 3, 2 / 3, 1], rtol=1e-6)


def test_bilinear_shrink_rejected():
    with pytest.raises(InputError):
        T.bilinear_upsample(t(np.ones((1, 1, 4, 4))), 2, 2)


# ---- elementwise, concat/split, matmul

def test_split_inverts_concat(rng):
    a, b = t(rng.standard_normal((1, 3, 2, 2))), t(rng.standard_normal((1, 2, 2, 2)))
    sa, sb = T.split_channels(T.concat_channels([a, b]), [3, 2])
    np.testing.assert_array_equal(sa.data, a.data)
    np.testing.assert_array_equal(sb.data, b.data)


def test_hadamard_ones_identity(rng):
    x = t(rng.standard_normal((1, 2, 3, 3)))
    np.testing.assert_array_equal(T.hadamard(x, t(np.ones((1, 2, 3, 3)))).data, x.data)


def test_matmul_identity(rng):
    m = t(rng.standard_normal((1, 1, 2, 2)))
    np.testing.assert_array_equal(T.matmul_batched(t(np.eye(2).reshape(1, 1, 2, 2)), m).data, m.data)


@pytest.mark.parametrize("op,args", [
    (T.add, ((1, 2, 2, 2), (1, 2, 2, 3))),
    (T.hadamard, ((1, 2, 2, 2), (1, 3, 2, 2))),
    (lambda a, b: T.concat_channels([a, b]), ((1, 2, 2, 2), (1, 2, 3, 2))),
    (T.matmul_batched, ((1, 1, 2, 3), (1, 1, 2, 3))),
])
def test_shape_mismatch_errors(op, args):
    with pytest.raises(ShapeError):
        op(*(t(np.zeros(s)) for s in args))


def test_split_sizes_must_sum():
    with pytest.raises(ShapeError):
        T.split_channels(t(np.zeros((1, 4, 1, 1))), [1, 2])


# ---- determinism across worker counts

def test_kernels_bit_identical_across_threads(rng):
    spec = ConvSpec.same(16, 32, 3)
    dw = ConvSpec.same(32, 32, 5, groups=32)
    x = t(rng.standard_normal((1, 16, 40, 40)))
    w1 = rng.standard_normal(spec.weight_dims).astype(np.float32)
    w2 = rng.standard_normal(dw.weight_dims).astype(np.float32)
    outs = []
    old = T.get_num_threads()
    try:
        for n in (1, 2, 4):
            T.set_num_threads(n)
            outs.append(T.conv2d(T.conv2d(x, spec, w1), dw, w2).data.copy())
    finally:
        T.set_num_threads(old)
    assert all(np.array_equal(outs[0], o) for o in outs[1:])

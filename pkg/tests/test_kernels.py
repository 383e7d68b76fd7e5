"""Convolution engine tests: float conv against the 6-loop oracle, binary
conv against the float oracle on sign-binarized operands, packed/sim path
bit-identity, grouped/depth-wise behavior, pooling, and backward passes
against finite differences and the scripted latent-gradient formula."""

import numpy as np
import pytest

from conftest import naive_avg_pool, naive_conv
from mobinet import kernels
from mobinet.binarize import optimal_scales
from mobinet.errors import (
    DegenerateFilterError,
    DimensionError,
    InvariantError,
    StaleLayerError,
)
from mobinet.kernels import (
    BinaryConvLayer,
    KDependency,
    avg_pool,
    avg_pool_backward,
    binary_conv,
    binary_conv_backward,
    binary_conv_forward_cached,
    float_conv,
    float_conv_backward,
)
from test_binarize import scripted_eq5


def sign_pm1(x):
    return np.where(x >= 0, 1.0, -1.0)


def binary_oracle(x, layer):
    """Float-conv oracle: sign-binarize, pad with -1, scale by alpha."""
    xs = sign_pm1(x)
    out = naive_conv(
        xs,
        sign_pm1(layer.latent_weights),
        groups=layer.groups,
        stride=1,
        padding=layer.padding,
        pad_value=-1.0,
    )
    return out * layer.scales[None, :, None, None]


class TestFloatConv:
    def test_all_ones_3x3(self):
        out = float_conv(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_identity_1x1_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        assert np.allclose(float_conv(x, w), x)

    @pytest.mark.parametrize(
        "groups,stride,padding,kernel",
        [(1, 1, 0, 3), (1, 1, 1, 3), (2, 1, 1, 3), (4, 1, 0, 1),
         (1, 2, 1, 3), (2, 2, 0, 3), (1, 2, 0, 1)],
    )
    def test_matches_naive_loops(self, rng, groups, stride, padding, kernel):
        c_in, c_out = 4, 8
        x = rng.standard_normal((2, c_in, 6, 7))
        w = rng.standard_normal((c_out, c_in // groups, kernel, kernel))
        got = float_conv(x, w, groups=groups, stride=stride, padding=padding)
        want = naive_conv(x, w, groups=groups, stride=stride, padding=padding)
        assert got.shape == want.shape
        assert np.allclose(got, want, atol=1e-6)

    def test_output_shape_formula(self, rng):
        for h, k, pad, stride in [(6, 3, 0, 1), (6, 3, 1, 2), (9, 1, 0, 3), (5, 3, 2, 2)]:
            x = rng.standard_normal((1, 2, h, h))
            w = rng.standard_normal((2, 2, k, k))
            out = float_conv(x, w, stride=stride, padding=pad)
            expect = (h + 2 * pad - k) // stride + 1
            assert out.shape[2] == out.shape[3] == expect

    def test_shape_errors(self, rng):
        x = rng.standard_normal((1, 4, 5, 5))
        with pytest.raises(DimensionError):
            float_conv(x, rng.standard_normal((4, 3, 3, 3)))  # channel mismatch
        with pytest.raises(DimensionError):
            float_conv(x, rng.standard_normal((3, 2, 3, 3)), groups=2)  # oc % groups
        with pytest.raises(DimensionError):
            float_conv(x, rng.standard_normal((4, 4, 7, 7)))  # kernel too big


class TestKDependency:
    def test_depthwise_extreme(self):
        assert KDependency(0, 8).groups == 8

    def test_single_group_degenerate(self):
        assert KDependency(3, 8).groups == 1

    def test_divisibility_enforced(self):
        with pytest.raises(InvariantError):
            KDependency(2, 6)
        with pytest.raises(InvariantError):
            KDependency(-1, 8)


class TestBinaryConvLayer:
    def test_degenerate_filter_rejected(self, rng):
        w = rng.standard_normal((4, 2, 3, 3))
        w[2] = 0.0
        with pytest.raises(DegenerateFilterError):
            BinaryConvLayer(w)

    def test_staleness_guard(self, rng):
        layer = BinaryConvLayer(rng.standard_normal((4, 4, 1, 1)))
        x = rng.standard_normal((1, 4, 3, 3))
        binary_conv(x, layer)
        layer.latent_weights[0, 0, 0, 0] *= -1
        layer.mark_stale()
        with pytest.raises(StaleLayerError):
            binary_conv(x, layer)
        layer.sync()
        binary_conv(x, layer)

    def test_sync_tracks_latent(self, rng):
        layer = BinaryConvLayer(rng.standard_normal((4, 4, 1, 1)))
        layer.latent_weights[...] = np.abs(layer.latent_weights)
        layer.mark_stale()
        layer.sync()
        assert np.all(layer.binary_pm1 == 1.0)
        flat = layer.latent_weights.reshape(4, -1)
        expect = optimal_scales(flat).astype(np.float32).astype(np.float64)
        assert np.array_equal(layer.scales, expect)

    def test_scales_are_f32_quantized(self, rng):
        layer = BinaryConvLayer(rng.standard_normal((3, 5, 3, 3)))
        assert np.array_equal(layer.scales, layer.scales.astype(np.float32))


class TestBinaryConv:
    def test_all_positive_gives_nine_alpha(self, rng):
        lat = np.abs(rng.standard_normal((4, 2, 3, 3))) + 0.1
        layer = BinaryConvLayer(lat, groups=1, padding=0)
        x = np.ones((1, 2, 5, 5))
        out = binary_conv(x, layer)
        for o in range(4):
            assert np.allclose(out[0, o], 18 * layer.scales[o])  # 2 ch * 9 = 18 bits

    def test_matches_float_oracle_randomized(self, rng):
        """1000 random (shape, K, padding) cases, rel err <= 1e-5; the
        integer dots are exact."""
        for _ in range(1000):
            k = int(rng.choice([1, 3]))
            K = int(rng.integers(0, 3))
            c_in = int(rng.choice([4, 8])) * (1 << K) // (1 << K)
            c_in = max(c_in, 1 << K)
            groups = KDependency(K, c_in).groups
            c_out = groups * int(rng.integers(1, 3))
            h = int(rng.integers(k, 7))
            pad = int(rng.integers(0, 2)) if k == 3 else 0
            x = rng.standard_normal((1, c_in, h, h))
            lat = rng.standard_normal((c_out, c_in // groups, k, k))
            layer = BinaryConvLayer(lat, groups=groups, padding=pad)
            got = binary_conv(x, layer)
            want = binary_oracle(x, layer)
            assert np.allclose(got, want, rtol=1e-5, atol=1e-12)
            dots = got / layer.scales[None, :, None, None]
            assert np.allclose(dots, np.round(dots), atol=1e-9)

    def test_packed_and_sim_paths_bit_identical(self, rng):
        for c_in, groups, k, pad in [(8, 2, 3, 1), (64, 1, 3, 1), (128, 1, 1, 0),
                                     (12, 12, 3, 1), (16, 4, 3, 0)]:
            lat = rng.standard_normal((max(groups, 8), c_in // groups, k, k))
            layer = BinaryConvLayer(lat, groups=groups, padding=pad)
            x = rng.standard_normal((2, c_in, 6, 6))
            a = binary_conv(x, layer, force_path="sim")
            b = binary_conv(x, layer, force_path="packed")
            assert np.array_equal(a, b)

    def test_sign_antisymmetry_without_zeros(self, rng):
        """binary_conv(-x) = -binary_conv(x) when no element is 0 and no
        padding is involved (padding bits don't flip with the input)."""
        lat = rng.standard_normal((6, 3, 3, 3))
        layer = BinaryConvLayer(lat, groups=1, padding=0)
        x = rng.standard_normal((2, 3, 6, 6))
        x[x == 0.0] = 0.5
        assert np.array_equal(binary_conv(-x, layer), -binary_conv(x, layer))

    def test_input_binarizes_zero_to_plus_one(self, rng):
        layer = BinaryConvLayer(np.ones((1, 1, 1, 1)), groups=1, padding=0)
        x = np.zeros((1, 1, 2, 2))
        out = binary_conv(x, layer)
        assert np.allclose(out, layer.scales[0])  # sign(0) = +1 everywhere

    def test_channel_mismatch(self, rng):
        layer = BinaryConvLayer(rng.standard_normal((2, 3, 1, 1)))
        with pytest.raises(DimensionError):
            binary_conv(rng.standard_normal((1, 4, 3, 3)), layer)


class TestGroupedBinaryConv:
    def test_k0_is_depthwise(self, rng):
        c = 8
        kdep = KDependency(0, c)
        assert kdep.groups == c
        lat = rng.standard_normal((c, 1, 3, 3))
        layer = BinaryConvLayer.from_kdependency(lat, kdep, padding=1)
        x = rng.standard_normal((1, c, 5, 5))
        got = binary_conv(x, layer)
        # each output channel depends only on its own input channel
        for ch in range(c):
            solo = BinaryConvLayer(lat[ch : ch + 1], groups=1, padding=1)
            want = binary_conv(x[:, ch : ch + 1], solo)
            assert np.allclose(got[:, ch : ch + 1], want)

    def test_full_k_is_dense(self, rng):
        c = 8
        kdep = KDependency(3, c)
        assert kdep.groups == 1
        lat = rng.standard_normal((c, c, 3, 3))
        layer = BinaryConvLayer.from_kdependency(lat, kdep, padding=1)
        dense = BinaryConvLayer(lat, groups=1, padding=1)
        x = rng.standard_normal((1, c, 5, 5))
        assert np.array_equal(binary_conv(x, layer), binary_conv(x, dense))

    def test_c4_k1_block_diagonal_oracle(self, rng):
        """c=4, K=1 -> groups=2: channel pairs {0,1} and {2,3} convolve
        independently, verified against two dense convs."""
        kdep = KDependency(1, 4)
        assert kdep.groups == 2
        lat = rng.standard_normal((4, 2, 3, 3))
        layer = BinaryConvLayer.from_kdependency(lat, kdep, padding=1)
        x = rng.standard_normal((2, 4, 6, 6))
        got = binary_conv(x, layer)
        lo = BinaryConvLayer(lat[:2], groups=1, padding=1)
        hi = BinaryConvLayer(lat[2:], groups=1, padding=1)
        assert np.allclose(got[:, :2], binary_conv(x[:, :2], lo))
        assert np.allclose(got[:, 2:], binary_conv(x[:, 2:], hi))

    def test_group_locality(self, rng):
        """Zeroing input channels of group g changes only group g outputs."""
        lat = rng.standard_normal((8, 2, 3, 3))
        layer = BinaryConvLayer(lat, groups=4, padding=1)
        x = rng.standard_normal((1, 8, 5, 5))
        base = binary_conv(x, layer)
        x2 = x.copy()
        x2[:, 2:4] = -1.0  # flip group 1 inputs to constant -1
        out = binary_conv(x2, layer)
        assert np.allclose(out[:, :2], base[:, :2])
        assert np.allclose(out[:, 4:], base[:, 4:])


class TestAvgPool:
    def test_constant_preserved(self):
        x = np.full((1, 2, 4, 4), 3.25)
        assert np.allclose(avg_pool(x, 2, 2), 3.25)

    def test_hand_mean(self):
        x = np.array([[[[1.0, 3.0], [5.0, 7.0]]]])
        assert avg_pool(x, 2, 2)[0, 0, 0, 0] == 4.0

    def test_matches_naive(self, rng):
        for h, win, stride in [(6, 2, 2), (8, 4, 4), (6, 3, 3), (7, 3, 2)]:
            x = rng.standard_normal((2, 3, h, h))
            assert np.allclose(avg_pool(x, win, stride), naive_avg_pool(x, win, stride),
                               atol=1e-12)

    def test_preserves_global_mean_exact_tiling(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        pooled = avg_pool(x, 2, 2)
        assert np.allclose(pooled.mean(), x.mean(), atol=1e-12)

    def test_dimension_error(self, rng):
        with pytest.raises(DimensionError):
            avg_pool(rng.standard_normal((1, 1, 5, 5)), 2, 2)


class TestFloatConvBackward:
    def test_zero_grad_gives_zero(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((4, 2, 3, 3))
        g_x, g_w = float_conv_backward(np.zeros((1, 4, 3, 3)), x, w)
        assert np.all(g_x == 0) and np.all(g_w == 0)

    @pytest.mark.parametrize("groups,stride,padding", [(1, 1, 1), (2, 1, 0), (1, 2, 1)])
    def test_matches_finite_differences(self, rng, groups, stride, padding):
        x = rng.standard_normal((2, 4, 5, 5))
        w = rng.standard_normal((4, 4 // groups, 3, 3))
        probe = rng.standard_normal(
            float_conv(x, w, groups=groups, stride=stride, padding=padding).shape
        )
        g_x, g_w = float_conv_backward(probe, x, w, groups=groups, stride=stride,
                                       padding=padding)

        def loss():
            return float(
                (float_conv(x, w, groups=groups, stride=stride, padding=padding) * probe).sum()
            )

        for arr, grad in ((x, g_x), (w, g_w)):
            flat, gflat = arr.ravel(), grad.ravel()
            for i in rng.choice(flat.size, size=8, replace=False):
                old = flat[i]
                h = 1e-6
                flat[i] = old + h
                fp = loss()
                flat[i] = old - h
                fm = loss()
                flat[i] = old
                fd = (fp - fm) / (2 * h)
                assert gflat[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestAvgPoolBackward:
    def test_matches_finite_differences(self, rng):
        x = rng.standard_normal((1, 2, 6, 6))
        probe = rng.standard_normal((1, 2, 3, 3))
        g = avg_pool_backward(probe, x.shape, 2, 2)

        def loss():
            return float((avg_pool(x, 2, 2) * probe).sum())

        flat, gflat = x.ravel(), g.ravel()
        for i in rng.choice(flat.size, size=10, replace=False):
            old = flat[i]
            flat[i] = old + 1e-6
            fp = loss()
            flat[i] = old - 1e-6
            fm = loss()
            flat[i] = old
            assert gflat[i] == pytest.approx((fp - fm) / 2e-6, rel=1e-5, abs=1e-10)


class TestBinaryConvBackward:
    def test_zero_upstream_gives_zero(self, rng):
        layer = BinaryConvLayer(rng.standard_normal((4, 2, 3, 3)), groups=2, padding=1)
        x = rng.standard_normal((1, 4, 5, 5))
        out, cache = binary_conv_forward_cached(x, layer)
        g_in, g_lat = binary_conv_backward(np.zeros_like(out), layer, cache)
        assert np.all(g_in == 0) and np.all(g_lat == 0)

    def test_latent_grad_matches_scripted_formula(self, rng):
        """The latent gradient equals the scripted rule applied to the
        cached dL/dW_hat, filter by filter, exactly."""
        for _ in range(25):
            groups = int(rng.choice([1, 2, 4]))
            c_in, c_out = 4 * groups, 2 * groups
            layer = BinaryConvLayer(
                rng.standard_normal((c_out, c_in // groups, 3, 3)),
                groups=groups,
                padding=1,
            )
            x = rng.standard_normal((2, c_in, 5, 5))
            out, cache = binary_conv_forward_cached(x, layer)
            g_out = rng.standard_normal(out.shape)
            g_in, g_lat = binary_conv_backward(g_out, layer, cache)

            # independent dL/dW_hat: correlate upstream grad with the
            # cached +-1 patches, then run the scripted rule per filter
            cols = cache["cols"]
            oh, ow = cache["oh"], cache["ow"]
            g_r = (
                g_out.reshape(2, groups, c_out // groups, oh * ow)
                .transpose(1, 2, 0, 3)
                .reshape(groups, c_out // groups, -1)
            )
            g_what = np.matmul(g_r, cols.transpose(0, 2, 1)).reshape(c_out, -1)
            lat_rows = layer.latent_weights.reshape(c_out, -1)
            for f in range(c_out):
                want = scripted_eq5(lat_rows[f], g_what[f], alpha=layer.scales[f])
                assert np.allclose(g_lat.reshape(c_out, -1)[f], want, atol=1e-12)

    def test_input_grad_is_ste_masked(self, rng):
        layer = BinaryConvLayer(rng.standard_normal((4, 4, 1, 1)))
        x = rng.standard_normal((1, 4, 3, 3)) * 3.0
        out, cache = binary_conv_forward_cached(x, layer)
        g_in, _ = binary_conv_backward(np.ones_like(out), layer, cache)
        assert np.all(g_in[np.abs(x) > 1.0] == 0.0)

    def test_backward_without_cache_raises(self, rng):
        from mobinet.errors import StateError

        layer = BinaryConvLayer(rng.standard_normal((2, 2, 1, 1)))
        with pytest.raises(StateError):
            binary_conv_backward(np.zeros((1, 2, 3, 3)), layer, None)

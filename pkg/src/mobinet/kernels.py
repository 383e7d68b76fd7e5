"""Convolution engines: float (the oracle path), packed binary
xnor-popcount, K-dependency grouped variants, and average pooling.

Packing/padding contracts fixed here:

  * patch rows span (channels-in-group, ki, kj) per output pixel, i.e.
    im2row per group with the channel index outermost, matching the
    (out_c, in_c/groups, k, k) weight layout;
  * binary convs binarize the input first and pad the *binarized* plane
    with -1 (bit 0), so borders carry no +1 bias from sign(0) = +1;
  * binary convs are stride 1; spatial downsampling is avg_pool's job;
  * the packed path and the word-free "sim" path (float GEMM over +-1
    planes, scale applied after accumulation) are bit-identical: +-1 dot
    products are exact integers well below 2^53.

The dense packed fast path reorders rows to (ki, kj, channel-word) so the
input plane is packed once and gathered per window; dot products are
order-invariant because the packed weights use the same order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bitpack
from .binarize import STE_THRESHOLD, optimal_scales, weight_gradient
from .errors import (
    DegenerateFilterError,
    DimensionError,
    InvariantError,
    StaleLayerError,
    StateError,
)

# Minimum row length at which packing pays for itself; below this the
# word-free +-1 accumulation path is used (identical results).
PACKED_MIN_ROW_BITS = 64


def conv_output_size(size: int, kernel: int, padding: int, stride: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def as_float(x) -> np.ndarray:
    """View x as a float array, defaulting non-float input to float64."""
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def sign_pm1(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1, preserving dtype."""
    one = x.dtype.type(1.0)
    return np.where(x >= 0, one, -one)


@dataclass(frozen=True)
class KDependency:
    """Channel-dependency level: groups = channels / 2**K.

    K = 0 is depth-wise (every channel its own group); K = log2(channels)
    is a single dense group.
    """

    K: int
    channels: int

    def __post_init__(self):
        if self.K < 0:
            raise InvariantError("K must be non-negative")
        if self.channels % (1 << self.K):
            raise InvariantError(
                f"2^K = {1 << self.K} must divide channels = {self.channels}"
            )

    @property
    def groups(self) -> int:
        return self.channels // (1 << self.K)


def _check_conv_shapes(x, w, groups, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv expects x (N,C,H,W) and w (OC,ICG,k,k)")
    n, c, h, width = x.shape
    oc, icg, kh, kw = w.shape
    if kh != kw:
        raise DimensionError("only square kernels supported")
    if c % groups or oc % groups:
        raise DimensionError(
            f"channels {c} and filters {oc} must be divisible by groups {groups}"
        )
    if c // groups != icg:
        raise DimensionError(
            f"weight expects {icg} channels/group, input provides {c // groups}"
        )
    if h + 2 * padding < kh or width + 2 * padding < kh:
        raise DimensionError("spatial dims smaller than kernel after padding")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    return n, c, h, width, oc, icg, kh


def _im2col(x, kernel, stride, padding, groups, pad_value=0.0):
    """Patch matrix (G, R, N*P) with R = (C/G)*k*k, P = OH*OW.

    The group axis leads so each group is one full-batch GEMM operand.
    """
    n, c = x.shape[:2]
    if padding:
        x = np.pad(
            x,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=pad_value,
        )
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    icg = c // groups
    # (N, C, OH, OW, k, k) -> (G, ICG, k, k, N, OH*OW) -> (G, R, N*P)
    cols = (
        win.reshape(n, groups, icg, oh, ow, kernel, kernel)
        .transpose(1, 2, 5, 6, 0, 3, 4)
        .reshape(groups, icg * kernel * kernel, n * oh * ow)
    )
    return cols, oh, ow


def _gemm_out_to_nchw(out_g, n, oc, groups, oh, ow):
    """(G, OCG, N*P) GEMM result -> (N, OC, OH, OW)."""
    ocg = oc // groups
    return (
        out_g.reshape(groups, ocg, n, oh * ow)
        .transpose(2, 0, 1, 3)
        .reshape(n, oc, oh, ow)
    )


def _nchw_to_gemm(g_out, n, oc, groups, oh, ow):
    """(N, OC, OH, OW) upstream gradient -> (G, OCG, N*P)."""
    ocg = oc // groups
    return (
        np.asarray(g_out)
        .reshape(n, groups, ocg, oh * ow)
        .transpose(1, 2, 0, 3)
        .reshape(groups, ocg, n * oh * ow)
    )


def _col2im(g_cols, x_shape, kernel, stride, padding, oh, ow):
    """Adjoint of _im2col: scatter-add (G, R, N*P) gradients onto the input."""
    n, c, h, w = x_shape
    groups = g_cols.shape[0]
    icg = c // groups
    g = (
        g_cols.reshape(groups, icg, kernel, kernel, n, oh, ow)
        .transpose(4, 0, 1, 2, 3, 5, 6)
        .reshape(n, c, kernel, kernel, oh, ow)
    )
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g_cols.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            gx[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += g[
                :, :, ki, kj
            ]
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + w]
    return gx


def float_conv(x, w, groups: int = 1, stride: int = 1, padding: int = 0):
    """Standard grouped cross-correlation.

    Output spatial size = floor((H + 2*pad - k) / stride) + 1. This is the
    full-precision path and the oracle the binary kernels are tested
    against. Computes in the input's float dtype (float64 by default).
    """
    x = as_float(x)
    w = np.asarray(w, dtype=x.dtype)
    n, c, _, _, oc, _, k = _check_conv_shapes(x, w, groups, stride, padding)
    cols, oh, ow = _im2col(x, k, stride, padding, groups)
    wg = w.reshape(groups, oc // groups, -1)
    out = np.matmul(wg, cols)
    return _gemm_out_to_nchw(out, n, oc, groups, oh, ow)


def float_conv_backward(g_out, x, w, groups: int = 1, stride: int = 1, padding: int = 0):
    """Gradients (g_x, g_w) of float_conv. Recomputes the patch matrix."""
    x = as_float(x)
    w = np.asarray(w, dtype=x.dtype)
    n, c, _, _, oc, _, k = _check_conv_shapes(x, w, groups, stride, padding)
    cols, oh, ow = _im2col(x, k, stride, padding, groups)
    g = _nchw_to_gemm(g_out, n, oc, groups, oh, ow)
    wg = w.reshape(groups, oc // groups, -1)
    g_w = np.matmul(g, cols.transpose(0, 2, 1)).reshape(w.shape)
    g_cols = np.matmul(wg.transpose(0, 2, 1), g)
    g_x = _col2im(g_cols, x.shape, k, stride, padding, oh, ow)
    return g_x, g_w


def avg_pool(x, window: int, stride: int | None = None):
    """Mean over window x window patches; stride defaults to window."""
    x = as_float(x)
    if x.ndim != 4:
        raise DimensionError("avg_pool expects (N,C,H,W)")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if h < window or w < window or (h - window) % stride or (w - window) % stride:
        raise DimensionError(
            f"spatial dims ({h},{w}) not tileable by window {window} stride {stride}"
        )
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.mean(axis=(4, 5))


def avg_pool_backward(g_out, x_shape, window: int, stride: int | None = None):
    """Gradient of avg_pool: spread g/window^2 over each pooled patch."""
    stride = window if stride is None else stride
    n, c, h, w = x_shape
    g = np.asarray(g_out) / (window * window)
    oh, ow = g.shape[2], g.shape[3]
    gx = np.zeros((n, c, h, w), dtype=g.dtype)
    for ki in range(window):
        for kj in range(window):
            gx[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += g
    return gx


class BinaryConvLayer:
    """Latent float weights plus their derived 1-bit form and scales.

    latent_weights: (out_c, in_c/groups, k, k) float64, updated by the
    optimizer. binary state (sign weights, per-filter scales, packed rows)
    is derived by sync() and guarded by a staleness flag: mutate the latent
    weights, call mark_stale(), and sync() before the next use. Scales are
    quantized through f32 at sync time so in-memory forwards match the
    serialized model bit-exactly.
    """

    stride = 1  # binary convs never stride; pooling downsamples

    def __init__(self, latent_weights, groups: int = 1, padding: int = 0):
        w = as_float(latent_weights)
        if w.ndim != 4:
            raise DimensionError("latent weights must be (OC, ICG, k, k)")
        oc, icg, kh, kw = w.shape
        if kh != kw:
            raise DimensionError("only square kernels supported")
        if oc % groups:
            raise DimensionError(f"out channels {oc} not divisible by groups {groups}")
        self.latent_weights = w
        self.groups = int(groups)
        self.padding = int(padding)
        self.kernel = int(kh)
        self.out_channels = oc
        self.in_channels = icg * groups
        self._stale = True
        self.binary_pm1 = None
        self.scales = None
        self._packed_cache = {}
        self.sync()

    @classmethod
    def from_kdependency(cls, latent_weights, kdep: KDependency, padding: int = 0):
        return cls(latent_weights, groups=kdep.groups, padding=padding)

    @property
    def stale(self) -> bool:
        return self._stale

    @property
    def row_len(self) -> int:
        return (self.in_channels // self.groups) * self.kernel * self.kernel

    def mark_stale(self):
        self._stale = True

    def sync(self):
        """Recompute sign weights and f32-quantized scales from the latent
        weights. Raises DegenerateFilterError on an all-zero filter."""
        w = self.latent_weights
        flat = w.reshape(self.out_channels, -1)
        if np.any(np.all(flat == 0.0, axis=1)):
            raise DegenerateFilterError("latent weights contain an all-zero filter")
        self.binary_pm1 = sign_pm1(w)
        self.scales = optimal_scales(flat).astype(np.float32).astype(w.dtype)
        self._packed_cache = {}
        self._stale = False

    @property
    def binary_weights(self) -> bitpack.BitTensor:
        """Packed sign weights, rows = filters, row layout (channel, ki, kj)."""
        self._require_fresh()
        key = "rows_cmajor"
        if key not in self._packed_cache:
            bits = (self.binary_pm1 >= 0).astype(np.uint8).reshape(self.out_channels, -1)
            self._packed_cache[key] = bitpack.BitTensor(
                bitpack.pack_bit_rows(bits),
                self.latent_weights.shape,
                self.row_len,
                checked=False,
            )
        return self._packed_cache[key]

    def packed_rows_kmajor(self) -> np.ndarray:
        """Packed sign weights with (ki, kj, channel-word) row order; only
        valid for dense layers whose channel count is word-aligned."""
        self._require_fresh()
        key = "rows_kmajor"
        if key not in self._packed_cache:
            wt = self.binary_pm1.transpose(0, 2, 3, 1)  # (OC, k, k, C)
            bits = (wt >= 0).astype(np.uint8).reshape(self.out_channels, -1)
            self._packed_cache[key] = bitpack.pack_bit_rows(bits)
        return self._packed_cache[key]

    def _require_fresh(self):
        if self._stale:
            raise StaleLayerError(
                "binary weights are stale; call sync() after mutating latent weights"
            )


def binary_conv(x, layer: BinaryConvLayer, force_path: str | None = None):
    """xnor-popcount convolution of a float input against a binary layer.

    The input is binarized with sign (sign(0) = +1), the binarized plane is
    padded with -1, each output is an integer +-1 dot product scaled by the
    layer's per-filter alpha. Equals float_conv on the sign-binarized,
    -1-padded operands exactly (the dot), and up to one float rounding in
    the final alpha multiply.

    force_path: "packed" or "sim" pins the compute path (tests/benchmarks);
    default dispatches packed only where packing pays off.
    """
    layer._require_fresh()
    x = as_float(x)
    if x.ndim != 4:
        raise DimensionError("binary_conv expects (N,C,H,W)")
    if x.shape[1] != layer.in_channels:
        raise DimensionError(
            f"input has {x.shape[1]} channels, layer expects {layer.in_channels}"
        )
    if force_path not in (None, "packed", "sim"):
        raise InvariantError(f"unknown path {force_path!r}")
    path = force_path
    if path is None:
        path = "packed" if layer.row_len >= PACKED_MIN_ROW_BITS else "sim"
    dots = _binary_dots_packed(x, layer) if path == "packed" else _binary_dots_sim(x, layer)
    return dots * layer.scales[None, :, None, None]


def _binary_dots_sim(x, layer):
    """Integer +-1 dots via float GEMM; exact, shared with training."""
    xs = sign_pm1(x)
    cols, oh, ow = _im2col(
        xs, layer.kernel, 1, layer.padding, layer.groups, pad_value=-1.0
    )
    wg = layer.binary_pm1.reshape(layer.groups, layer.out_channels // layer.groups, -1)
    dots = np.matmul(wg, cols)
    return _gemm_out_to_nchw(dots, x.shape[0], layer.out_channels, layer.groups, oh, ow)


def _binary_dots_packed(x, layer):
    """Integer dots via packed words + hardware popcount."""
    n, c, h, w = x.shape
    k, pad, groups = layer.kernel, layer.padding, layer.groups
    oh = conv_output_size(h, k, pad, 1)
    ow = conv_output_size(w, k, pad, 1)
    bits = (x >= 0.0).astype(np.uint8)
    if pad:
        bits = np.pad(bits, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if groups == 1 and c % bitpack.WORD_BITS == 0:
        out = _packed_dense_word_gather(bits, layer, n, oh, ow)
    else:
        out = _packed_generic(bits, layer, n, c, oh, ow)
    return out.astype(x.dtype)


def _packed_dense_word_gather(bits, layer, n, oh, ow):
    # pack the plane once along channels, then gather whole words per window
    k = layer.kernel
    nb, cb = bits.shape[0] * bits.shape[2] * bits.shape[3], bits.shape[1]
    planes = bits.transpose(0, 2, 3, 1).reshape(nb, cb)
    words = bitpack.pack_bit_rows(planes).reshape(
        bits.shape[0], bits.shape[2], bits.shape[3], -1
    )
    win = np.lib.stride_tricks.sliding_window_view(words, (k, k), axis=(1, 2))
    # (N, OH, OW, Wc, k, k) -> rows (N, P, k*k*Wc) in (ki, kj, cword) order
    rows = win.transpose(0, 1, 2, 4, 5, 3).reshape(n, oh * ow, -1)
    wrows = layer.packed_rows_kmajor()
    n_bits = layer.row_len
    out = np.empty((n, layer.out_channels, oh * ow), dtype=np.int64)
    for i in range(n):
        out[i] = bitpack.xnor_gemm_words(
            np.ascontiguousarray(rows[i]), wrows, n_bits
        ).T
    return out.reshape(n, layer.out_channels, oh, ow)


def _packed_generic(bits, layer, n, c, oh, ow):
    k, groups = layer.kernel, layer.groups
    icg, ocg = c // groups, layer.out_channels // groups
    win = np.lib.stride_tricks.sliding_window_view(bits, (k, k), axis=(2, 3))
    # (N, C, OH, OW, k, k) -> per-group patch rows (N, G, P, icg*k*k)
    rows = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, groups, icg * k * k, oh * ow)
    rows = rows.transpose(0, 1, 3, 2)
    wwords = layer.binary_weights.words.reshape(groups, ocg, -1)
    n_bits = layer.row_len
    out = np.empty((n, groups, ocg, oh * ow), dtype=np.int64)
    for i in range(n):
        for g in range(groups):
            packed = bitpack.pack_bit_rows(np.ascontiguousarray(rows[i, g]))
            out[i, g] = bitpack.xnor_gemm_words(wwords[g], packed, n_bits)
    return out.reshape(n, layer.out_channels, oh, ow)


def binary_conv_forward_cached(x, layer: BinaryConvLayer):
    """Training forward: returns (out, cache) with everything backward needs.

    Uses the sim path (bit-identical to packed) and keeps the +-1 patch
    matrix and the raw input for the STE mask.
    """
    layer._require_fresh()
    x = as_float(x)
    xs = sign_pm1(x)
    cols, oh, ow = _im2col(
        xs, layer.kernel, 1, layer.padding, layer.groups, pad_value=-1.0
    )
    wg = layer.binary_pm1.reshape(layer.groups, layer.out_channels // layer.groups, -1)
    dots = _gemm_out_to_nchw(
        np.matmul(wg, cols), x.shape[0], layer.out_channels, layer.groups, oh, ow
    )
    out = dots * layer.scales[None, :, None, None]
    cache = {"x": x, "cols": cols, "oh": oh, "ow": ow}
    return out, cache


def binary_conv_backward(g_out, layer: BinaryConvLayer, cache, ste_threshold=STE_THRESHOLD):
    """Gradients (g_input, g_latent) of the cached binary conv forward.

    Weight path: dL/dW_hat from the standard conv weight gradient against
    the +-1 patches, then the latent rule (scale term + alpha * STE term).
    Input path: transposed conv against alpha * sign(W), masked by the
    activation STE window |x| <= threshold.
    """
    if cache is None:
        raise StateError("binary_conv_backward needs the forward cache")
    x, cols, oh, ow = cache["x"], cache["cols"], cache["oh"], cache["ow"]
    n = x.shape[0]
    groups, ocg = layer.groups, layer.out_channels // layer.groups
    g = _nchw_to_gemm(g_out, n, layer.out_channels, groups, oh, ow)

    g_what = np.matmul(g, cols.transpose(0, 2, 1))  # (G, OCG, R)
    g_what_rows = g_what.reshape(layer.out_channels, -1)
    g_latent = weight_gradient(
        layer.latent_weights.reshape(layer.out_channels, -1),
        g_what_rows,
        ste_threshold=ste_threshold,
        alpha=layer.scales,
    ).reshape(layer.latent_weights.shape)

    w_hat = (layer.binary_pm1 * layer.scales[:, None, None, None]).reshape(
        groups, ocg, -1
    )
    g_cols = np.matmul(w_hat.transpose(0, 2, 1), g)
    g_xs = _col2im(g_cols, x.shape, layer.kernel, 1, layer.padding, oh, ow)
    g_input = g_xs * (np.abs(x) <= ste_threshold)
    return g_input, g_latent

"""Trainable layer primitives: parameters, PReLU, batch norm, linear, and
the binary conv segment (sign -> binary conv -> PReLU -> batch norm).

Layers own mutable training state (latent weights, BN running stats) and
are single-writer during training; in eval mode nothing is mutated, so a
trained network can serve reads from many threads.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .binarize import STE_THRESHOLD
from .errors import DimensionError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PRELU_INIT = 0.25


class Param:
    """A named trainable array with its gradient and bookkeeping flags.

    kind: 'weight' (float conv/linear), 'latent' (binary conv latent),
    'bias', 'bn', 'prelu'. decay marks parameters that receive the
    additive L2 term; binary marks tensors exported as 1-bit.
    """

    __slots__ = ("name", "value", "grad", "kind", "decay", "binary", "layer")

    def __init__(self, name, value, kind, decay=False, binary=False, layer=None):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.kind = kind
        self.decay = decay
        self.binary = binary
        self.layer = layer

    def zero_grad(self):
        self.grad[...] = 0.0

    def on_updated(self):
        if self.layer is not None:
            self.layer.mark_stale()


def kaiming_uniform(rng, shape, fan_in, dtype=np.float64):
    """Uniform(-b, b) with b = sqrt(6 / fan_in); keeps latent weights away
    from zero in aggregate (an exactly all-zero filter has measure zero)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def prelu(x, slope):
    """x if x >= 0 else slope * x, slope broadcast per channel (axis 1)."""
    x = np.asarray(x)
    s = np.asarray(slope, dtype=x.dtype).reshape(1, -1, *([1] * (x.ndim - 2)))
    return np.where(x >= 0.0, x, s * x)


def prelu_backward(g_out, x, slope):
    """Returns (g_x, g_slope); slope gradient sums over everything but C."""
    x = np.asarray(x)
    s = np.asarray(slope, dtype=x.dtype).reshape(1, -1, *([1] * (x.ndim - 2)))
    neg = x < 0.0
    g_x = np.where(neg, s * g_out, g_out)
    axes = (0,) + tuple(range(2, x.ndim))
    g_slope = np.sum(np.where(neg, x * g_out, np.zeros((), dtype=x.dtype)), axis=axes)
    return g_x, g_slope


class PReLU:
    def __init__(self, channels, name="", dtype=np.float64):
        self.slope = Param(
            f"{name}.slope", np.full(channels, PRELU_INIT, dtype=dtype), "prelu"
        )
        self._x = None

    def forward(self, x, training=False):
        if training:
            self._x = x
        return prelu(x, self.slope.value)

    def backward(self, g_out):
        if self._x is None:
            raise StateError("prelu backward before forward")
        g_x, g_slope = prelu_backward(g_out, self._x, self.slope.value)
        self.slope.grad += g_slope
        self._x = None
        return g_x

    def parameters(self):
        return [self.slope]


class BatchNorm:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with batch statistics (biased variance) and
    updates running stats with momentum; eval mode uses the running stats
    and mutates nothing.
    """

    def __init__(self, channels, name="", eps=BN_EPS, momentum=BN_MOMENTUM, dtype=np.float64):
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype), "bn")
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype), "bn")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum
        self._cache = None

    def _bc(self, v, ndim):
        return v.reshape(1, -1, *([1] * (ndim - 2)))

    def forward(self, x, training=False):
        axes = (0,) + tuple(range(2, x.ndim))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - self._bc(mean, x.ndim)) * self._bc(inv_std, x.ndim)
        if training:
            self._cache = (x_hat, inv_std, x.shape)
        return x_hat * self._bc(self.gamma.value, x.ndim) + self._bc(self.beta.value, x.ndim)

    def backward(self, g_out):
        if self._cache is None:
            raise StateError("batch_norm backward before training forward")
        x_hat, inv_std, shape = self._cache
        axes = (0,) + tuple(range(2, len(shape)))
        m = np.prod([shape[a] for a in axes])
        g_xhat = g_out * self._bc(self.gamma.value, len(shape))
        self.gamma.grad += np.sum(g_out * x_hat, axis=axes)
        self.beta.grad += np.sum(g_out, axis=axes)
        # standard batch-stat backward: d/dx of (x - mu) * inv_std
        sum_g = np.sum(g_xhat, axis=axes)
        sum_gx = np.sum(g_xhat * x_hat, axis=axes)
        g_x = (
            g_xhat
            - self._bc(sum_g / m, len(shape))
            - x_hat * self._bc(sum_gx / m, len(shape))
        ) * self._bc(inv_std, len(shape))
        self._cache = None
        return g_x

    def parameters(self):
        return [self.gamma, self.beta]


class Linear:
    def __init__(self, in_features, out_features, rng, name="", dtype=np.float64):
        w = kaiming_uniform(rng, (out_features, in_features), in_features, dtype)
        self.weight = Param(f"{name}.weight", w, "weight", decay=True)
        self.bias = Param(f"{name}.bias", np.zeros(out_features, dtype=dtype), "bias")
        self._x = None

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.weight.value.shape[1]:
            raise DimensionError("linear input must be (N, in_features)")
        if training:
            self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, g_out):
        if self._x is None:
            raise StateError("linear backward before forward")
        self.weight.grad += g_out.T @ self._x
        self.bias.grad += g_out.sum(axis=0)
        g_x = g_out @ self.weight.value
        self._x = None
        return g_x

    def parameters(self):
        return [self.weight, self.bias]


class FloatConvLayer:
    """Full-precision conv -> BN -> PReLU (the stem; never binarized)."""

    def __init__(self, in_c, out_c, kernel, rng, stride=1, padding=0, name="", dtype=np.float64):
        fan_in = in_c * kernel * kernel
        w = kaiming_uniform(rng, (out_c, in_c, kernel, kernel), fan_in, dtype)
        self.weight = Param(f"{name}.weight", w, "weight", decay=True)
        self.stride = stride
        self.padding = padding
        self.bn = BatchNorm(out_c, name=f"{name}.bn", dtype=dtype)
        self.act = PReLU(out_c, name=f"{name}.prelu", dtype=dtype)
        self._x = None

    def forward(self, x, training=False):
        if training:
            self._x = x
        y = kernels.float_conv(
            x, self.weight.value, stride=self.stride, padding=self.padding
        )
        y = self.bn.forward(y, training)
        return self.act.forward(y, training)

    def backward(self, g_out):
        if self._x is None:
            raise StateError("conv backward before forward")
        g = self.act.backward(g_out)
        g = self.bn.backward(g)
        g_x, g_w = kernels.float_conv_backward(
            g, self._x, self.weight.value, stride=self.stride, padding=self.padding
        )
        self.weight.grad += g_w
        self._x = None
        return g_x

    def parameters(self):
        return [self.weight] + self.bn.parameters() + self.act.parameters()


class ConvSegment:
    """One binary conv stage: input -> sign -> binary conv -> PReLU -> BN.

    The fixed ordering is the calculation flow of every binary segment in
    the network; the sign activation is part of the segment, so segments
    compose without explicit binarization between them.
    """

    def __init__(self, in_c, out_c, kernel, rng, groups=1, padding=0, name="",
                 use_prelu=True, ste_threshold=STE_THRESHOLD, dtype=np.float64):
        if in_c % groups or out_c % groups:
            raise DimensionError(
                f"channels in={in_c} out={out_c} must be divisible by groups={groups}"
            )
        fan_in = (in_c // groups) * kernel * kernel
        latent = kaiming_uniform(rng, (out_c, in_c // groups, kernel, kernel), fan_in, dtype)
        self.conv = kernels.BinaryConvLayer(latent, groups=groups, padding=padding)
        self.latent = Param(f"{name}.latent", self.conv.latent_weights, "latent",
                            decay=True, binary=True, layer=self.conv)
        self.use_prelu = use_prelu
        self.act = PReLU(out_c, name=f"{name}.prelu", dtype=dtype) if use_prelu else None
        self.bn = BatchNorm(out_c, name=f"{name}.bn", dtype=dtype)
        self.ste_threshold = ste_threshold
        self.in_channels = in_c
        self.out_channels = out_c
        self._conv_cache = None
        self._relu_x = None

    def forward(self, x, training=False):
        if training:
            if self.conv.stale:
                self.conv.sync()
            y, self._conv_cache = kernels.binary_conv_forward_cached(x, self.conv)
        else:
            y = kernels.binary_conv(x, self.conv)
        if self.act is not None:
            y = self.act.forward(y, training)
        else:
            if training:
                self._relu_x = y
            y = np.maximum(y, 0.0)
        return self.bn.forward(y, training)

    def backward(self, g_out):
        g = self.bn.backward(g_out)
        if self.act is not None:
            g = self.act.backward(g)
        else:
            if self._relu_x is None:
                raise StateError("segment backward before forward")
            g = g * (self._relu_x >= 0.0)
            self._relu_x = None
        if self._conv_cache is None:
            raise StateError("segment backward before forward")
        g_x, g_latent = kernels.binary_conv_backward(
            g, self.conv, self._conv_cache, ste_threshold=self.ste_threshold
        )
        self.latent.grad += g_latent
        self._conv_cache = None
        return g_x

    def parameters(self):
        ps = [self.latent]
        if self.act is not None:
            ps += self.act.parameters()
        return ps + self.bn.parameters()

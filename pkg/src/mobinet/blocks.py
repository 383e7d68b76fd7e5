"""Binary block topologies: the plain depth-wise separable pair and the
three 3-segment designs that add an extra 1x1 segment to create
shape-matched skip-connection sites.

Every block is a stack of ConvSegments; a segment carries an identity skip
(out = seg(x) + x) exactly when its channel count is preserved and the
block variant is not "vanilla". Two wirings are supported:

  * "lift" (default): the extra 1x1 segment performs the in->out channel
    lift at the variant's position, so the remaining 1x1 is channel-
    preserving. pre = lift, dw, square; mid = dw, lift, square;
    post = dw, square, lift. The dw segment runs on out_c for pre and on
    in_c otherwise. This is the wiring whose op/param accounting matches
    the published compression tables.
  * "square": the extra 1x1 is channel-preserving and the ordinary
    point-wise conv does the lift. pre = square, dw, lift;
    mid = dw, square, lift; post = dw, lift, square.

Spatial downsampling is an avg_pool 2x2/2 appended after the block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, StateError
from .layers import ConvSegment

VARIANTS = ("vanilla", "pre", "mid", "post")
WIRINGS = ("lift", "square")


@dataclass(frozen=True)
class BlockConfig:
    variant: str
    in_c: int
    out_c: int
    K: int = 0
    downsample: bool = False
    wiring: str = "lift"
    use_prelu: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown block variant {self.variant!r}")
        if self.wiring not in WIRINGS:
            raise ConfigError(f"unknown wiring {self.wiring!r}")
        dw_c = self.dw_channels
        if self.K < 0 or dw_c % (1 << self.K):
            raise ConfigError(
                f"K={self.K} incompatible with {dw_c} depth-wise channels"
            )

    @property
    def dw_channels(self) -> int:
        """Channel count the grouped 3x3 segment runs on."""
        if self.variant == "pre" and self.wiring == "lift":
            return self.out_c
        return self.in_c

    def segment_plan(self):
        """Ordered (kind, in_c, out_c, kernel, groups) tuples."""
        i, o, k = self.in_c, self.out_c, self.K
        dw = lambda c: ("dw", c, c, 3, kernels.KDependency(k, c).groups)
        lift = ("lift", i, o, 1, 1)
        if self.variant == "vanilla":
            return [dw(i), ("pw", i, o, 1, 1)]
        if self.wiring == "lift":
            if self.variant == "pre":
                return [lift, dw(o), ("pw", o, o, 1, 1)]
            if self.variant == "mid":
                return [dw(i), lift, ("pw", o, o, 1, 1)]
            return [dw(i), ("pw", i, i, 1, 1), lift]
        # spec-committed alternate: extra 1x1 is channel-preserving
        if self.variant == "pre":
            return [("extra", i, i, 1, 1), dw(i), ("pw", i, o, 1, 1)]
        if self.variant == "mid":
            return [dw(i), ("extra", i, i, 1, 1), ("pw", i, o, 1, 1)]
        return [dw(i), ("pw", i, o, 1, 1), ("extra", o, o, 1, 1)]


def block_param_count(cfg: BlockConfig) -> int:
    """Closed-form trainable-parameter count of a block.

    Per segment: latent out*(in/groups)*k^2, BN 2*out, PReLU out (when
    enabled). Derived from (variant, in_c, out_c, K) alone.
    """
    total = 0
    per_channel = 3 if cfg.use_prelu else 2
    for _, ic, oc, k, groups in cfg.segment_plan():
        total += oc * (ic // groups) * k * k + per_channel * oc
    return total


class Block:
    """A composable forward/backward unit built from a BlockConfig."""

    def __init__(self, cfg: BlockConfig, rng, name="block", dtype=np.float64):
        self.cfg = cfg
        self.name = name
        self.segments = []
        self.skips = []
        for idx, (kind, ic, oc, k, groups) in enumerate(cfg.segment_plan()):
            seg = ConvSegment(
                ic,
                oc,
                k,
                rng,
                groups=groups,
                padding=k // 2,
                name=f"{name}.{kind}{idx}",
                use_prelu=cfg.use_prelu,
                dtype=dtype,
            )
            seg.kind = kind
            self.segments.append(seg)
            self.skips.append(cfg.variant != "vanilla" and ic == oc)
        self._pool_in_shape = None

    def forward(self, x, training=False):
        for seg, skip in zip(self.segments, self.skips):
            y = seg.forward(x, training)
            x = y + x if skip else y
        if self.cfg.downsample:
            if training:
                self._pool_in_shape = x.shape
            x = kernels.avg_pool(x, 2, 2)
        return x

    def backward(self, g):
        if self.cfg.downsample:
            if self._pool_in_shape is None:
                raise StateError("block backward before forward")
            g = kernels.avg_pool_backward(g, self._pool_in_shape, 2, 2)
            self._pool_in_shape = None
        for seg, skip in zip(reversed(self.segments), reversed(self.skips)):
            g_in = seg.backward(g)
            g = g_in + g if skip else g_in
        return g

    def parameters(self):
        out = []
        for seg in self.segments:
            out.extend(seg.parameters())
        return out


def build_block(cfg: BlockConfig, rng=None, name="block") -> Block:
    """Build a Block; a fresh default generator is used when rng is None."""
    if rng is None:
        rng = np.random.default_rng()
    return Block(cfg, rng, name=name)

"""Full network assembly: float stem, binary block stack, global average
pooling, float classifier; plus the network config surface.

The default channel schedule is the MobileNet-v1 progression
64, 128d, 128, 256d, 256, 512d, 512x5, 1024d, 1024 (d = downsample after
the block) scaled by width_mult, with a 32-channel stem. The stem and the
classifier are never binarized.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .blocks import Block, BlockConfig, VARIANTS, WIRINGS
from .errors import ConfigError, DimensionError
from .layers import FloatConvLayer, Linear

STEM_CHANNELS = 32
# (base out channels, downsample-after-block) in v1 order
BASE_SCHEDULE = (
    (64, False),
    (128, True),
    (128, False),
    (256, True),
    (256, False),
    (512, True),
    (512, False),
    (512, False),
    (512, False),
    (512, False),
    (512, False),
    (1024, True),
    (1024, False),
)


def scale_channels(c: int, width_mult: float, divisor: int) -> int:
    """Nearest multiple of divisor to c * width_mult, at least divisor."""
    return max(divisor, int(round(c * width_mult / divisor)) * divisor)


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "mid"
    K: int = 0
    width_mult: float = 1.0
    num_classes: int = 1000
    resolution: int = 224
    in_channels: int = 3
    wiring: str = "lift"
    use_prelu: bool = True
    stem_pool: bool = False  # True: conv stride 1 + avg_pool; False: conv stride 2
    dtype: str = "f64"  # compute/parameter precision: f32 for desk training speed
    schedule: tuple = field(default=None)  # ((out_c, downsample), ...) post-scaling

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.wiring not in WIRINGS:
            raise ConfigError(f"unknown wiring {self.wiring!r}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if not 0.0 < self.width_mult <= 1.0:
            raise ConfigError("width_mult must be in (0, 1]")
        if self.K < 0:
            raise ConfigError("K must be non-negative")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.schedule is None:
            div = 1 << self.K
            sched = tuple(
                (scale_channels(c, self.width_mult, div), ds) for c, ds in BASE_SCHEDULE
            )
            object.__setattr__(self, "schedule", sched)
        else:
            object.__setattr__(
                self, "schedule", tuple((int(c), bool(d)) for c, d in self.schedule)
            )
        for c, _ in self.schedule:
            if c % (1 << self.K):
                raise ConfigError(f"channel count {c} not divisible by 2^K = {1 << self.K}")
        n_pools = 1 + sum(1 for _, ds in self.schedule if ds)
        if self.resolution % (1 << n_pools):
            raise ConfigError(
                f"resolution {self.resolution} not divisible by 2^{n_pools} "
                "(stem + downsample stages)"
            )

    @property
    def stem_channels(self) -> int:
        return scale_channels(STEM_CHANNELS, self.width_mult, 1 << self.K)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


class Network:
    """Stem -> binary blocks -> global average pool -> linear classifier."""

    def __init__(self, cfg: NetworkConfig, rng):
        self.cfg = cfg
        dtype = cfg.np_dtype
        stem_c = cfg.stem_channels
        self.stem = FloatConvLayer(
            cfg.in_channels,
            stem_c,
            3,
            rng,
            stride=1 if cfg.stem_pool else 2,
            padding=1,
            name="stem",
            dtype=dtype,
        )
        self.blocks = []
        in_c = stem_c
        for i, (out_c, ds) in enumerate(cfg.schedule):
            bcfg = BlockConfig(
                cfg.variant,
                in_c,
                out_c,
                K=cfg.K,
                downsample=ds,
                wiring=cfg.wiring,
                use_prelu=cfg.use_prelu,
            )
            self.blocks.append(Block(bcfg, rng, name=f"block{i}", dtype=dtype))
            in_c = out_c
        self.classifier = Linear(in_c, cfg.num_classes, rng, name="classifier", dtype=dtype)
        self._gap_shape = None
        self._stem_pool_shape = None

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=self.cfg.np_dtype)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"expected (N,{self.cfg.in_channels},H,W) input, got {x.shape}"
            )
        x = self.stem.forward(x, training)
        if self.cfg.stem_pool:
            if training:
                self._stem_pool_shape = x.shape
            x = kernels.avg_pool(x, 2, 2)
        for block in self.blocks:
            x = block.forward(x, training)
        if training:
            self._gap_shape = x.shape
        feats = x.mean(axis=(2, 3))
        return self.classifier.forward(feats, training)

    def backward(self, g_logits):
        g = self.classifier.backward(g_logits)
        n, c, h, w = self._gap_shape
        g = np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w)
        for block in reversed(self.blocks):
            g = block.backward(g)
        if self.cfg.stem_pool:
            g = kernels.avg_pool_backward(g, self._stem_pool_shape, 2, 2)
        return self.stem.backward(g)

    def parameters(self):
        out = list(self.stem.parameters())
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend(self.classifier.parameters())
        names = [p.name for p in out]
        assert len(names) == len(set(names)), "parameter names must be unique"
        return out

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def sync_binary(self):
        for b in self.blocks:
            for seg in b.segments:
                if seg.conv.stale:
                    seg.conv.sync()

    def mark_stale(self):
        for b in self.blocks:
            for seg in b.segments:
                seg.conv.mark_stale()

    def binary_conv_segments(self):
        for b in self.blocks:
            for seg in b.segments:
                yield seg

    def bn_layers(self):
        yield self.stem.bn
        for b in self.blocks:
            for seg in b.segments:
                yield seg.bn

    def manifest(self):
        """One row per parameter tensor: (name, shape, dtype, count).

        dtype is "bit1" for tensors exported as 1-bit (block latent conv
        weights), "f32" for everything else.
        """
        rows = []
        for p in self.parameters():
            dtype = "bit1" if p.binary else "f32"
            rows.append((p.name, tuple(p.value.shape), dtype, int(p.value.size)))
        return rows

    def param_counts(self):
        binary = sum(p.value.size for p in self.parameters() if p.binary)
        total = sum(p.value.size for p in self.parameters())
        return {"binary": int(binary), "float": int(total - binary), "total": int(total)}

    def state_arrays(self):
        """All mutable training state by name: parameters plus BN running
        statistics. Arrays are the live ones, not copies."""
        out = {p.name: p.value for p in self.parameters()}
        for bn in self.bn_layers():
            out[f"{bn.name}.running_mean"] = bn.running_mean
            out[f"{bn.name}.running_var"] = bn.running_var
        return out

    def load_state_arrays(self, arrays):
        """Restore state saved by state_arrays (in place), then re-derive
        the binary weights."""
        own = self.state_arrays()
        missing = set(own) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint missing tensors: {sorted(missing)[:3]}...")
        for name, arr in own.items():
            arr[...] = arrays[name]
        self.mark_stale()
        self.sync_binary()


def build_network(cfg: NetworkConfig, seed: int | None = None) -> Network:
    """Deterministic network construction from a config and seed."""
    rng = np.random.default_rng(np.random.PCG64(0 if seed is None else seed))
    return Network(cfg, rng)


def desk_config(variant="mid", K=2, wiring="lift", use_prelu=True, dtype="f32") -> NetworkConfig:
    """The desk-scale preset every training acceptance check uses:
    width 0.25, 32 px, 10 classes, single input channel, f32 compute."""
    return NetworkConfig(
        variant=variant,
        K=K,
        width_mult=0.25,
        num_classes=10,
        resolution=32,
        in_channels=1,
        wiring=wiring,
        use_prelu=use_prelu,
        dtype=dtype,
    )


# ---------------------------------------------------------------------------
# config-file surface: line-oriented "key = value" text


_CONFIG_KEYS = {
    "variant": str,
    "k": int,
    "width_mult": float,
    "classes": int,
    "resolution": int,
    "channels": int,
    "wiring": str,
    "prelu": bool,
    "stem_pool": bool,
    "dtype": str,
    "schedule": str,
}


def _parse_bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def parse_network_config(text: str) -> NetworkConfig:
    """Parse the documented key = value keys into a NetworkConfig.

    Keys: variant, k, width_mult, classes, resolution, channels, wiring,
    prelu, stem_pool, schedule (comma list of out_c with a 'd' suffix on
    downsampling blocks, e.g. "16,32d,32"). Unknown keys are rejected.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val
    return network_config_from_dict(values)


def network_config_from_dict(values: dict) -> NetworkConfig:
    for key in values:
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown network config key {key!r}")
    kwargs = {}
    try:
        if "variant" in values:
            kwargs["variant"] = values["variant"]
        if "k" in values:
            kwargs["K"] = int(values["k"])
        if "width_mult" in values:
            kwargs["width_mult"] = float(values["width_mult"])
        if "classes" in values:
            kwargs["num_classes"] = int(values["classes"])
        if "resolution" in values:
            kwargs["resolution"] = int(values["resolution"])
        if "channels" in values:
            kwargs["in_channels"] = int(values["channels"])
        if "wiring" in values:
            kwargs["wiring"] = values["wiring"]
        if "prelu" in values:
            v = values["prelu"]
            kwargs["use_prelu"] = _parse_bool(v) if isinstance(v, str) else bool(v)
        if "stem_pool" in values:
            v = values["stem_pool"]
            kwargs["stem_pool"] = _parse_bool(v) if isinstance(v, str) else bool(v)
        if "dtype" in values:
            kwargs["dtype"] = values["dtype"]
        if "schedule" in values:
            kwargs["schedule"] = parse_schedule(values["schedule"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return NetworkConfig(**kwargs)


def parse_schedule(text: str):
    sched = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        ds = item.endswith("d")
        try:
            c = int(item[:-1] if ds else item)
        except ValueError as exc:
            raise ConfigError(f"bad schedule entry {item!r}") from exc
        sched.append((c, ds))
    if not sched:
        raise ConfigError("empty schedule")
    return tuple(sched)


def format_network_config(cfg: NetworkConfig) -> str:
    sched = ",".join(f"{c}{'d' if ds else ''}" for c, ds in cfg.schedule)
    lines = [
        f"variant = {cfg.variant}",
        f"k = {cfg.K}",
        f"width_mult = {cfg.width_mult}",
        f"classes = {cfg.num_classes}",
        f"resolution = {cfg.resolution}",
        f"channels = {cfg.in_channels}",
        f"wiring = {cfg.wiring}",
        f"prelu = {str(cfg.use_prelu).lower()}",
        f"stem_pool = {str(cfg.stem_pool).lower()}",
        f"dtype = {cfg.dtype}",
        f"schedule = {sched}",
    ]
    return "\n".join(lines) + "\n"


def config_replace(cfg: NetworkConfig, **kwargs) -> NetworkConfig:
    return replace(cfg, **kwargs)

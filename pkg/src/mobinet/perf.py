"""Op, parameter and memory accounting plus wall-clock kernel benchmarks.

Counting convention (the meter's one tunable, fixed by the published
reference numbers): one float multiply-accumulate = 1 float op, one
binary (xnor-popcount) multiply-accumulate = 1 binary op, and

    effective_flops = float_ops + binary_ops / 64.

Only conv/linear multiply-accumulates are counted; BN, PReLU, pooling and
residual adds contribute no multiplications under this convention. The
full-precision MobileNet-v1 reference at 224 px comes out at 568.74M,
and the speedup column is reference / effective_flops.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import bitpack, kernels, modelio
from .errors import ConfigError
from .network import BASE_SCHEDULE, Network, NetworkConfig, scale_channels

BINARY_WORD = 64  # binary-op discount divisor


@dataclass
class PerfReport:
    float_ops: int
    binary_ops: int
    effective_flops: float
    params_float: int
    params_binary: int
    serialized_bytes: int
    speedup_vs_reference: float

    def as_dict(self):
        return {
            "float_ops": self.float_ops,
            "binary_ops": self.binary_ops,
            "effective_flops": self.effective_flops,
            "params_float": self.params_float,
            "params_binary": self.params_binary,
            "serialized_bytes": self.serialized_bytes,
            "speedup_vs_reference": self.speedup_vs_reference,
        }


def _network_ops(network: Network, resolution: int):
    """(float_macs, binary_macs) for one forward pass at the resolution."""
    cfg = network.cfg
    if resolution % 2:
        raise ConfigError("resolution must be even for the stem downsample")
    stem_res = resolution if cfg.stem_pool else resolution // 2
    stem_w = network.stem.weight.value
    float_macs = stem_res * stem_res * stem_w.shape[0] * stem_w.shape[1] * 9
    res = resolution // 2  # blocks always start at half resolution
    binary_macs = 0
    for block in network.blocks:
        for seg in block.segments:
            conv = seg.conv
            r = res * res
            binary_macs += (
                r * conv.out_channels * (conv.in_channels // conv.groups)
                * conv.kernel * conv.kernel
            )
        if block.cfg.downsample:
            res //= 2
    fc = network.classifier.weight.value
    float_macs += fc.shape[0] * fc.shape[1]
    return int(float_macs), int(binary_macs)


def count(network: Network, resolution: int | None = None) -> PerfReport:
    """Exact closed-form per-layer op/param counts for a network."""
    cfg = network.cfg
    resolution = cfg.resolution if resolution is None else resolution
    float_macs, binary_macs = _network_ops(network, resolution)
    effective = float_macs + binary_macs / BINARY_WORD
    counts = network.param_counts()
    serialized = len(modelio.export_model_bytes(network))
    reference = mobilenet_v1_flops(resolution, num_classes=cfg.num_classes,
                                   in_channels=cfg.in_channels)
    return PerfReport(
        float_ops=float_macs,
        binary_ops=binary_macs,
        effective_flops=effective,
        params_float=counts["float"],
        params_binary=counts["binary"],
        serialized_bytes=serialized,
        speedup_vs_reference=reference / effective,
    )


def mobilenet_v1_flops(resolution: int = 224, num_classes: int = 1000,
                       width_mult: float = 1.0, in_channels: int = 3) -> float:
    """Effective FLOPs of the full-precision MobileNet v1 reference.

    The real v1: 3x3 stride-2 stem, 13 depth-wise separable blocks with
    stride-2 dw convs at the standard positions, global pool, classifier.
    All ops are float, so effective = float multiply-accumulates.
    """
    stem_c = scale_channels(32, width_mult, 1)
    res = resolution // 2
    macs = res * res * stem_c * in_channels * 9
    in_c = stem_c
    for base_c, stride2 in BASE_SCHEDULE:
        out_c = scale_channels(base_c, width_mult, 1)
        if stride2:
            res //= 2
        macs += res * res * in_c * 9          # dw 3x3 at output resolution
        macs += res * res * in_c * out_c      # pw 1x1
        in_c = out_c
    macs += in_c * num_classes
    return float(macs)


def binary_conv_ops(c_in: int, c_out: int, spatial: int, kernel: int = 1) -> dict:
    """Hand-arithmetic helper: op counts of one dense binary conv."""
    binary = spatial * spatial * c_out * c_in * kernel * kernel
    return {
        "binary_ops": binary,
        "effective_flops": binary / BINARY_WORD,
    }


# ---------------------------------------------------------------------------
# wall-clock benchmarks


def _bench_binary_conv(c, spatial, rng, force_path="packed"):
    layer = kernels.BinaryConvLayer(
        rng.standard_normal((c, c, 3, 3)), groups=1, padding=1
    )
    x = rng.standard_normal((1, c, spatial, spatial))
    return lambda: kernels.binary_conv(x, layer, force_path=force_path)


def _bench_float_conv(c, spatial, rng):
    w = rng.standard_normal((c, c, 3, 3))
    x = rng.standard_normal((1, c, spatial, spatial))
    return lambda: kernels.float_conv(x, w, padding=1)


def _bench_xnor_gemm(c, spatial, rng):
    n_bits = c * 9
    wpr = bitpack.words_per_row(n_bits)
    a = rng.integers(0, 2**64, (spatial * spatial, wpr), dtype=np.uint64)
    b = rng.integers(0, 2**64, (c, wpr), dtype=np.uint64)
    return lambda: bitpack.xnor_gemm_words(a, b, n_bits)


def _bench_pack_rows(c, spatial, rng):
    bits = rng.integers(0, 2, (spatial * spatial, c * 9), dtype=np.uint8)
    return lambda: bitpack.pack_bit_rows(bits)


BENCH_KERNELS = {
    "binary_dense_conv": _bench_binary_conv,
    "float_conv": _bench_float_conv,
    "xnor_gemm": _bench_xnor_gemm,
    "pack_rows": _bench_pack_rows,
}


def bench(kernel_id: str, sizes=(64, 128, 256), spatial: int = 14,
          repetitions: int = 20, seed: int = 0):
    """Median wall-clock timings of a kernel across channel counts.

    Rows report effective FLOPs (per the count() convention) and the
    implied effective-FLOPs-per-second. Benchmarks expect single-threaded
    BLAS for comparability (see MOBINET_THREADS).
    """
    if kernel_id not in BENCH_KERNELS:
        raise ConfigError(
            f"unknown kernel {kernel_id!r}; have {sorted(BENCH_KERNELS)}"
        )
    rows = []
    for c in sizes:
        rng = np.random.default_rng(np.random.PCG64(seed))
        fn = BENCH_KERNELS[kernel_id](int(c), spatial, rng)
        fn()  # warm up (JIT, allocations)
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter_ns()
            fn()
            times.append(time.perf_counter_ns() - t0)
        median_ns = float(np.median(times))
        macs = spatial * spatial * c * c * 9
        if kernel_id == "float_conv":
            eff = float(macs)
        elif kernel_id in ("binary_dense_conv", "xnor_gemm"):
            eff = macs / BINARY_WORD
        else:
            eff = 0.0
        rows.append(
            {
                "kernel": kernel_id,
                "channels": int(c),
                "spatial": spatial,
                "median_ns": median_ns,
                "reps": repetitions,
                "effective_flops": eff,
                "eff_flops_per_s": eff / (median_ns / 1e9) if median_ns else 0.0,
            }
        )
    return rows


def measure_speed_ratio(c: int = 256, spatial: int = 14, repetitions: int = 30,
                        seed: int = 0) -> dict:
    """Measured wall-clock ratio float_conv / packed binary_conv."""
    binary = bench("binary_dense_conv", sizes=(c,), spatial=spatial,
                   repetitions=repetitions, seed=seed)[0]
    flt = bench("float_conv", sizes=(c,), spatial=spatial,
                repetitions=repetitions, seed=seed)[0]
    return {
        "binary_ns": binary["median_ns"],
        "float_ns": flt["median_ns"],
        "ratio": flt["median_ns"] / binary["median_ns"],
    }

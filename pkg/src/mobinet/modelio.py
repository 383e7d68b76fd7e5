"""Bit-exact 1-bit model serialization and float checkpointing.

Model file layout (all integers little-endian):

    magic           4 bytes  "MOBI"
    format_version  u16
    flags           u16      (reserved, 0)
    config_len      u32      followed by the UTF-8 network config echo
    record_count    u32
    records         (see below)
    crc32           u32      IEEE CRC32 of every preceding byte

Each record:

    name_len u16, name utf8
    dtype    u8   0 = f32, 1 = bit1
    ndim     u8, dims u32 * ndim        (logical tensor shape)
    f32:  payload = prod(dims) * 4 bytes of IEEE-754 LE floats
    bit1: row_len u32, rows u32, payload = rows * ceil(row_len/64) * 8
          bytes of LSB-first u64 words, zero padding bits, rows flattened
          (channel, ki, kj) per output filter

Block conv weights are stored bit1 with per-filter f32 scales; the stem,
classifier, BN (including running stats) and PReLU tensors are stored f32.
Loading reconstructs latent weights as alpha * sign(w), so the derived
binary state of the loaded network equals the stored payload exactly.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import bitpack
from .errors import ChecksumError, FormatError, VersionError
from .network import (
    Network,
    build_network,
    format_network_config,
    parse_network_config,
)

MAGIC = b"MOBI"
MODEL_VERSION = 1
CHECKPOINT_VERSION = 1
_F32, _BIT1 = 0, 1


# ---------------------------------------------------------------------------
# export


def _float_records(network: Network):
    for p in network.parameters():
        if not p.binary:
            yield p.name, p.value
    for bn in network.bn_layers():
        yield f"{bn.name}.running_mean", bn.running_mean
        yield f"{bn.name}.running_var", bn.running_var


def export_model_bytes(network: Network) -> bytes:
    """Serialize a trained network with 1-bit block weights."""
    network.sync_binary()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", MODEL_VERSION, 0))
    cfg_text = format_network_config(network.cfg).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_text)))
    buf.write(cfg_text)

    records = []
    for name, value in _float_records(network):
        records.append((name, _F32, value))
    for seg in network.binary_conv_segments():
        records.append((f"{seg.latent.name}.bits", _BIT1, seg.conv.binary_weights))
        records.append((f"{seg.latent.name}.scales", _F32, seg.conv.scales))

    buf.write(struct.pack("<I", len(records)))
    for name, dtype, value in records:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", dtype))
        if dtype == _F32:
            arr = np.asarray(value)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.astype("<f4").tobytes())
        else:
            bt: bitpack.BitTensor = value
            shape = bt.logical_shape
            buf.write(struct.pack("<B", len(shape)))
            buf.write(struct.pack(f"<{len(shape)}I", *shape))
            buf.write(struct.pack("<II", bt.row_len, bt.rows))
            buf.write(bt.words.astype("<u8").tobytes())
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def export_model(path, network: Network) -> int:
    """Write the model file; returns its byte size."""
    blob = export_model_bytes(network)
    Path(path).write_bytes(blob)
    return len(blob)


# ---------------------------------------------------------------------------
# load


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.blob):
            raise FormatError("unexpected end of model file")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_model_records(blob: bytes):
    """Parse and CRC-check a model blob; returns (config_text, records).

    records maps name -> dict(dtype, shape, array | (words, row_len, rows)).
    """
    if len(blob) < 16:
        raise FormatError("file too short to be a model")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise ChecksumError("CRC32 mismatch: model file is corrupted")
    r = _Reader(blob[:-4])
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not a model file")
    version, _flags = r.unpack("<HH")
    if version != MODEL_VERSION:
        raise VersionError(f"model format version {version} unsupported (want {MODEL_VERSION})")
    (cfg_len,) = r.unpack("<I")
    cfg_text = r.take(cfg_len).decode("utf-8")
    (count,) = r.unpack("<I")
    records = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (dtype,) = r.unpack("<B")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if dtype == _F32:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
            records[name] = {"dtype": "f32", "shape": shape, "array": arr}
        elif dtype == _BIT1:
            row_len, rows = r.unpack("<II")
            wpr = bitpack.words_per_row(row_len)
            words = np.frombuffer(r.take(8 * rows * wpr), dtype="<u8").reshape(rows, wpr)
            records[name] = {
                "dtype": "bit1",
                "shape": shape,
                "bits": bitpack.BitTensor(words, shape, row_len),
            }
        else:
            raise FormatError(f"unknown record dtype {dtype}")
    if r.off != len(r.blob):
        raise FormatError("trailing bytes after last record")
    return cfg_text, records


def load_model_bytes(blob: bytes) -> Network:
    """Rebuild an inference network from a model blob.

    Float tensors are restored from their f32 payloads; latent weights are
    reconstructed as alpha * sign(w). The stored scales remain the layer's
    scales exactly, so forward passes match the exporting network bit for
    bit (for networks computing in f32, the stored precision).
    """
    cfg_text, records = read_model_records(blob)
    cfg = parse_network_config(cfg_text)
    net = build_network(cfg, seed=0)
    dtype = cfg.np_dtype

    def rec(name, kind):
        if name not in records or records[name]["dtype"] != kind:
            raise FormatError(f"model file missing {kind} record {name!r}")
        return records[name]

    for p in net.parameters():
        if p.binary:
            continue
        arr = rec(p.name, "f32")["array"]
        if arr.shape != p.value.shape:
            raise FormatError(f"shape mismatch for {p.name}")
        p.value[...] = arr.astype(dtype)
    for bn in net.bn_layers():
        bn.running_mean[...] = rec(f"{bn.name}.running_mean", "f32")["array"].astype(dtype)
        bn.running_var[...] = rec(f"{bn.name}.running_var", "f32")["array"].astype(dtype)
    for seg in net.binary_conv_segments():
        bits = rec(f"{seg.latent.name}.bits", "bit1")["bits"]
        scales = rec(f"{seg.latent.name}.scales", "f32")["array"].astype(dtype)
        w_b = bits.to_pm1().reshape(seg.conv.latent_weights.shape).astype(dtype)
        seg.conv.latent_weights[...] = w_b * scales[:, None, None, None]
        seg.conv.mark_stale()
        seg.conv.sync()
        # the stored scales are authoritative; recomputed means of identical
        # magnitudes can round differently in f32
        seg.conv.scales = scales.copy()
    return net


def load_model(path) -> Network:
    return load_model_bytes(Path(path).read_bytes())


def sniff_kind(path) -> str:
    """"model" for MOBI files, "checkpoint" for npz, else FormatError."""
    head = Path(path).open("rb").read(4)
    if head == MAGIC:
        return "model"
    if head[:2] == b"PK":
        return "checkpoint"
    raise FormatError(f"{path}: neither a model nor a checkpoint")


def inspect_model_bytes(blob: bytes) -> str:
    """Human-readable manifest of a model blob."""
    cfg_text, records = read_model_records(blob)
    lines = ["model format version 1", "", "[config]"]
    lines += ["  " + ln for ln in cfg_text.strip().splitlines()]
    lines.append("")
    lines.append(f"[records] ({len(records)})")
    total_bits = 0
    total_f32 = 0
    for name, recd in records.items():
        if recd["dtype"] == "f32":
            n = int(np.prod(recd["shape"])) if recd["shape"] else 1
            total_f32 += n
            lines.append(f"  f32  {name:48s} {str(tuple(recd['shape'])):20s} {n:>9d}")
        else:
            bt = recd["bits"]
            n = int(np.prod(recd["shape"]))
            total_bits += n
            lines.append(
                f"  bit1 {name:48s} {str(tuple(recd['shape'])):20s} {n:>9d}"
            )
    lines.append("")
    lines.append(f"binary params: {total_bits}  float params: {total_f32}")
    lines.append(f"file bytes: {len(blob)}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoints (float latent state + optimizer state)


def save_checkpoint(path, network: Network, optimizer=None, rng=None, epoch=0,
                    history=None) -> None:
    """Persist the full training state as an npz archive.

    Captures parameters, BN running stats, Adam moments and step counters,
    the RNG state, the epoch counter and the history, so a resumed run
    reproduces the uninterrupted one exactly.
    """
    arrays = {f"net.{k}": v for k, v in network.state_arrays().items()}
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "history": history or [],
        "net_config": format_network_config(network.cfg),
        "adam_t": optimizer.t_counters() if optimizer is not None else {},
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, _meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> dict:
    """Load a checkpoint; returns the resume dict train() accepts."""
    try:
        with np.load(path, allow_pickle=False) as z:
            if "_meta" not in z:
                raise FormatError(f"{path}: not a checkpoint (no metadata)")
            meta = json.loads(str(z["_meta"]))
            arrays = {k: z[k] for k in z.files if k != "_meta"}
    except zlib.error as exc:
        raise FormatError(f"{path}: corrupted checkpoint") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"checkpoint version {version} unsupported (want {CHECKPOINT_VERSION})"
        )
    return {
        "network": {k[4:]: v for k, v in arrays.items() if k.startswith("net.")},
        "optimizer": {k: v for k, v in arrays.items() if k.startswith("adam.")},
        "adam_t": meta["adam_t"],
        "rng_state": meta["rng_state"],
        "epoch": meta["epoch"],
        "history": meta["history"],
        "net_config": parse_network_config(meta["net_config"]),
    }

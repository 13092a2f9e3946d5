"""Binary model bundle: mixed fp32 / packed-int4 layers behind a CRC-32 trailer.

Layout, all integers little-endian::

    magic      4s   b"MMQB"
    version    u16
    flags      u16  bit 0: at least one quantized layer
    meta_len   u32
    meta       meta_len bytes of UTF-8 "key=value\\n" lines, keys sorted
    n_layers   u32
    table      per layer, names in lexicographic order:
                   name_len u16, name, dtype u8, rank u8, dims u32 * rank,
                   offset u64 (from file start), length u64
    payloads   fp32 raw row-major, or packed codes followed by fp32 scales[d_in]
    crc        u32  zlib.crc32 of every preceding byte

Tag 1 holds codes of at most 4 bits as nibbles (low nibble = even index).
Tag 2 holds 5 to 8 bit codes, one signed byte each.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .fusion import PriorityState
from .model import STATE_RELEVANCE, Model
from .quantizer import QuantizedLayer, dequantize

MAGIC = b"MMQB"
VERSION = 1
FLAG_QUANTIZED = 1

DTYPE_FP32 = 0
DTYPE_INT4 = 1
DTYPE_INT8 = 2

_HEAD = struct.Struct("<4sHHI")


class BundleError(ValueError):
    """Structurally invalid bundle (bad magic, truncated table, ...)."""


class BundleCorruptError(BundleError):
    """CRC mismatch or payload outside the file."""


@dataclass
class Bundle:
    meta: dict
    tensors: dict = field(default_factory=dict)     # name -> float64 array (fp32 on disk)
    quantized: dict = field(default_factory=dict)   # name -> QuantizedLayer

    @property
    def is_quantized(self) -> bool:
        return bool(self.quantized)

    def config(self) -> ModelConfig:
        return ModelConfig.from_dict({k[6:]: v for k, v in self.meta.items() if k.startswith("model.")})

    def layer_names(self) -> list[str]:
        return sorted(set(self.tensors) | set(self.quantized))

    def shapes(self) -> dict:
        out = {k: tuple(v.shape) for k, v in self.tensors.items()}
        out.update({k: tuple(q.shape) for k, q in self.quantized.items()})
        return out

    def to_model(self) -> Model:
        """Rebuild the model; int codes are dequantized here."""
        params = {k: v.copy() for k, v in self.tensors.items() if k != STATE_RELEVANCE}
        for k, q in self.quantized.items():
            params[k] = dequantize(q)
        priority = PriorityState(decay=float(self.meta.get("priority.decay", PriorityState().decay)))
        if STATE_RELEVANCE in self.tensors:
            priority.relevance = self.tensors[STATE_RELEVANCE].copy()
        return Model(self.config(), params, priority)


def _fp32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def bundle_from_model(model: Model, quantized: dict | None = None, meta: dict | None = None) -> Bundle:
    quantized = dict(quantized or {})
    m = {f"model.{k}": str(v) for k, v in model.cfg.to_dict().items()}
    m["priority.decay"] = repr(float(model.priority.decay))
    m.update(meta or {})
    tensors = {k: _fp32(v) for k, v in model.params.items() if k not in quantized}
    tensors[STATE_RELEVANCE] = _fp32(model.priority.relevance)
    return Bundle(m, tensors, quantized)


def _encode_meta(meta: dict) -> bytes:
    lines = []
    for k in sorted(meta):
        v = str(meta[k])
        if "=" in k or "\n" in k or "\n" in v:
            raise BundleError(f"metadata entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}\n")
    return "".join(lines).encode("utf-8")


def _decode_meta(raw: bytes) -> dict:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        k, sep, v = line.partition("=")
        if not sep:
            raise BundleError(f"bad metadata line {line!r}")
        out[k] = v
    return out


def to_bytes(bundle: Bundle) -> bytes:
    names = bundle.layer_names()
    clash = set(bundle.tensors) & set(bundle.quantized)
    if clash:
        raise BundleError(f"layers stored twice: {sorted(clash)}")
    entries = []
    for name in names:
        if name in bundle.quantized:
            q = bundle.quantized[name]
            tag = DTYPE_INT4 if q.bits <= 4 else DTYPE_INT8
            payload = q.packed + np.asarray(q.scales, dtype="<f4").tobytes()
            shape = q.shape
        else:
            arr = bundle.tensors[name]
            tag, payload, shape = DTYPE_FP32, np.asarray(arr, dtype="<f4").tobytes(), arr.shape
        entries.append((name.encode("utf-8"), tag, tuple(int(s) for s in shape), payload))

    meta = _encode_meta(bundle.meta)
    flags = FLAG_QUANTIZED if bundle.quantized else 0
    head = _HEAD.pack(MAGIC, VERSION, flags, len(meta)) + meta + struct.pack("<I", len(entries))
    table_len = sum(2 + len(n) + 2 + 4 * len(s) + 16 for n, _, s, _ in entries)
    offset = len(head) + table_len
    table, payloads = [], []
    for name, tag, shape, payload in entries:
        table.append(struct.pack("<H", len(name)) + name + struct.pack("<BB", tag, len(shape))
                     + struct.pack(f"<{len(shape)}I", *shape) + struct.pack("<QQ", offset, len(payload)))
        payloads.append(payload)
        offset += len(payload)
    body = head + b"".join(table) + b"".join(payloads)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes) -> Bundle:
    if len(data) < _HEAD.size + 8:
        raise BundleCorruptError("file too short to be a bundle")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise BundleCorruptError("CRC mismatch")
    magic, version, flags, meta_len = _HEAD.unpack_from(body, 0)
    if magic != MAGIC:
        raise BundleError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BundleError(f"unsupported bundle version {version}")
    pos = _HEAD.size
    meta = _decode_meta(body[pos:pos + meta_len])
    pos += meta_len
    (n_layers,) = struct.unpack_from("<I", body, pos)
    pos += 4
    bits = int(meta.get("quant.bits", 4))
    bundle = Bundle(meta)
    try:
        for _ in range(n_layers):
            (nlen,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            tag, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            offset, length = struct.unpack_from("<QQ", body, pos)
            pos += 16
            if offset + length > len(body):
                raise BundleCorruptError(f"{name}: payload runs past the end of the file")
            payload = body[offset:offset + length]
            if name in bundle.tensors or name in bundle.quantized:
                raise BundleError(f"duplicate layer {name!r}")
            n = int(np.prod(shape)) if shape else 1
            if tag == DTYPE_FP32:
                if length != 4 * n:
                    raise BundleError(f"{name}: expected {4 * n} bytes, found {length}")
                bundle.tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
            elif tag in (DTYPE_INT4, DTYPE_INT8):
                if rank != 2:
                    raise BundleError(f"{name}: quantized layers must be 2-D")
                n_code = (n + 1) // 2 if tag == DTYPE_INT4 else n
                if length != n_code + 4 * shape[0]:
                    raise BundleError(f"{name}: payload length {length} does not fit shape {shape}")
                scales = np.frombuffer(payload[n_code:], dtype="<f4").astype(np.float64)
                if (bits <= 4) != (tag == DTYPE_INT4):
                    raise BundleError(f"{name}: dtype tag {tag} does not match quant.bits={bits}")
                bundle.quantized[name] = QuantizedLayer(payload[:n_code], scales, tuple(shape), bits)
            else:
                raise BundleError(f"{name}: unknown dtype tag {tag}")
    except struct.error as e:
        raise BundleError(f"truncated layer table: {e}") from None
    if bool(flags & FLAG_QUANTIZED) != bool(bundle.quantized):
        raise BundleError("quantized flag disagrees with the layer table")
    return bundle


def save_bundle(bundle: Bundle, path):
    data = to_bytes(bundle)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_bundle(path) -> Bundle:
    with open(path, "rb") as f:
        return from_bytes(f.read())

"""Activation-aware post-training weight quantization.

Per-input-channel scales come from calibration activations:
``s_i = quantile(|A_i|, alpha) / (2**b - 1)``, and weights are stored as signed
codes ``clamp(round_half_even(W[i, j] / s_i))`` that dequantize to ``code * s_i``.

Two scale modes share that storage format:

``verbatim``
    the formula above, taken literally. Its scale has activation units, so a
    layer whose inputs are large next to its weights rounds mostly to zero.
``activation_weighted`` (default)
    rows are multiplied by ``f_i = a_i / mean(a)`` with ``a_i`` the same
    activation quantile, the scaled matrix gets one symmetric grid
    ``S = max|W * f| / (2**(b-1) - 1)`` (snapped to an 8-bit mantissa), and that folds back into row scales
    ``s_i = S / f_i``. Busy channels get the finer grid, and every channel's
    worst-case output error ``a_i * s_i / 2`` comes out equal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Model, forward, predict_logits
from .tensor import channel_quantiles, quantile, round_half_even

SCALE_FLOOR = 1e-8
MODALITY_GROUPS = ("img", "text", "vec")
SCALE_MODES = ("activation_weighted", "verbatim")
GRID_MANTISSA_BITS = 8


class QuantizationError(ValueError):
    pass


class MissingStatsError(QuantizationError):
    pass


class PackingError(QuantizationError):
    pass


# ---------------------------------------------------------------- policies

def _image_layers(cfg):
    out = []
    for i in range(cfg.img_blocks):
        p = f"image.block{i}."
        out += [p + "attn.wq", p + "attn.wk", p + "attn.wv", p + "attn.wo",
                p + "ffn.fc1.w", p + "ffn.fc2.w"]
    return out


def _text_layers(cfg):
    out = []
    for i in range(cfg.text_layers):
        out += [f"text.layer{i}.attn.wk", f"text.layer{i}.attn.wv"]
    return out


FUSION_QKV = ("fusion.attn.wq", "fusion.attn.wk", "fusion.attn.wv")
FUSION_EXTRA = ("fusion.proj_img.w", "fusion.proj_text.w", "fusion.align.w", "fusion.out.w",
                "fusion.stack.w")
HEAD_LAYERS = ("head.fc1.w", "head.fc2.w")


@dataclass(frozen=True)
class QuantPolicy:
    """Which weight matrices get quantized, at what bit width and quantile."""

    bits: int = 4
    alpha: float = 0.99
    image: bool = True
    text: bool = True
    vector: bool = True
    fusion: bool = True
    fusion_extra: bool = True
    head: bool = True
    mode: str = "activation_weighted"

    def __post_init__(self):
        if self.mode not in SCALE_MODES:
            raise QuantizationError(f"unknown scale mode {self.mode!r}")
        if not 2 <= self.bits <= 8:
            raise QuantizationError(f"bit width must lie in [2, 8], got {self.bits}")
        if not 0 < self.alpha <= 1:
            raise QuantizationError(f"alpha must lie in (0, 1], got {self.alpha}")

    def select(self, model: Model) -> list[str]:
        cfg = model.cfg
        names = []
        if self.image:
            names += _image_layers(cfg)
        if self.text:
            names += _text_layers(cfg)
        if self.vector:
            names += ["vector.fc1.w", "vector.fc2.w"]
        if self.fusion and cfg.strategy != "stacking":
            names += list(FUSION_QKV)
        if self.fusion_extra:
            names += list(FUSION_EXTRA)
        if self.head:
            names += list(HEAD_LAYERS)
        return sorted(n for n in names if n in model.params)

    @classmethod
    def empty(cls, **kw):
        return cls(image=False, text=False, vector=False, fusion=False, fusion_extra=False,
                   head=False, **kw)


# ------------------------------------------------------------ calibration

@dataclass
class CalibStats:
    """|activation| samples per quantizable layer, shape ``(n, d_in)`` each.

    Fusion Q/K/V layers keep one array per modality row.
    """

    samples: dict = field(default_factory=dict)
    sample_count: int = 0
    taps: dict = field(default_factory=dict)

    def record(self, name, x, mask=None):
        x = np.abs(np.asarray(x, dtype=np.float64))
        if name in FUSION_QKV:
            # x is the (B, 3, d) modality stack
            for g, m in enumerate(MODALITY_GROUPS):
                self.samples.setdefault((name, m), []).append(x[:, g, :])
            self.taps[name] = "modality stack rows (grouped)"
            return
        if mask is not None:
            x = x[np.broadcast_to(mask, x.shape[:-1])]
        self.samples.setdefault(name, []).append(x.reshape(-1, x.shape[-1]))
        self.taps.setdefault(name, "matmul input")

    def arrays(self, name):
        """Concatenated samples for ``name``; a dict per modality for grouped layers."""
        if name in FUSION_QKV:
            groups = {m: self.samples.get((name, m)) for m in MODALITY_GROUPS}
            if any(v is None for v in groups.values()):
                return None
            return {m: np.concatenate(v) for m, v in groups.items()}
        v = self.samples.get(name)
        return None if v is None else np.concatenate(v)

    def merge(self, other: "CalibStats") -> "CalibStats":
        out = CalibStats(sample_count=self.sample_count + other.sample_count)
        for src in (self, other):
            for k, v in src.samples.items():
                out.samples.setdefault(k, []).extend(v)
            out.taps.update(src.taps)
        return out

    def layer_names(self):
        return sorted({k[0] if isinstance(k, tuple) else k for k in self.samples})


def collect_calibration_stats(model: Model, images, tokens, vectors, batch_size: int = 16) -> CalibStats:
    """Full-precision forwards over the calibration inputs, recording matmul inputs.

    Text-encoder taps see post-LayerNorm activations at non-pad positions.
    """
    n = len(images)
    if n == 0:
        raise QuantizationError("calibration set is empty")
    stats = CalibStats()
    for i in range(0, n, batch_size):
        forward(model, images[i:i + batch_size], tokens[i:i + batch_size],
                vectors[i:i + batch_size], with_align_loss=False, tap=stats.record)
    stats.sample_count = n
    return stats


# --------------------------------------------------------- scales / codes

def code_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def channel_scale(channel_abs_values, alpha: float, bits: int):
    """Scale for one channel. Returns ``(scale, degenerate)``."""
    if len(channel_abs_values) == 0:
        raise QuantizationError("channel has no recorded activations")
    if not 0 < alpha <= 1 or bits < 2:
        raise QuantizationError("alpha must lie in (0, 1] and bits >= 2")
    q = quantile(np.abs(np.asarray(channel_abs_values, dtype=np.float64)), alpha)
    if q == 0:
        return SCALE_FLOOR, True
    return q / ((1 << bits) - 1), False


def channel_scales(samples: np.ndarray, alpha: float, bits: int):
    """Vectorised :func:`channel_scale` over the columns of ``(n, d_in)``."""
    q = channel_quantiles(np.abs(samples), alpha)
    degenerate = q == 0
    s = np.where(degenerate, SCALE_FLOOR, q / ((1 << bits) - 1))
    return _fp32(s), degenerate


def _fp32(x):
    # scales are stored as float32; round them now so reloads quantize identically
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class QuantizedLayer:
    packed: bytes
    scales: np.ndarray
    shape: tuple
    bits: int = 4

    @property
    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, int(np.prod(self.shape)), self.bits).reshape(self.shape)

    def payload_bytes(self) -> int:
        return len(self.packed) + 4 * len(self.scales)


def pack_int4(codes) -> bytes:
    """Two's-complement nibbles, two per byte, low nibble holds the even index."""
    c = np.asarray(codes, dtype=np.int64).reshape(-1)
    if c.size and (c.min() < -8 or c.max() > 7):
        raise PackingError("int4 codes must lie in [-8, 7]")
    nib = (c & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(data: bytes, n: int) -> np.ndarray:
    if len(data) != (n + 1) // 2:
        raise PackingError(f"packed length {len(data)} does not match {n} codes")
    b = np.frombuffer(data, dtype=np.uint8)
    nib = np.empty(2 * b.size, dtype=np.int64)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    nib = nib[:n]
    return np.where(nib >= 8, nib - 16, nib)


def pack_codes(codes, bits: int) -> bytes:
    if bits <= 4:
        return pack_int4(codes)
    # wider widths use one signed byte per code
    return np.asarray(codes, dtype=np.int8).reshape(-1).tobytes()


def unpack_codes(data: bytes, n: int, bits: int) -> np.ndarray:
    if bits <= 4:
        return unpack_int4(data, n)
    if len(data) != n:
        raise PackingError(f"packed length {len(data)} does not match {n} codes")
    return np.frombuffer(data, dtype=np.int8).astype(np.int64)


def quantize_codes(w, scales, bits: int = 4) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)
    if np.any(s <= 0):
        raise QuantizationError("scales must be strictly positive")
    lo, hi = code_range(bits)
    return np.clip(round_half_even(w / s[:, None]), lo, hi).astype(np.int64)


def quantize_weights(w, scales, bits: int = 4) -> QuantizedLayer:
    """Quantize ``W[d_in, d_out]`` with one scale per input channel (row)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or len(scales) != w.shape[0]:
        raise QuantizationError(f"need one scale per row of {w.shape}, got {len(scales)}")
    codes = quantize_codes(w, scales, bits)
    return QuantizedLayer(pack_codes(codes, bits), np.asarray(scales, dtype=np.float64),
                          tuple(w.shape), bits)


def dequantize(layer: QuantizedLayer) -> np.ndarray:
    return layer.codes * layer.scales[:, None]


def packed_payload_bytes(d_in: int, d_out: int) -> int:
    return (d_in * d_out + 1) // 2 + 4 * d_in


# ------------------------------------------------------------- whole model

@dataclass
class QuantizedModel:
    model: Model                      # dequantized weights in place
    layers: dict                      # name -> QuantizedLayer
    policy: QuantPolicy
    degenerate: dict = field(default_factory=dict)  # name -> count of floored channels


def activation_weighted_scales(w, act_quantiles, bits: int):
    """Row scales ``S / f_i`` from the uniform grid of ``W * f`` (``f_i = a_i / mean(a)``)."""
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(act_quantiles, dtype=np.float64)
    if a.max() <= 0:
        # no signal at all; fall back to a plain weight-range grid
        a = np.ones_like(a)
    a = np.maximum(a, SCALE_FLOOR * a.max())
    f = a / a.mean()
    top = np.abs(w * f[:, None]).max()
    if top == 0:
        return _fp32(np.full(len(a), SCALE_FLOOR))
    return _fp32(snap_step(top / code_range(bits)[1]) / f)


def snap_step(x: float, mantissa_bits: int = GRID_MANTISSA_BITS) -> float:
    """Round a grid step to a short mantissa.

    Re-quantizing dequantized weights perturbs ``max|W * f|`` by float32 ulps;
    the snap absorbs that, so a second pass lands on the same step.
    """
    m, e = np.frexp(x)
    return float(np.ldexp(np.rint(m * (1 << mantissa_bits)) / (1 << mantissa_bits), e))


def layer_quantiles(name, stats: CalibStats, alpha: float) -> np.ndarray:
    """Per-input-channel activation quantile for one layer."""
    arr = stats.arrays(name)
    if arr is None:
        raise MissingStatsError(name)
    if isinstance(arr, dict):
        # one quantile per modality group, the coarsest wins per channel
        return np.max([channel_quantiles(a, alpha) for a in arr.values()], axis=0)
    return channel_quantiles(arr, alpha)


def scales_from_quantiles(qs, policy: QuantPolicy, w=None):
    """``(scales, degenerate_mask)``; ``w`` is needed in ``activation_weighted`` mode."""
    qs = np.asarray(qs, dtype=np.float64)
    degenerate = qs == 0
    if policy.mode == "activation_weighted":
        if w is None:
            raise QuantizationError("activation_weighted scales need the weight matrix")
        return activation_weighted_scales(w, qs, policy.bits), degenerate
    s = np.where(degenerate, SCALE_FLOOR, qs / ((1 << policy.bits) - 1))
    return _fp32(s), degenerate


def layer_scales(name, stats: CalibStats, policy: QuantPolicy, w=None):
    """``(scales, degenerate_mask, activation_quantiles)`` for one layer."""
    qs = layer_quantiles(name, stats, policy.alpha)
    s, degenerate = scales_from_quantiles(qs, policy, w)
    return s, degenerate, qs


def stats_quantiles(stats: CalibStats, alpha: float) -> dict:
    """Every recorded layer reduced to its quantile vector."""
    return {n: layer_quantiles(n, stats, alpha) for n in stats.layer_names()}


def apply_awq(model: Model, stats, policy: QuantPolicy) -> QuantizedModel:
    """Quantize every layer the policy selects; everything else stays full precision.

    ``stats`` is a :class:`CalibStats` or a ``{layer: quantile vector}`` dict
    already reduced at ``policy.alpha``.
    """
    if isinstance(stats, CalibStats):
        stats = {n: layer_quantiles(n, stats, policy.alpha)
                 for n in policy.select(model) if stats.arrays(n) is not None}
    names = policy.select(model)
    missing = [n for n in names if n not in stats]
    if missing:
        raise MissingStatsError("no calibration statistics for: " + ", ".join(missing))
    out = model.copy()
    layers, degenerate = {}, {}
    for name in names:
        w = model.params[name]
        if len(stats[name]) != w.shape[0]:
            raise QuantizationError(f"{name}: {len(stats[name])} statistics for {w.shape[0]} channels")
        s, deg = scales_from_quantiles(stats[name], policy, w)
        layer = quantize_weights(w, s, policy.bits)
        out.params[name] = dequantize(layer)
        layers[name] = layer
        degenerate[name] = int(deg.sum())
    return QuantizedModel(out, layers, policy, degenerate)


# ---------------------------------------------------------------- report

def payload_sizes(model: Model, quantized: dict | None = None) -> dict:
    """Weight-payload bytes: fp32 for plain tensors, codes + fp32 scales for quantized ones."""
    quantized = quantized or {}
    fp = sum(4 * v.size for v in model.params.values())
    q = 0
    for name, v in model.params.items():
        q += quantized[name].payload_bytes() if name in quantized else 4 * v.size
    sel_fp = sum(4 * model.params[n].size for n in quantized)
    sel_codes = sum(len(quantized[n].packed) for n in quantized)
    sel_total = sum(quantized[n].payload_bytes() for n in quantized)
    return {
        "fp32_bytes": fp,
        "quantized_bytes": q,
        "ratio": fp / q if q else float("nan"),
        "selected_fp32_bytes": sel_fp,
        "selected_code_bytes": sel_codes,
        "selected_total_bytes": sel_total,
        "code_ratio": sel_fp / sel_codes if sel_codes else float("nan"),
    }


def quantization_report(fp_model: Model, q_model: Model, images, tokens, vectors, labels,
                        quantized: dict | None = None) -> dict:
    """Accuracy, argmax agreement, payload sizes and per-layer weight error."""
    labels = np.asarray(labels)
    pf = predict_logits(fp_model, images, tokens, vectors).argmax(axis=1)
    pq = predict_logits(q_model, images, tokens, vectors).argmax(axis=1)
    per_layer = {}
    for name, w in fp_model.params.items():
        diff = np.abs(w - q_model.params[name])
        if diff.max() > 0 or (quantized and name in quantized):
            per_layer[name] = {"max_abs_err": float(diff.max()), "mean_abs_err": float(diff.mean())}
    return {
        "fp_accuracy": float((pf == labels).mean()),
        "q_accuracy": float((pq == labels).mean()),
        "agreement": float((pf == pq).mean()),
        "sizes": payload_sizes(fp_model, quantized),
        "layers": per_layer,
        "fp_pred": pf,
        "q_pred": pq,
    }


def int4_code_mb(fp32_mb: float) -> float:
    """fp32 payload in MB -> 4-bit code payload (scales excluded)."""
    return fp32_mb * 4 / 32

"""Toy-scale image (shifted-window), text (masked self-attention) and vector (MLP) encoders.

All forwards are batched: images ``(B, C, H, W)``, tokens ``(B, L)``,
vectors ``(B, 5)``. Parameters live in one flat dict keyed by dotted names
(``image.block0.attn.wq`` ...).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import nn
from .config import ConfigError, ModelConfig, ParamBuilder, add_prefixed, sub


class ShapeError(ValueError):
    pass


class TokenRangeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


# ----------------------------------------------------------------- parameters

def init_image_params(pb: ParamBuilder, cfg: ModelConfig):
    d = cfg.d_img
    pb.linear("image.patch", cfg.channels * cfg.patch * cfg.patch, d)
    for i in range(cfg.img_blocks):
        _init_block(pb, f"image.block{i}", d)


def init_text_params(pb: ParamBuilder, cfg: ModelConfig):
    pb.uniform("text.embed", (cfg.vocab, cfg.d_text), 1)
    for i in range(cfg.text_layers):
        _init_block(pb, f"text.layer{i}", cfg.d_text)


def init_vector_params(pb: ParamBuilder, cfg: ModelConfig):
    pb.linear("vector.fc1", cfg.vec_in, cfg.vec_hidden)
    pb.linear("vector.fc2", cfg.vec_hidden, cfg.d)


def _init_block(pb, prefix, d):
    pb.norm(prefix + ".ln1", d)
    for w in ("wq", "wk", "wv", "wo"):
        pb.weight(f"{prefix}.attn.{w}", d, d)
    pb.norm(prefix + ".ln2", d)
    pb.linear(prefix + ".ffn.fc1", d, 2 * d)
    pb.linear(prefix + ".ffn.fc2", 2 * d, d)


def _ffn_view(p):
    return {"w1": p["ffn.fc1.w"], "b1": p["ffn.fc1.b"], "w2": p["ffn.fc2.w"], "b2": p["ffn.fc2.b"]}


def _ffn_grads(g):
    return {"ffn.fc1.w": g["w1"], "ffn.fc1.b": g["b1"], "ffn.fc2.w": g["w2"], "ffn.fc2.b": g["b2"]}


def _tap_names(tap, prefix):
    """Adapt short layer names used in ``nn`` to full parameter names."""
    if tap is None:
        return None
    table = {"wq": "attn.wq", "wk": "attn.wk", "wv": "attn.wv", "wo": "attn.wo",
             "w1": "ffn.fc1.w", "w2": "ffn.fc2.w"}

    def inner(name, x, mask=None):
        tap(prefix + table[name], x, mask)
    return inner


# -------------------------------------------------------------- image encoder

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, N, C*P*P)``, patches in raster order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def patch_embed(image, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Embed one image ``(C, H, W)`` (or a batch) into ``(N, D_X)`` patch rows."""
    x = patchify(image, cfg.patch)
    y = x @ params["image.patch.w"] + params["image.patch.b"]
    return y[0] if np.ndim(image) == 3 else y


@lru_cache(maxsize=None)
def _window_order(grid, window, shift):
    order = window_order(grid, window, shift)
    return order, np.argsort(order)


def window_order(grid: int, window: int, shift: int) -> np.ndarray:
    """Token gather order implementing cyclic roll by -shift then window partition.

    ``x[:, order]`` reshaped to ``(B, nW, window**2, D)`` gives the windows; the
    inverse permutation undoes both steps.
    """
    order = []
    for wr in range(0, grid, window):
        for wc in range(0, grid, window):
            for r in range(wr, wr + window):
                for c in range(wc, wc + window):
                    order.append(((r + shift) % grid) * grid + (c + shift) % grid)
    return np.array(order)


def roll_grid(x: np.ndarray, grid: int, shift: int) -> np.ndarray:
    """Cyclically roll a ``(..., N, D)`` token grid by ``-shift`` on both axes."""
    lead = x.shape[:-2]
    g = x.reshape(*lead, grid, grid, x.shape[-1])
    g = np.roll(g, (-shift, -shift), axis=(-3, -2))
    return g.reshape(x.shape)


def swin_block_forward(x, params: dict, shift: int, cfg: ModelConfig, prefix="image.block0.",
                       tap=None):
    """Pre-LN shifted-window attention block on ``(B, N, D)`` (or ``(N, D)``).

    Returns ``(out, cache)``.
    """
    if shift not in (0, cfg.window // 2):
        raise ConfigError(f"invalid shift {shift} for window {cfg.window}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    b, n, d = x.shape
    grid = int(round(np.sqrt(n)))
    if grid * grid != n or grid % cfg.window:
        raise ShapeError(f"{n} patches do not form a grid tiled by {cfg.window}x{cfg.window} windows")
    p = sub(params, prefix)
    m2 = cfg.window * cfg.window
    order, inv = _window_order(grid, cfg.window, shift)
    t = _tap_names(tap, prefix)

    h, ln1 = nn.layer_norm_forward(x, p["ln1.g"], p["ln1.b"], cfg.ln_eps)
    hw = h[:, order].reshape(b, n // m2, m2, d)
    a, mc = nn.mha_forward(hw, sub(p, "attn."), cfg.img_heads, tap=t)
    a = a.reshape(b, n, d)[:, inv]
    x1 = x + a
    h2, ln2 = nn.layer_norm_forward(x1, p["ln2.g"], p["ln2.b"], cfg.ln_eps)
    f, fc = nn.ffn_forward(h2, _ffn_view(p), tap=t)
    out = x1 + f
    cache = (prefix, order, inv, ln1, mc, ln2, fc, squeeze, (b, n, d), m2)
    return (out[0] if squeeze else out), cache


def swin_block_backward(dout, cache, params):
    prefix, order, inv, ln1, mc, ln2, fc, squeeze, (b, n, d), m2 = cache
    if squeeze:
        dout = dout[None]
    p = sub(params, prefix)
    g = {}
    dx1 = dout.copy()
    dh2, fg = nn.ffn_backward(dout, fc, _ffn_view(p))
    add_prefixed(g, "", _ffn_grads(fg))
    dx1_ln, dg2, db2 = nn.layer_norm_backward(dh2, ln2)
    dx1 += dx1_ln
    g["ln2.g"], g["ln2.b"] = dg2, db2
    dx = dx1.copy()
    da = dx1[:, order].reshape(b, n // m2, m2, d)
    dhw, ag = nn.mha_backward(da, mc, sub(p, "attn."))
    add_prefixed(g, "attn.", ag)
    dh = dhw.reshape(b, n, d)[:, inv]
    dx_ln, dg1, db1 = nn.layer_norm_backward(dh, ln1)
    dx += dx_ln
    g["ln1.g"], g["ln1.b"] = dg1, db1
    out = {}
    add_prefixed(out, prefix, g)
    return (dx[0] if squeeze else dx), out


def image_forward(images, params, cfg: ModelConfig, tap=None):
    """Batched image encoder: ``(B, C, H, W)`` -> pooled ``(B, D_X)``."""
    images = np.asarray(images, dtype=np.float64)
    patches = patchify(images, cfg.patch)
    if tap is not None:
        tap("image.patch.w", patches, None)
    x = patches @ params["image.patch.w"] + params["image.patch.b"]
    blocks = []
    for i, s in enumerate(cfg.shifts):
        x, c = swin_block_forward(x, params, s, cfg, prefix=f"image.block{i}.", tap=tap)
        blocks.append(c)
    pooled = x.sum(axis=1) / x.shape[1]
    return pooled, (images.shape, patches, blocks, x.shape[1])


def image_backward(dpooled, cache, params, cfg: ModelConfig):
    shape, patches, blocks, n = cache
    dx = np.repeat(dpooled[:, None, :], n, axis=1) / n
    grads = {}
    for c in reversed(blocks):
        dx, g = swin_block_backward(dx, c, params)
        add_prefixed(grads, "", g)
    _, dw, db = nn.linear_backward(dx, patches, params["image.patch.w"])
    grads["image.patch.w"] = dw
    grads["image.patch.b"] = db
    return grads


def image_encode(image, params, cfg: ModelConfig) -> np.ndarray:
    """Single image ``(C, H, W)`` -> pooled feature vector of width D_X."""
    pooled, _ = image_forward(np.asarray(image)[None], params, cfg)
    return pooled[0]


# --------------------------------------------------------------- text encoder

def check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.shape[1] != cfg.max_len:
        raise ShapeError(f"token sequence length {tokens.shape[1]} != {cfg.max_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise TokenRangeError(f"token ids must lie in [0, {cfg.vocab}), got {tokens.min()}..{tokens.max()}")
    return tokens


def text_forward(tokens, params, cfg: ModelConfig, tap=None):
    """Batched text encoder: ``(B, L)`` ids -> pooled ``(B, D_T)``."""
    tokens = check_tokens(tokens, cfg)
    mask = tokens != cfg.pad_id
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DegenerateInputError("token sequence contains only padding")
    x = params["text.embed"][tokens]
    layers = []
    for i in range(cfg.text_layers):
        prefix = f"text.layer{i}."
        p = sub(params, prefix)
        t = _tap_names(tap, prefix)
        h, ln1 = nn.layer_norm_forward(x, p["ln1.g"], p["ln1.b"], cfg.ln_eps)
        a, mc = nn.mha_forward(h, sub(p, "attn."), cfg.text_heads, key_mask=mask, tap=t)
        x1 = x + a
        h2, ln2 = nn.layer_norm_forward(x1, p["ln2.g"], p["ln2.b"], cfg.ln_eps)
        f, fc = nn.ffn_forward(h2, _ffn_view(p), tap=t, mask=mask)
        x = x1 + f
        layers.append((prefix, ln1, mc, ln2, fc))
    w = mask / counts[:, None]
    pooled = (x * w[:, :, None]).sum(axis=1)
    return pooled, (tokens, w, layers)


def text_backward(dpooled, cache, params, cfg: ModelConfig):
    tokens, w, layers = cache
    dx = dpooled[:, None, :] * w[:, :, None]
    grads = {}
    for prefix, ln1, mc, ln2, fc in reversed(layers):
        p = sub(params, prefix)
        g = {}
        dh2, fg = nn.ffn_backward(dx, fc, _ffn_view(p))
        add_prefixed(g, "", _ffn_grads(fg))
        d1, g["ln2.g"], g["ln2.b"] = nn.layer_norm_backward(dh2, ln2)
        dx1 = dx + d1
        dh, ag = nn.mha_backward(dx1, mc, sub(p, "attn."))
        add_prefixed(g, "attn.", ag)
        d0, g["ln1.g"], g["ln1.b"] = nn.layer_norm_backward(dh, ln1)
        dx = dx1 + d0
        add_prefixed(grads, prefix, g)
    demb = np.zeros_like(params["text.embed"])
    np.add.at(demb, tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    grads["text.embed"] = demb
    return grads


def text_encode(tokens, params, cfg: ModelConfig) -> np.ndarray:
    pooled, _ = text_forward(np.asarray(tokens)[None], params, cfg)
    return pooled[0]


# ------------------------------------------------------------- vector encoder

def vector_forward(v0, params, cfg: ModelConfig, tap=None):
    v0 = np.asarray(v0, dtype=np.float64)
    if v0.ndim == 1:
        v0 = v0[None]
    if v0.shape[-1] != cfg.vec_in:
        raise ShapeError(f"classification vector must have length {cfg.vec_in}, got {v0.shape[-1]}")
    if tap is not None:
        tap("vector.fc1.w", v0, None)
    a = v0 @ params["vector.fc1.w"] + params["vector.fc1.b"]
    hid, rmask = nn.relu_forward(a)
    if tap is not None:
        tap("vector.fc2.w", hid, None)
    # output map is the identity
    out = hid @ params["vector.fc2.w"] + params["vector.fc2.b"]
    return out, (v0, hid, rmask)


def vector_backward(dout, cache, params):
    v0, hid, rmask = cache
    dhid, dw2, db2 = nn.linear_backward(dout, hid, params["vector.fc2.w"])
    da = nn.relu_backward(dhid, rmask)
    _, dw1, db1 = nn.linear_backward(da, v0, params["vector.fc1.w"])
    return {"vector.fc1.w": dw1, "vector.fc1.b": db1, "vector.fc2.w": dw2, "vector.fc2.b": db2}


def vector_encode(v0, params, cfg: ModelConfig) -> np.ndarray:
    out, _ = vector_forward(v0, params, cfg)
    return out[0]

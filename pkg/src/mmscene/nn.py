"""Layer primitives with hand-derived backward passes.

Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes the upstream gradient and the cache. Weights follow the ``x @ W``
convention, so row ``i`` of a weight matrix belongs to input channel ``i``.
Leading axes are treated as batch axes throughout.
"""
from __future__ import annotations

import numpy as np

from .tensor import softmax_rows

MASKED_LOGIT = -1e30


def flat2d(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def linear_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, x


def linear_backward(dy, x, w, has_bias=True):
    dx = dy @ w.T
    dw = flat2d(x).T @ flat2d(dy)
    db = flat2d(dy).sum(axis=0) if has_bias else None
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def layer_norm_forward(x, gamma, beta, eps=1e-5):
    n = x.shape[-1]
    xc = x - x.sum(axis=-1, keepdims=True) / n
    var = (xc * xc).sum(axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    dgamma = flat2d(dy * xhat).sum(axis=0)
    dbeta = flat2d(dy).sum(axis=0)
    dxhat = dy * gamma
    n = xhat.shape[-1]
    dx = inv / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def softmax_backward(dp, p):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def _split_heads(x, heads):
    *lead, t, d = x.shape
    x = x.reshape(*lead, t, heads, d // heads)
    return np.swapaxes(x, -2, -3)


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, t, h, dh = x.shape
    return x.reshape(*lead, t, h * dh)


def mha_forward(h, p: dict, heads: int, key_mask=None, tap=None, prefix=""):
    """Multi-head self-attention over the second-to-last axis.

    ``p`` holds ``wq, wk, wv, wo`` (no biases). ``key_mask`` is a boolean array
    over positions (True = attendable); masked keys get exactly zero weight.
    ``tap(name, x)`` sees the input of every projection matmul.
    """
    d = h.shape[-1]
    if d % heads:
        raise ValueError(f"model width {d} not divisible by {heads} heads")
    if tap is not None:
        for name in ("wq", "wk", "wv"):
            tap(prefix + name, h, key_mask)
    q = _split_heads(h @ p["wq"], heads)
    k = _split_heads(h @ p["wk"], heads)
    v = _split_heads(h @ p["wv"], heads)
    scale = 1.0 / np.sqrt(d // heads)
    logits = (q @ np.swapaxes(k, -1, -2)) * scale
    if key_mask is not None:
        m = key_mask[..., None, None, :]
        logits = np.where(m, logits, MASKED_LOGIT)
    attn = softmax_rows(logits)
    if key_mask is not None:
        attn = np.where(key_mask[..., None, None, :], attn, 0.0)
    o = _merge_heads(attn @ v)
    if tap is not None:
        tap(prefix + "wo", o, key_mask)
    out = o @ p["wo"]
    return out, (h, q, k, v, attn, o, scale, heads)


def mha_backward(dout, cache, p: dict):
    h, q, k, v, attn, o, scale, heads = cache
    g = {"wo": flat2d(o).T @ flat2d(dout)}
    do = _split_heads(dout @ p["wo"].T, heads)
    dattn = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ do
    dlogits = softmax_backward(dattn, attn) * scale
    dq = dlogits @ k
    dk = np.swapaxes(dlogits, -1, -2) @ q
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    h2 = flat2d(h)
    g["wq"] = h2.T @ flat2d(dq)
    g["wk"] = h2.T @ flat2d(dk)
    g["wv"] = h2.T @ flat2d(dv)
    dh = dq @ p["wq"].T + dk @ p["wk"].T + dv @ p["wv"].T
    return dh, g


def ffn_forward(x, p: dict, tap=None, prefix="", mask=None):
    if tap is not None:
        tap(prefix + "w1", x, mask)
    a, _ = linear_forward(x, p["w1"], p["b1"])
    hid, rmask = relu_forward(a)
    if tap is not None:
        tap(prefix + "w2", hid, mask)
    y, _ = linear_forward(hid, p["w2"], p["b2"])
    return y, (x, hid, rmask)


def ffn_backward(dy, cache, p: dict):
    x, hid, rmask = cache
    dhid, dw2, db2 = linear_backward(dy, hid, p["w2"])
    da = relu_backward(dhid, rmask)
    dx, dw1, db1 = linear_backward(da, x, p["w1"])
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}

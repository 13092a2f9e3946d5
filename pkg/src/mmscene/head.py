"""Decision layer: dropout, two fully connected layers, cross-entropy and loss assembly."""
from __future__ import annotations

import numpy as np

from . import nn
from .config import ModelConfig, ParamBuilder
from .tensor import log_softmax_rows, softmax_rows

DEFAULT_LAMBDA_ALIGN = 0.1


class LabelRangeError(ValueError):
    pass


def init_head_params(pb: ParamBuilder, cfg: ModelConfig):
    pb.linear("head.fc1", 4 * cfg.d, cfg.head_hidden)
    pb.linear("head.fc2", cfg.head_hidden, cfg.n_classes)


def dropout_mask(rng, shape, p: float) -> np.ndarray:
    """Inverted-dropout mask: Bernoulli(1-p) scaled by 1/(1-p)."""
    if p <= 0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def decision_forward(v_fused, params, dropout_mask=None, tap=None):
    """Logits from fused features; ``dropout_mask`` is applied to the input when given."""
    x = np.asarray(v_fused, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if dropout_mask is not None:
        x = x * dropout_mask
    if tap is not None:
        tap("head.fc1.w", x, None)
    a = x @ params["head.fc1.w"] + params["head.fc1.b"]
    hid, rmask = nn.relu_forward(a)
    if tap is not None:
        tap("head.fc2.w", hid, None)
    logits = hid @ params["head.fc2.w"] + params["head.fc2.b"]
    cache = (x, hid, rmask, dropout_mask)
    return (logits[0] if squeeze else logits), cache


def decision_backward(dlogits, cache, params):
    x, hid, rmask, mask = cache
    dhid, dw2, db2 = nn.linear_backward(dlogits, hid, params["head.fc2.w"])
    da = nn.relu_backward(dhid, rmask)
    dx, dw1, db1 = nn.linear_backward(da, x, params["head.fc1.w"])
    if mask is not None:
        dx = dx * mask
    return dx, {"head.fc1.w": dw1, "head.fc1.b": db1, "head.fc2.w": dw2, "head.fc2.b": db2}


def _check_labels(labels, n):
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= n:
        raise LabelRangeError(f"labels must lie in [0, {n}), got {labels.min()}..{labels.max()}")
    return labels


def cross_entropy(logits, label) -> float:
    """-log softmax(logits)[label] for one sample (or the mean over a batch)."""
    logits = np.asarray(logits, dtype=np.float64)
    rows = logits[None] if logits.ndim == 1 else logits
    labels = _check_labels(label, rows.shape[-1])
    lp = log_softmax_rows(rows)
    return float(-lp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits, labels) -> np.ndarray:
    """Gradient of the batch-mean cross-entropy w.r.t. ``(B, C)`` logits."""
    labels = _check_labels(labels, logits.shape[-1])
    g = softmax_rows(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def total_loss(ce: float, align: float, lambda_align: float = DEFAULT_LAMBDA_ALIGN) -> float:
    if lambda_align < 0:
        raise ValueError("lambda_align must be non-negative")
    return ce + lambda_align * align

"""Multimodal fusion stack.

Common-space projection, attention over the stacked modality rows, weighted
integration, MI/JS alignment, dynamic modality prioritisation and the final
concatenation layer. Feature arrays are batched ``(B, d)``; the single-sample
helpers accept 1-d vectors too.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .config import ModelConfig, ParamBuilder
from .tensor import log_softmax_rows, softmax_rows

MODALITIES = ("img", "text", "vec")
MI_EPS = 1e-6
RELEVANCE_DECAY = 0.9
MIN_MODALITY_WEIGHT = 1e-3


class BatchTooSmallError(ValueError):
    pass


class DegeneratePriorityError(ValueError):
    pass


def init_fusion_params(pb: ParamBuilder, cfg: ModelConfig):
    d = cfg.d
    pb.linear("fusion.proj_img", cfg.d_img, d)
    pb.linear("fusion.proj_text", cfg.d_text, d)
    for w in ("wq", "wk", "wv"):
        pb.weight(f"fusion.attn.{w}", d, d)
    pb.const("fusion.coef", [1 / 3, 1 / 3, 1 / 3])
    pb.linear("fusion.align", d, d)
    pb.const("fusion.modality_w", [1.0, 1.0, 1.0])
    pb.linear("fusion.out", 4 * d, 4 * d)
    if cfg.strategy == "stacking":
        pb.linear("fusion.stack", 3 * d, 4 * d)
    for m in MODALITIES:
        pb.linear(f"fusion.probe_{m}", d, cfg.n_classes)


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


# ------------------------------------------------------------------ projection

def project_modalities(x_out, t_out, v_out, params):
    """Map image/text features into the common space; the vector branch passes through."""
    v_img = np.asarray(x_out) @ params["fusion.proj_img.w"] + params["fusion.proj_img.b"]
    v_text = np.asarray(t_out) @ params["fusion.proj_text.w"] + params["fusion.proj_text.b"]
    return v_img, v_text, np.asarray(v_out, dtype=np.float64)


# ------------------------------------------------------------ stacked attention

def stacked_attention_forward(v_img, v_text, v_vec, params, tap=None):
    """Self-attention across the three modality rows, mean-pooled to ``(B, d)``."""
    stack = np.stack([_rows(v_img), _rows(v_text), _rows(v_vec)], axis=1)  # (B, 3, d)
    if tap is not None:
        for w in ("wq", "wk", "wv"):
            tap(f"fusion.attn.{w}", stack, None)
    q = stack @ params["fusion.attn.wq"]
    k = stack @ params["fusion.attn.wk"]
    v = stack @ params["fusion.attn.wv"]
    scale = 1.0 / np.sqrt(stack.shape[-1])
    attn = softmax_rows(q @ np.swapaxes(k, -1, -2) * scale)
    out = (attn @ v).sum(axis=1) / 3.0
    return out, (stack, q, k, v, attn, scale)


def stacked_attention_backward(dout, cache, params):
    stack, q, k, v, attn, scale = cache
    dav = np.repeat(dout[:, None, :], 3, axis=1) / 3.0
    dattn = dav @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dav
    dlog = nn.softmax_backward(dattn, attn) * scale
    dq = dlog @ k
    dk = np.swapaxes(dlog, -1, -2) @ q
    s2 = nn.flat2d(stack)
    g = {
        "fusion.attn.wq": s2.T @ nn.flat2d(dq),
        "fusion.attn.wk": s2.T @ nn.flat2d(dk),
        "fusion.attn.wv": s2.T @ nn.flat2d(dv),
    }
    dstack = (dq @ params["fusion.attn.wq"].T + dk @ params["fusion.attn.wk"].T
              + dv @ params["fusion.attn.wv"].T)
    return (dstack[:, 0], dstack[:, 1], dstack[:, 2]), g


def stacked_attention(v_img, v_text, v_vec, params):
    out, _ = stacked_attention_forward(v_img, v_text, v_vec, params)
    return out[0] if np.ndim(v_img) == 1 else out


def attention_matrix(v_img, v_text, v_vec, params):
    _, cache = stacked_attention_forward(v_img, v_text, v_vec, params)
    return cache[4]


# --------------------------------------------------------- weighted integration

def weighted_integration(v_img, v_text, v_vec, a, b, c):
    return a * np.asarray(v_img) + b * np.asarray(v_text) + c * np.asarray(v_vec)


# ------------------------------------------------------------------ alignment

def _correlations(x, y):
    n = x.shape[0]
    xc = x - x.sum(axis=0) / n
    yc = y - y.sum(axis=0) / n
    sxx = (xc * xc).sum(axis=0)
    syy = (yc * yc).sum(axis=0)
    sxy = (xc * yc).sum(axis=0)
    denom = np.sqrt(sxx * syy)
    ok = denom > 0
    rho = np.where(ok, sxy / np.where(ok, denom, 1.0), 0.0)
    return rho, xc, yc, sxx, syy, denom, ok


def mi_loss(batch_img, batch_text, eps: float = MI_EPS) -> float:
    """Negated Gaussian mutual-information estimate, 0.5 * sum_j ln(1 - rho_j^2 + eps).

    Zero-variance dimensions count as uncorrelated.
    """
    x, y = _rows(batch_img), _rows(batch_text)
    if x.shape[0] < 3:
        raise BatchTooSmallError(f"MI estimator needs at least 3 samples, got {x.shape[0]}")
    rho = _correlations(x, y)[0]
    return float(0.5 * np.log(1.0 - rho ** 2 + eps).sum())


def mi_loss_grad(batch_img, batch_text, eps: float = MI_EPS):
    x, y = _rows(batch_img), _rows(batch_text)
    if x.shape[0] < 3:
        raise BatchTooSmallError(f"MI estimator needs at least 3 samples, got {x.shape[0]}")
    rho, xc, yc, sxx, syy, denom, ok = _correlations(x, y)
    dl_drho = -rho / (1.0 - rho ** 2 + eps)
    safe = np.where(ok, denom, 1.0)
    dx = dl_drho * (yc / safe - rho * xc / np.where(ok, sxx, 1.0))
    dy = dl_drho * (xc / safe - rho * yc / np.where(ok, syy, 1.0))
    dx = np.where(ok, dx, 0.0)
    dy = np.where(ok, dy, 0.0)
    return dx, dy


def _js_parts(a, b):
    lp = log_softmax_rows(a)
    lq = log_softmax_rows(b)
    p, q = np.exp(lp), np.exp(lq)
    lm = np.logaddexp(lp, lq) - np.log(2.0)
    # p*(lp - lm) -> 0 where p underflows to 0
    kp = np.where(p > 0, p * (lp - lm), 0.0).sum(axis=-1)
    kq = np.where(q > 0, q * (lq - lm), 0.0).sum(axis=-1)
    return 0.5 * (kp + kq), p, q, lp, lq, lm


def js_divergence_rows(a, b) -> np.ndarray:
    """Per-row JS divergence between softmax(a) and softmax(b), natural log."""
    return _js_parts(_rows(a), _rows(b))[0]


def js_loss(batch_img, batch_text) -> float:
    return float(js_divergence_rows(batch_img, batch_text).mean())


def js_loss_grad(batch_img, batch_text):
    a, b = _rows(batch_img), _rows(batch_text)
    _, p, q, lp, lq, lm = _js_parts(a, b)
    n = a.shape[0]
    gp = 0.5 * (lp - lm) / n
    gq = 0.5 * (lq - lm) / n
    return nn.softmax_backward(gp, p), nn.softmax_backward(gq, q)


def align_forward(v_img, v_text, params, lambda_mi=1.0, lambda_js=1.0, tap=None):
    """Shared projection g, midpoint features and the combined alignment loss.

    Returns ``(v_aligned, loss, cache)``.
    """
    if tap is not None:
        tap("fusion.align.w", np.concatenate([_rows(v_img), _rows(v_text)]), None)
    gi = _rows(v_img) @ params["fusion.align.w"] + params["fusion.align.b"]
    gt = _rows(v_text) @ params["fusion.align.w"] + params["fusion.align.b"]
    v_aligned = 0.5 * (gi + gt)
    loss = 0.0
    if lambda_mi:
        loss += lambda_mi * mi_loss(gi, gt)
    if lambda_js:
        loss += lambda_js * js_loss(gi, gt)
    return v_aligned, loss, (_rows(v_img), _rows(v_text), gi, gt, lambda_mi, lambda_js)


def align_backward(dv_aligned, dloss, cache, params):
    vi, vt, gi, gt, lmi, ljs = cache
    dgi = 0.5 * dv_aligned
    dgt = 0.5 * dv_aligned
    if dloss and lmi:
        a, b = mi_loss_grad(gi, gt)
        dgi = dgi + dloss * lmi * a
        dgt = dgt + dloss * lmi * b
    if dloss and ljs:
        a, b = js_loss_grad(gi, gt)
        dgi = dgi + dloss * ljs * a
        dgt = dgt + dloss * ljs * b
    w = params["fusion.align.w"]
    g = {"fusion.align.w": vi.T @ dgi + vt.T @ dgt,
         "fusion.align.b": dgi.sum(axis=0) + dgt.sum(axis=0)}
    return dgi @ w.T, dgt @ w.T, g


def align_modalities(v_img, v_text, params, lambda_mi=1.0, lambda_js=1.0):
    """Batch-level alignment: ``(V_aligned (B, d), L_align)``."""
    va, loss, _ = align_forward(v_img, v_text, params, lambda_mi, lambda_js)
    return va, loss


# ---------------------------------------------------------- prioritisation

@dataclass
class PriorityState:
    relevance: np.ndarray = field(default_factory=lambda: np.ones(3))
    decay: float = RELEVANCE_DECAY

    def copy(self):
        return PriorityState(self.relevance.copy(), self.decay)


def priority_scores(w, relevance) -> np.ndarray:
    raw = np.asarray(w, dtype=np.float64) * np.asarray(relevance, dtype=np.float64)
    total = raw.sum()
    if not total > 0:
        raise DegeneratePriorityError(f"priority scores sum to {total}")
    return raw / total


def update_priorities(state: PriorityState, accuracies, w):
    """EMA-update relevance from probe accuracies, then normalised scores.

    Returns ``(P, new_state)``; the input state is not modified.
    """
    acc = np.asarray(accuracies, dtype=np.float64)
    if np.any(acc < 0) or np.any(acc > 1):
        raise ValueError(f"accuracies must lie in [0, 1], got {acc}")
    rel = state.decay * state.relevance + (1.0 - state.decay) * acc
    rel = np.clip(rel, 0.0, 1.0)
    new = PriorityState(rel, state.decay)
    return priority_scores(w, rel), new


def prioritized_fusion(v_img, v_text, v_vec, p):
    return weighted_integration(v_img, v_text, v_vec, p[0], p[1], p[2])


def priority_grad_w(dp, w, relevance):
    """Chain dL/dP through the normalised scores back to the modality weights."""
    raw = np.asarray(w) * np.asarray(relevance)
    s = raw.sum()
    pvec = raw / s
    draw = (dp - (dp * pvec).sum()) / s
    return draw * relevance


# ------------------------------------------------------------- final fusion

def final_fusion_forward(v_att, v_custom, v_aligned, v_prior, params, tap=None):
    cat = np.concatenate([_rows(v_att), _rows(v_custom), _rows(v_aligned), _rows(v_prior)], axis=-1)
    if tap is not None:
        tap("fusion.out.w", cat, None)
    a = cat @ params["fusion.out.w"] + params["fusion.out.b"]
    out, mask = nn.relu_forward(a)
    return out, (cat, mask)


def final_fusion_backward(dout, cache, params):
    cat, mask = cache
    da = nn.relu_backward(dout, mask)
    dcat, dw, db = nn.linear_backward(da, cat, params["fusion.out.w"])
    d = cat.shape[-1] // 4
    parts = tuple(dcat[:, i * d:(i + 1) * d] for i in range(4))
    return parts, {"fusion.out.w": dw, "fusion.out.b": db}


def final_fusion(v_att, v_custom, v_aligned, v_prior, params):
    out, _ = final_fusion_forward(v_att, v_custom, v_aligned, v_prior, params)
    return out[0] if np.ndim(v_att) == 1 else out

"""End-to-end multimodal classifier: encoders -> fusion strategy -> decision head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoders as enc
from . import fusion as fu
from . import head as hd
from . import nn
from .config import ModelConfig, ParamBuilder, add_prefixed
from .tensor import log_softmax_rows

PROBE_PREFIX = "fusion.probe_"
STATE_RELEVANCE = "state.relevance"


@dataclass
class Model:
    cfg: ModelConfig
    params: dict
    priority: fu.PriorityState = field(default_factory=fu.PriorityState)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        pb = ParamBuilder(seed)
        enc.init_image_params(pb, cfg)
        enc.init_text_params(pb, cfg)
        enc.init_vector_params(pb, cfg)
        fu.init_fusion_params(pb, cfg)
        hd.init_head_params(pb, cfg)
        return cls(cfg, pb.params)

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.priority.copy())

    def uses(self, branch: str) -> bool:
        s = self.cfg.strategy
        return s == "complete" or s == branch + "_only"

    @property
    def trainable(self) -> list[str]:
        return sorted(self.params)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def encode(model: Model, images, tokens, vectors, tap=None):
    """Run the three encoders. Returns ``((x_out, t_out, v_out), caches)``."""
    cfg, p = model.cfg, model.params
    x_out, ic = enc.image_forward(images, p, cfg, tap=tap)
    t_out, tc = enc.text_forward(tokens, p, cfg, tap=tap)
    v_out, vc = enc.vector_forward(vectors, p, cfg, tap=tap)
    return (x_out, t_out, v_out), (ic, tc, vc)


def fuse_and_decide(model: Model, x_out, t_out, v_out, *, dropout_mask=None, lambda_mi=1.0,
                    lambda_js=1.0, with_align_loss=True, tap=None):
    """Fusion strategy plus decision head on encoder outputs.

    Returns ``(logits, align_loss, cache)``.
    """
    cfg, p = model.cfg, model.params
    if tap is not None:
        tap("fusion.proj_img.w", x_out, None)
        tap("fusion.proj_text.w", t_out, None)
    v_img, v_text, v_vec = fu.project_modalities(x_out, t_out, v_out, p)
    b = v_img.shape[0]
    zeros = np.zeros((b, cfg.d))
    align_loss = 0.0
    fc = {}

    if cfg.strategy == "stacking":
        cat = np.concatenate([v_img, v_text, v_vec], axis=1)
        if tap is not None:
            tap("fusion.stack.w", cat, None)
        fused, rmask = nn.relu_forward(cat @ p["fusion.stack.w"] + p["fusion.stack.b"])
        fc["stack"] = (cat, rmask)
    else:
        v_att = zeros
        if model.uses("attention"):
            v_att, fc["att"] = fu.stacked_attention_forward(v_img, v_text, v_vec, p, tap=tap)
        v_custom = zeros
        if model.uses("weighted"):
            a, bb, c = p["fusion.coef"]
            v_custom = fu.weighted_integration(v_img, v_text, v_vec, a, bb, c)
        v_al = zeros
        if model.uses("alignment"):
            lmi = lambda_mi if with_align_loss else 0.0
            ljs = lambda_js if with_align_loss else 0.0
            v_al, align_loss, fc["align"] = fu.align_forward(v_img, v_text, p, lmi, ljs, tap=tap)
        v_pr = zeros
        if cfg.strategy == "complete":
            prio = fu.priority_scores(p["fusion.modality_w"], model.priority.relevance)
            v_pr = fu.prioritized_fusion(v_img, v_text, v_vec, prio)
            fc["prio"] = prio
        fused, fc["final"] = fu.final_fusion_forward(v_att, v_custom, v_al, v_pr, p, tap=tap)

    logits, hc = hd.decision_forward(fused, p, dropout_mask, tap=tap)
    return logits, align_loss, (x_out, t_out, (v_img, v_text, v_vec), fc, hc)


def forward(model: Model, images, tokens, vectors, *, dropout_mask=None, lambda_mi=1.0,
            lambda_js=1.0, with_align_loss=True, tap=None):
    """Batched forward pass. Returns ``(logits, align_loss, cache)``."""
    (x_out, t_out, v_out), (ic, tc, vc) = encode(model, images, tokens, vectors, tap=tap)
    logits, align_loss, (_, _, feats, fc, hc) = fuse_and_decide(
        model, x_out, t_out, v_out, dropout_mask=dropout_mask, lambda_mi=lambda_mi,
        lambda_js=lambda_js, with_align_loss=with_align_loss, tap=tap)
    cache = (ic, tc, vc, x_out, t_out, feats, fc, hc)
    return logits, align_loss, cache


def backward(model: Model, cache, dlogits, dalign: float) -> dict:
    cfg, p = model.cfg, model.params
    ic, tc, vc, x_out, t_out, (v_img, v_text, v_vec), fc, hc = cache
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    def acc(g):
        add_prefixed(grads, "", g)

    dfused, g = hd.decision_backward(dlogits, hc, p)
    acc(g)
    d_img = np.zeros_like(v_img)
    d_text = np.zeros_like(v_text)
    d_vec = np.zeros_like(v_vec)

    if cfg.strategy == "stacking":
        cat, rmask = fc["stack"]
        dcat, dw, db = nn.linear_backward(nn.relu_backward(dfused, rmask), cat, p["fusion.stack.w"])
        acc({"fusion.stack.w": dw, "fusion.stack.b": db})
        d = cfg.d
        d_img += dcat[:, :d]
        d_text += dcat[:, d:2 * d]
        d_vec += dcat[:, 2 * d:]
    else:
        (d_att, d_custom, d_al, d_pr), g = fu.final_fusion_backward(dfused, fc["final"], p)
        acc(g)
        if "att" in fc:
            (a, b, c), g = fu.stacked_attention_backward(d_att, fc["att"], p)
            acc(g)
            d_img += a
            d_text += b
            d_vec += c
        if model.uses("weighted"):
            a, b, c = p["fusion.coef"]
            d_img += a * d_custom
            d_text += b * d_custom
            d_vec += c * d_custom
            acc({"fusion.coef": np.array([(d_custom * v_img).sum(), (d_custom * v_text).sum(),
                                          (d_custom * v_vec).sum()])})
        if "align" in fc:
            a, b, g = fu.align_backward(d_al, dalign, fc["align"], p)
            acc(g)
            d_img += a
            d_text += b
        if "prio" in fc:
            prio = fc["prio"]
            d_img += prio[0] * d_pr
            d_text += prio[1] * d_pr
            d_vec += prio[2] * d_pr
            dp = np.array([(d_pr * v_img).sum(), (d_pr * v_text).sum(), (d_pr * v_vec).sum()])
            acc({"fusion.modality_w": fu.priority_grad_w(dp, p["fusion.modality_w"],
                                                         model.priority.relevance)})

    dx_out, dw, db = nn.linear_backward(d_img, x_out, p["fusion.proj_img.w"])
    acc({"fusion.proj_img.w": dw, "fusion.proj_img.b": db})
    dt_out, dw, db = nn.linear_backward(d_text, t_out, p["fusion.proj_text.w"])
    acc({"fusion.proj_text.w": dw, "fusion.proj_text.b": db})
    acc(enc.image_backward(dx_out, ic, p, cfg))
    acc(enc.text_backward(dt_out, tc, p, cfg))
    acc(enc.vector_backward(d_vec, vc, p))
    return grads


def loss_and_grads(model: Model, images, tokens, vectors, labels, *, dropout_mask=None,
                   lambda_mi=1.0, lambda_js=1.0, lambda_align=hd.DEFAULT_LAMBDA_ALIGN):
    """Total loss (mean CE + lambda_align * L_align) and its gradient for every parameter."""
    logits, align, cache = forward(model, images, tokens, vectors, dropout_mask=dropout_mask,
                                   lambda_mi=lambda_mi, lambda_js=lambda_js)
    ce = hd.cross_entropy(logits, labels)
    loss = hd.total_loss(ce, align, lambda_align)
    dlogits = hd.cross_entropy_grad(logits, labels)
    grads = backward(model, cache, dlogits, lambda_align)
    info = {"ce": ce, "align": align, "logits": logits, "features": cache[5]}
    return loss, grads, info


def total_loss_value(model: Model, images, tokens, vectors, labels, *, dropout_mask=None,
                     lambda_mi=1.0, lambda_js=1.0, lambda_align=hd.DEFAULT_LAMBDA_ALIGN) -> float:
    logits, align, _ = forward(model, images, tokens, vectors, dropout_mask=dropout_mask,
                               lambda_mi=lambda_mi, lambda_js=lambda_js)
    return hd.total_loss(hd.cross_entropy(logits, labels), align, lambda_align)


def probe_step(model: Model, features, labels):
    """Probe losses on gradient-stopped modality features.

    Returns per-modality batch accuracies and gradients for the probe weights only.
    """
    labels = np.asarray(labels)
    accs, grads = [], {}
    for m, v in zip(fu.MODALITIES, features):
        w = model.params[f"{PROBE_PREFIX}{m}.w"]
        b = model.params[f"{PROBE_PREFIX}{m}.b"]
        logits = v @ w + b
        accs.append(float((logits.argmax(axis=1) == labels).mean()))
        dl = hd.cross_entropy_grad(logits, labels)
        grads[f"{PROBE_PREFIX}{m}.w"] = v.T @ dl
        grads[f"{PROBE_PREFIX}{m}.b"] = dl.sum(axis=0)
    return np.array(accs), grads


def predict_logits(model: Model, images, tokens, vectors, chunk: int = 64) -> np.ndarray:
    """Eval-mode logits (no dropout, frozen priorities)."""
    out = []
    for i in range(0, len(images), chunk):
        logits, _, _ = forward(model, images[i:i + chunk], tokens[i:i + chunk],
                               vectors[i:i + chunk], with_align_loss=False)
        out.append(logits)
    return np.concatenate(out)


def predict_proba(model: Model, images, tokens, vectors) -> np.ndarray:
    return np.exp(log_softmax_rows(predict_logits(model, images, tokens, vectors)))

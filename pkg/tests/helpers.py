"""Shared test oracles: staged finite differences over the whole model."""
from __future__ import annotations

import numpy as np

from mmscene import encoders as enc
from mmscene import head as hd
from mmscene.config import tiny_config
from mmscene.model import Model, encode, fuse_and_decide, loss_and_grads
from mmscene.tensor import RngStream, finite_diff_grad


def micro_batch(cfg, seed, b=4, dropout=0.1):
    """Random images, tokens (one sequence half padded), vectors, labels and a dropout mask."""
    r = RngStream(seed, 7)
    images = r.uniform(-1, 1, (b, cfg.channels, cfg.image_size, cfg.image_size))
    tokens = r.integers(0, cfg.vocab - 1, (b, cfg.max_len))
    tokens[0, cfg.max_len // 2:] = cfg.pad_id
    vectors = np.stack([r.dirichlet(np.ones(cfg.vec_in)) for _ in range(b)])
    labels = r.integers(0, cfg.n_classes, b)
    mask = (r.random((b, 4 * cfg.d)) >= dropout) / (1 - dropout) if dropout else None
    return images, tokens, vectors, labels, mask


def grad_model(strategy="complete", seed=3):
    m = Model.init(tiny_config(strategy=strategy), seed)
    # move off the symmetric init so priority and coefficient paths are exercised
    m.params["fusion.modality_w"] = np.array([1.2, 0.8, 1.0])
    m.params["fusion.coef"] = np.array([0.5, 0.2, 0.3])
    m.priority.relevance = np.array([0.9, 0.6, 0.8])
    return m


def staged_numeric_grads(model, images, tokens, vectors, labels, mask, lambda_mi, lambda_js,
                         lambda_align, h=1e-5):
    """Central differences of the total loss for every parameter.

    Encoder outputs that a parameter cannot influence are computed once and
    reused, which is exact and keeps the sweep fast.
    """
    cfg, p = model.cfg, model.params
    (x0, t0, v0), _ = encode(model, images, tokens, vectors)

    def loss_from(x, t, v):
        logits, align, _ = fuse_and_decide(model, x, t, v, dropout_mask=mask, lambda_mi=lambda_mi,
                                           lambda_js=lambda_js)
        return hd.total_loss(hd.cross_entropy(logits, labels), align, lambda_align)

    stages = {
        "image.": lambda: loss_from(enc.image_forward(images, p, cfg)[0], t0, v0),
        "text.": lambda: loss_from(x0, enc.text_forward(tokens, p, cfg)[0], v0),
        "vector.": lambda: loss_from(x0, t0, enc.vector_forward(vectors, p, cfg)[0]),
    }
    out = {}
    for name in sorted(p):
        stage = next((fn for pre, fn in stages.items() if name.startswith(pre)),
                     lambda: loss_from(x0, t0, v0))

        def f(x, name=name, stage=stage):
            old = p[name]
            p[name] = x
            try:
                return stage()
            finally:
                p[name] = old

        out[name] = finite_diff_grad(f, p[name], h)
    return out


def compare_grads(analytic, numeric, rtol=1e-4):
    """Names whose gradients disagree, with the worst scaled error for each."""
    bad = {}
    for name, n in numeric.items():
        a = analytic[name]
        err = np.abs(a - n) / np.maximum(1.0, np.abs(a))
        if err.max() > rtol:
            bad[name] = float(err.max())
    return bad


def check_model_gradients(model, seed, b=4, lambda_mi=1.0, lambda_js=1.0, lambda_align=0.1,
                          dropout=0.1):
    images, tokens, vectors, labels, mask = micro_batch(model.cfg, seed, b, dropout)
    if b < 3:
        lambda_mi = lambda_js = 0.0
    _, analytic, _ = loss_and_grads(model, images, tokens, vectors, labels, dropout_mask=mask,
                                    lambda_mi=lambda_mi, lambda_js=lambda_js,
                                    lambda_align=lambda_align)
    numeric = staged_numeric_grads(model, images, tokens, vectors, labels, mask, lambda_mi,
                                   lambda_js, lambda_align)
    missing = set(model.params) - set(analytic)
    assert not missing, f"no analytic gradient for {sorted(missing)}"
    return compare_grads(analytic, numeric)

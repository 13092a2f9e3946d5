"""SGD-with-momentum training loop, evaluation metrics and the fusion ablation harness."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import dataio
from .config import STRATEGIES, ConfigError, ModelConfig
from .fusion import MIN_MODALITY_WEIGHT, update_priorities
from .head import cross_entropy_grad, dropout_mask
from .model import Model, loss_and_grads, predict_logits, probe_step
from .tensor import RngStream

DROPOUT_STREAM = 4 << 40


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    dropout: float = 0.1
    d: int = 100
    lambda_mi: float = 0.01
    lambda_js: float = 1.0
    lambda_align: float = 0.1
    fusion_strategy: str = "complete"
    seed: int = 42

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if min(self.lambda_mi, self.lambda_js, self.lambda_align) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.fusion_strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion_strategy {self.fusion_strategy!r}")

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        base = base or ModelConfig()
        return replace(base, d=self.d, strategy=self.fusion_strategy)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


# ----------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict):
        return cls({k: np.zeros_like(v) for k, v in params.items()})


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState, lr: float, momentum: float):
    """Classic momentum: ``v <- mu*v + g``; ``w <- w - lr*v``. Updates in place."""
    for k, g in grads.items():
        w = params[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {w.shape}")
        v = state.velocity.get(k)
        if v is None:
            v = np.zeros_like(w)
        v = momentum * v + g
        state.velocity[k] = v
        params[k] = w - lr * v
    return params, state


# ------------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray

    @property
    def macro(self) -> dict:
        return {"precision": float(self.precision.mean()), "recall": float(self.recall.mean()),
                "f1": float(self.f1.mean())}

    @property
    def weighted(self) -> dict:
        w = self.support / self.support.sum()
        return {"precision": float(w @ self.precision), "recall": float(w @ self.recall),
                "f1": float(w @ self.f1)}

    def records(self, prefix="") -> list[str]:
        lines = [f"{prefix}accuracy={self.accuracy!r}"]
        for kind, vals in (("macro", self.macro), ("weighted", self.weighted)):
            for k, v in vals.items():
                lines.append(f"{prefix}{kind}_{k}={v!r}")
        for c in range(len(self.support)):
            lines.append(f"{prefix}class{c}_precision={float(self.precision[c])!r}")
            lines.append(f"{prefix}class{c}_recall={float(self.recall[c])!r}")
            lines.append(f"{prefix}class{c}_f1={float(self.f1[c])!r}")
        return lines

    def table(self, class_names=None) -> str:
        names = class_names or [f"class{c}" for c in range(len(self.support))]
        w = max(len(n) for n in list(names) + ["weighted avg"])
        out = [f"{'':<{w}}  precision  recall  f1-score  support"]
        for c, n in enumerate(names):
            out.append(f"{n:<{w}}  {self.precision[c]:9.4f}  {self.recall[c]:6.4f}  "
                       f"{self.f1[c]:8.4f}  {int(self.support[c]):7d}")
        total = int(self.support.sum())
        for label, m in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            out.append(f"{label:<{w}}  {m['precision']:9.4f}  {m['recall']:6.4f}  "
                       f"{m['f1']:8.4f}  {total:7d}")
        out.append(f"{'accuracy':<{w}}  {self.accuracy:9.4f}")
        return "\n".join(out)


def metrics_from_predictions(pred, labels, n_classes: int = 5) -> MetricsReport:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty split")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros(n_classes), where=pred_pos > 0)
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    return MetricsReport(float(tp.sum() / cm.sum()), precision, recall, f1, support, cm)


def evaluate(model: Model, ds: dataio.Dataset, ids) -> MetricsReport:
    """Eval-mode metrics on ``ids``; the model and its priority state are untouched."""
    images, tokens, vectors, labels = dataio.preprocess_arrays(ds, ids)
    pred = predict_logits(model, images, tokens, vectors).argmax(axis=1)
    return metrics_from_predictions(pred, labels, model.cfg.n_classes)


# ------------------------------------------------------------------ training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float

    def line(self) -> str:
        return f"epoch={self.epoch} train_loss={self.train_loss!r} val_accuracy={self.val_accuracy!r}"


@dataclass
class TrainResult:
    best: Model
    best_epoch: int
    best_val_accuracy: float
    history: list
    final: Model


def _layer_norms(params):
    return {k: float(np.linalg.norm(v)) for k, v in params.items()}


def train(ds: dataio.Dataset, config: TrainConfig = TrainConfig(), model: Model | None = None,
          base: ModelConfig | None = None, log=None) -> TrainResult:
    """Train on the dataset's train split, keep the parameters with the best val accuracy."""
    if model is None:
        model = Model.init(config.model_config(base), config.seed)
    else:
        model = model.copy()
    train_ids = ds.split_ids("train")
    val_ids = ds.split_ids("val")
    images, tokens, vectors, labels = dataio.preprocess_arrays(ds)
    state = OptimizerState.zeros_like(model.params)
    drop_rng = RngStream(config.seed, DROPOUT_STREAM)
    fused_width = 4 * model.cfg.d

    history = []
    best, best_epoch, best_acc = model.copy(), 0, -1.0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for bi, batch in enumerate(dataio.make_batches(train_ids, config.batch_size, config.seed, epoch)):
            mask = dropout_mask(drop_rng, (len(batch), fused_width), config.dropout) \
                if config.dropout > 0 else None
            lam_align = config.lambda_align if len(batch) >= 3 else 0.0
            loss, grads, info = loss_and_grads(
                model, images[batch], tokens[batch], vectors[batch], labels[batch],
                dropout_mask=mask, lambda_mi=config.lambda_mi if lam_align else 0.0,
                lambda_js=config.lambda_js if lam_align else 0.0, lambda_align=lam_align)
            if not math.isfinite(loss):
                norms = _layer_norms(model.params)
                worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}; "
                                       f"largest parameter norms: {worst}")
            accs, pgrads = probe_step(model, info["features"], labels[batch])
            grads.update(pgrads)
            sgd_momentum_step(model.params, grads, state, config.lr, config.momentum)
            model.params["fusion.modality_w"] = np.maximum(model.params["fusion.modality_w"],
                                                           MIN_MODALITY_WEIGHT)
            _, model.priority = update_priorities(model.priority, accs, model.params["fusion.modality_w"])
            losses.append(loss)
        val_acc = evaluate(model, ds, val_ids).accuracy
        rec = EpochRecord(epoch, float(np.mean(losses)), val_acc)
        history.append(rec)
        if log is not None:
            log(rec.line())
        if val_acc > best_acc:
            best, best_epoch, best_acc = model.copy(), epoch, val_acc
    return TrainResult(best, best_epoch, best_acc, history, model)


# ------------------------------------------------------------------ ablation

ABLATION_LABELS = {
    "stacking": "Stacking (Image + Text + Vector)",
    "attention_only": "Attention-based Fusion",
    "weighted_only": "Weighted Integration (No Attention)",
    "alignment_only": "Enhanced Modal Alignment",
    "complete": "Complete fusion",
}


@dataclass
class AblationRow:
    strategy: str
    label: str
    val: MetricsReport
    test: MetricsReport
    best_epoch: int


def run_ablation(ds: dataio.Dataset, base_config: TrainConfig = TrainConfig(),
                 base: ModelConfig | None = None, strategies=None, log=None) -> list[AblationRow]:
    """Train one model per fusion strategy under a shared seed."""
    rows = []
    for s in strategies or ("stacking", "attention_only", "weighted_only", "alignment_only", "complete"):
        cfg = replace(base_config, fusion_strategy=s)
        res = train(ds, cfg, base=base)
        rows.append(AblationRow(s, ABLATION_LABELS[s], evaluate(res.best, ds, ds.split_ids("val")),
                                evaluate(res.best, ds, ds.split_ids("test")), res.best_epoch))
        if log is not None:
            log(f"{s}: test accuracy {rows[-1].test.accuracy:.4f}")
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    w = max(len(r.label) for r in rows)
    out = [f"{'Fusion strategy':<{w}}  Accuracy  Precision  Recall  F1-score"]
    for r in rows:
        m = r.test.macro
        out.append(f"{r.label:<{w}}  {100 * r.test.accuracy:8.2f}  {100 * m['precision']:9.2f}  "
                   f"{100 * m['recall']:6.2f}  {100 * m['f1']:8.2f}")
    return "\n".join(out)


# ------------------------------------------------------------ vector probe

@dataclass
class LinearProbe:
    w: np.ndarray
    b: np.ndarray

    def predict(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) @ self.w + self.b).argmax(axis=1)


def train_linear_probe(x, labels, n_classes: int = 5, lr: float = 1.0, steps: int = 500,
                       momentum: float = 0.9) -> LinearProbe:
    """Softmax regression by full-batch momentum SGD from zero weights (deterministic)."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    params = {"w": np.zeros((x.shape[1], n_classes)), "b": np.zeros(n_classes)}
    state = OptimizerState.zeros_like(params)
    for _ in range(steps):
        logits = x @ params["w"] + params["b"]
        g = cross_entropy_grad(logits, labels)
        sgd_momentum_step(params, {"w": x.T @ g, "b": g.sum(axis=0)}, state, lr, momentum)
    return LinearProbe(params["w"], params["b"])


def vector_baseline(ds: dataio.Dataset, split: str = "test") -> dict:
    """Realized argmax accuracy of the classification vectors next to a linear probe on them."""
    _, _, x_tr, y_tr = dataio.preprocess_arrays(ds, ds.split_ids("train"))
    _, _, x_ev, y_ev = dataio.preprocess_arrays(ds, ds.split_ids(split))
    probe = train_linear_probe(x_tr, y_tr)
    return {
        "argmax_accuracy": float((x_ev.argmax(axis=1) == y_ev).mean()),
        "probe_accuracy": float((probe.predict(x_ev) == y_ev).mean()),
        "overall_argmax_accuracy": float(ds.manifest["mllm_argmax_accuracy"]),
    }

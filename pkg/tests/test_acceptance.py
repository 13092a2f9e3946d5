"""One test per acceptance criterion.

Each test files its verdict in ``conftest.ACCEPTANCE`` before asserting, and the
terminal summary prints one ``criterion k: PASS/FAIL`` line per entry.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE
from helpers import check_model_gradients, grad_model
from mmscene import cli, dataio
from mmscene import fusion as fu
from mmscene import quantizer as qz
from mmscene.bundle import bundle_from_model, to_bytes
from mmscene.config import ModelConfig
from mmscene.model import Model
from mmscene.trainer import TrainConfig, ablation_table, evaluate, run_ablation, vector_baseline


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    assert ok, detail


def calibrated(model, ds, n=128, seed=42):
    ids = dataio.sample_calibration(ds.split_ids("train"), n, seed)
    return qz.collect_calibration_stats(model, *dataio.preprocess_arrays(ds, ids)[:3])


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    model = grad_model("complete")
    cfg = model.cfg
    assert (cfg.d, cfg.d_img, cfg.d_text, cfg.max_len, cfg.n_patches) == (8, 8, 8, 4, 4)
    bad = {}
    for seed in range(5):
        bad.update({f"seed{seed}:{k}": v for k, v in check_model_gradients(model, seed).items()})
    dt = time.perf_counter() - t0
    n = len(model.params)
    record(1, not bad and dt < 30,
           f"{n} parameter tensors x 5 micro-batches, mismatches={sorted(bad) or 'none'}, {dt:.1f}s")


def test_criterion_2_fusion_analytics():
    r = np.random.default_rng(0)
    x, z = r.normal(size=(2, 512))
    x = (x - x.mean()) / x.std()
    z -= z.mean()
    z -= (z @ x) / (x @ x) * x
    z /= z.std()
    y = 0.6 * x + 0.8 * z
    mi = fu.mi_loss(x[:, None], y[:, None])

    js_max, js_min = 0.0, math.inf
    for _ in range(1000):
        a, b = r.normal(scale=r.uniform(0.1, 20), size=(2, 1, 5))
        v = fu.js_loss(a, b)
        js_max, js_min = max(js_max, v), min(js_min, v)
    disjoint = fu.js_loss(np.array([[1000.0, -1000.0]]), np.array([[-1000.0, 1000.0]]))

    pb_model = Model.init(ModelConfig(), 1)
    worst_row = 0.0
    for _ in range(200):
        a, b, c = r.normal(scale=5, size=(3, 100))
        attn = fu.attention_matrix(a, b, c, pb_model.params)
        worst_row = max(worst_row, float(np.abs(attn.sum(axis=-1) - 1).max()))

    ok = (abs(mi - (-0.22314)) <= 1e-3 and js_min >= 0 and js_max <= math.log(2) + 1e-15
          and abs(disjoint - math.log(2)) <= 1e-6 and worst_row <= 1e-10)
    record(2, ok, f"L_MI(rho=0.6)={mi:.5f}, L_JS range [{js_min:.3g}, {js_max:.6f}], "
                  f"disjoint={disjoint:.8f}, worst attention row error {worst_row:.1e}")


def test_criterion_3_quantization_correctness():
    r = np.random.default_rng(3)
    worst, fixed, sized = -math.inf, True, True
    for _ in range(1000):
        d_in, d_out = r.integers(1, 65, 2)
        acts = np.abs(r.normal(scale=r.uniform(0.1, 10), size=(32, d_in)))
        s, _ = qz.channel_scales(acts, 0.99, 4)
        w = r.normal(scale=r.uniform(0.01, 2), size=(d_in, d_out))
        layer = qz.quantize_weights(w, s, 4)
        back = qz.dequantize(layer)
        in_range = np.abs(w / s[:, None]) <= 7
        slack = (np.abs(w - back) - (s[:, None] / 2 + 1e-12))[in_range]
        if slack.size:
            worst = max(worst, float(slack.max()))
        fixed &= np.array_equal(qz.quantize_weights(back, s, 4).codes, layer.codes)
        sized &= layer.payload_bytes() == math.ceil(d_in * d_out / 2) + 4 * d_in
    record(3, worst <= 0 and fixed and sized,
           f"1000 layers up to 64x64: max excess over s/2 = {worst:.2e}, "
           f"fixed point {'exact' if fixed else 'BROKEN'}, payload formula {'exact' if sized else 'OFF'}")


def test_criterion_4_size_arithmetic(dataset):
    t0 = time.perf_counter()
    model = Model.init(ModelConfig(), 42)
    q = qz.apply_awq(model, calibrated(model, dataset), qz.QuantPolicy())
    sizes = qz.payload_sizes(model, q.layers)
    fp_bundle = len(to_bytes(bundle_from_model(model)))
    q_bundle = len(to_bytes(bundle_from_model(model, q.layers, {"quant.bits": "4"})))
    dt = time.perf_counter() - t0
    code_ratio = sizes["code_ratio"]
    ok = (code_ratio == 8.0 and qz.int4_code_mb(550) == 68.75
          and sizes["ratio"] > 4.0 and dt < 10)
    record(4, ok, f"selected fp32/int4-code ratio {code_ratio!r}, 550 MB -> "
                  f"{qz.int4_code_mb(550)} MB, whole payload ratio {sizes['ratio']:.4f} "
                  f"(file {fp_bundle / q_bundle:.4f}), {dt:.1f}s")


@pytest.mark.slow
def test_criterion_5_end_to_end(dataset, timed_training):
    res, train_seconds = timed_training
    t0 = time.perf_counter()
    fp = res.best
    q = qz.apply_awq(fp, calibrated(fp, dataset), qz.QuantPolicy(bits=4, alpha=0.99))
    test_ids = dataset.split_ids("test")
    images, tokens, vectors, labels = dataio.preprocess_arrays(dataset, test_ids)
    rep = qz.quantization_report(fp, q.model, images, tokens, vectors, labels, q.layers)
    val = evaluate(fp, dataset, dataset.split_ids("val")).accuracy
    drop = 100 * (rep["fp_accuracy"] - rep["q_accuracy"])
    dt = train_seconds + time.perf_counter() - t0
    ok = val >= 0.95 and drop <= 2.0 and rep["agreement"] >= 0.95 and dt < 300
    record(5, ok, f"val {val:.4f} (epoch {res.best_epoch}), test fp {rep['fp_accuracy']:.4f} -> "
                  f"int4 {rep['q_accuracy']:.4f} (drop {drop:.1f} pts), agreement "
                  f"{rep['agreement']:.4f}, {len(q.layers)} layers quantized, {dt:.0f}s")


@pytest.mark.slow
def test_criterion_6_determinism(tmp_path):
    cfg = replace(TrainConfig(), epochs=2)
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        (d / "train.cfg").write_text(cli.format_train_config(cfg))
        codes = [
            cli.main(["gen-data", "--out", str(d / "data"), "--seed", "42"]),
            cli.main(["train", "--data", str(d / "data"), "--config", str(d / "train.cfg"),
                      "--out", str(d / "fp.mmqb")]),
            cli.main(["quantize", "--bundle", str(d / "fp.mmqb"), "--data", str(d / "data"),
                      "--out", str(d / "q.mmqb")]),
            cli.main(["eval", "--bundle", str(d / "q.mmqb"), "--data", str(d / "data"),
                      "--reference", str(d / "fp.mmqb"), "--records", str(d / "eval.txt")]),
        ]
        assert codes == [0, 0, 0, 0]
        outputs.append({p.relative_to(d).as_posix(): p.read_bytes()
                        for p in sorted(d.rglob("*")) if p.is_file()})
    a, b = outputs
    differing = sorted(k for k in a if a[k] != b.get(k))
    record(6, a.keys() == b.keys() and not differing,
           f"{len(a)} output files from gen-data/train/quantize/eval compared, "
           f"differing: {differing or 'none'}")


@pytest.mark.slow
def test_criterion_7_ablation(dataset, capsys):
    rows = run_ablation(dataset, TrainConfig())
    table = ablation_table(rows)
    with capsys.disabled():
        print("\n" + table)
    lines = table.splitlines()
    record(7, len(rows) == 5 and len(lines) == 6,
           "5 strategies trained at the default config, test accuracy: "
           + ", ".join(f"{r.strategy} {r.test.accuracy:.2f}" for r in rows))


def test_criterion_8_vector_baseline(dataset):
    out = vector_baseline(dataset, "test")
    realized = out["overall_argmax_accuracy"]
    gap = 100 * abs(out["probe_accuracy"] - out["argmax_accuracy"])
    ok = 0.84 <= realized <= 0.92 and gap <= 4.0
    record(8, ok, f"realized argmax accuracy {realized:.3f} overall, {out['argmax_accuracy']:.3f} "
                  f"on test; linear probe {out['probe_accuracy']:.3f} on test ({gap:.1f} pts apart)")

# %% [markdown]
# Train, quantize, compare
#
# The whole pipeline in one file: synthetic data, the default 30-epoch run,
# 4-bit weights from 128 calibration samples, and the side-by-side table.
#
#     python3 demos/02_train_and_quantize.py            # full run, ~15 s
#     python3 demos/02_train_and_quantize.py 3          # 3 epochs

# %%
import sys
import time
from dataclasses import replace

import numpy as np

from mmscene import dataio
from mmscene import quantizer as qz
from mmscene.bundle import bundle_from_model, to_bytes
from mmscene.trainer import TrainConfig, evaluate, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30

# %% data
ds = dataio.generate_dataset(seed=42)
dataio.attach_splits(ds, dataio.split_dataset(ds.labels, 42), 42)
print(len(ds), "samples; splits",
      {k: len(ds.split_ids(k)) for k in dataio.SPLITS})
print("classification vectors alone get",
      f"{float(ds.manifest['mllm_argmax_accuracy']):.3f}", "by argmax")

# %% train
t0 = time.perf_counter()
res = train(ds, replace(TrainConfig(), epochs=epochs), log=print)
print(f"best val {res.best_val_accuracy:.3f} at epoch {res.best_epoch} "
      f"({time.perf_counter() - t0:.1f}s)")
fp = res.best

# %% calibrate and quantize
calib = dataio.sample_calibration(ds.split_ids("train"), 128, 42)
stats = qz.collect_calibration_stats(fp, *dataio.preprocess_arrays(ds, calib)[:3])
q = qz.apply_awq(fp, stats, qz.QuantPolicy())
print(len(q.layers), "layers at 4 bits")
dead = {k: v for k, v in q.degenerate.items() if v}
if dead:
    print("channels that never fired during calibration:", dead)

# the verbatim scale rule, for comparison
q_verbatim = qz.apply_awq(fp, stats, qz.QuantPolicy(mode="verbatim"))

# %% compare
test = ds.split_ids("test")
images, tokens, vectors, labels = dataio.preprocess_arrays(ds, test)
for name, qm in (("activation_weighted", q), ("verbatim", q_verbatim)):
    rep = qz.quantization_report(fp, qm.model, images, tokens, vectors, labels, qm.layers)
    print(f"{name:>20}: fp {rep['fp_accuracy']:.3f}  int4 {rep['q_accuracy']:.3f}  "
          f"agreement {rep['agreement']:.3f}")

sizes = qz.payload_sizes(fp, q.layers)
print(f"payload {sizes['fp32_bytes']} -> {sizes['quantized_bytes']} bytes, "
      f"ratio {sizes['ratio']:.4f}; selected codes alone {sizes['code_ratio']:.1f}x")
fp_file = len(to_bytes(bundle_from_model(fp)))
q_file = len(to_bytes(bundle_from_model(fp, q.layers, {"quant.bits": "4"})))
print(f"bundle files {fp_file} -> {q_file} bytes")

# %% worst layers by weight error
errs = sorted(((np.abs(fp.params[n] - q.model.params[n]).max(), n) for n in q.layers), reverse=True)
for e, n in errs[:5]:
    print(f"{n:<28} max |W - Wq| = {e:.4f}")

print(evaluate(q.model, ds, test).table(list(dataio.CLASS_NAMES)))

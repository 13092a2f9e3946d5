# %% [markdown]
# Fusion losses by hand
#
# The two alignment losses are easy to get wrong, so it helps to poke them
# with inputs whose answer you already know.

# %%
import math

import numpy as np

from mmscene import fusion as fu

rng = np.random.default_rng(0)

# %% correlation-based MI loss
# Build two columns with an exact sample correlation, then watch the loss fall
# as the correlation grows. The closed form is 0.5 * ln(1 - rho^2 + 1e-6).
x = rng.normal(size=512)
z = rng.normal(size=512)
x = (x - x.mean()) / x.std()
z -= z.mean()
z -= (z @ x) / (x @ x) * x   # orthogonal to x
z /= z.std()

for rho in (0.0, 0.3, 0.6, 0.9, 0.99):
    y = rho * x + math.sqrt(1 - rho ** 2) * z
    got = fu.mi_loss(x[:, None], y[:, None])
    print(f"rho={rho:4.2f}  L_MI={got:+.5f}  closed form={0.5 * math.log(1 - rho**2 + 1e-6):+.5f}")

# identical batches hit the epsilon floor
print("floor:", fu.mi_loss(x[:, None], x[:, None]), 0.5 * math.log(1e-6))

# %% Jensen-Shannon between softmax rows
a = rng.normal(size=(1, 6))
print("same rows      ", fu.js_loss(a, a))
print("shifted logits ", fu.js_loss(a, a + 5.0))        # softmax ignores a constant shift
hard = np.array([[1000.0, -1000.0]])
print("disjoint       ", fu.js_loss(hard, -hard), "ln 2 =", math.log(2))

vals = [fu.js_loss(*rng.normal(scale=10, size=(2, 1, 5))) for _ in range(1000)]
print(f"1000 random pairs: min {min(vals):.3g}  max {max(vals):.6f}")

# %% priorities
# Scores are relevance * weight, normalised. Relevance is an EMA of probe
# accuracy with decay 0.9, so one bad batch only moves it by a tenth.
state = fu.PriorityState()
p, state = fu.update_priorities(state, [1.0, 1.0, 1.0], [2.0, 1.0, 1.0])
print("P =", p)
for acc in ([0.2, 1.0, 1.0],) * 5:
    p, state = fu.update_priorities(state, acc, [1.0, 1.0, 1.0])
    print("relevance", np.round(state.relevance, 4), "P", np.round(p, 4))

# %% stacked attention is a 3x3 softmax
from mmscene.config import ModelConfig
from mmscene.model import Model

params = Model.init(ModelConfig(), 1).params
vi, vt, vv = rng.normal(size=(3, 100))
A = fu.attention_matrix(vi, vt, vv, params)[0]
print(np.round(A, 3))
print("row sums", A.sum(axis=1))

"""Dense float64 kernels, deterministic RNG streams and the finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Everything here is
a pure function of its inputs.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class EmptyInputError(ValueError):
    pass


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer on a 64-bit integer."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class RngStream:
    """Named, reproducible random stream.

    The (root_seed, stream_id) pair is folded through splitmix64 into a 128-bit
    PCG64 seed, so distinct stream ids give independent generators and the same
    pair always replays the same sequence.
    """

    def __init__(self, root_seed: int, stream_id: int):
        self.root_seed = int(root_seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        hi = splitmix64(self.root_seed ^ splitmix64(self.stream_id))
        lo = splitmix64(hi ^ self.stream_id)
        self.generator = np.random.Generator(np.random.PCG64((hi << 64) | lo))

    def __repr__(self):
        return f"RngStream(root_seed={self.root_seed}, stream_id={self.stream_id})"

    # thin pass-throughs used across the package
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def random(self, size=None):
        return self.generator.random(size)

    def dirichlet(self, alpha):
        return self.generator.dirichlet(alpha)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m) -> np.ndarray:
    m = as_tensor(m)
    z = m - m.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x = as_tensor(x)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def quantile(values: Sequence[float], alpha: float) -> float:
    """Linear-interpolation empirical quantile (h = (n-1)*alpha)."""
    xs = sorted(float(v) for v in values)
    if not xs:
        raise EmptyInputError("quantile of an empty list")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    h = (len(xs) - 1) * alpha
    lo = math.floor(h)
    hi = math.ceil(h)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def channel_quantiles(samples: np.ndarray, alpha: float) -> np.ndarray:
    """Column-wise version of :func:`quantile` for an (n, channels) array."""
    samples = as_tensor(samples)
    if samples.shape[0] == 0:
        raise EmptyInputError("no samples recorded")
    return np.quantile(samples, alpha, axis=0, method="linear")


def round_half_even(x) -> np.ndarray:
    # np.rint follows IEEE round-half-to-even
    return np.rint(x)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function. Test use only."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def grad_close(analytic, numeric, rtol: float = 1e-4) -> bool:
    """Elementwise |a - n| <= rtol * max(1, |a|)."""
    a = as_tensor(analytic)
    n = as_tensor(numeric)
    return bool(np.all(np.abs(a - n) <= rtol * np.maximum(1.0, np.abs(a))))

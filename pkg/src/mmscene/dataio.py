"""Synthetic maritime-scene dataset: generation, on-disk format, splits and batching.

Each sample carries a 3x32x32 image, 16 token ids and a simulated 5-way
classification vector. Everything is driven by per-sample RNG streams so the
output is byte-identical for a given seed.

Directory layout::

    manifest.txt   key=value lines (format_version=1, constants, splits, offsets)
    images.bin     float32 LE, (N, 3, H, W) row-major
    tokens.bin     uint16 LE, (N, L)
    vectors.bin    float32 LE, (N, 5)
    labels.bin     uint8, (N,)
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import CLASS_NAMES, ConfigError
from .tensor import RngStream

FORMAT_VERSION = 1
CLASS_COLORS = np.array([
    (0.8, 0.1, 0.1),
    (0.1, 0.8, 0.1),
    (0.1, 0.1, 0.8),
    (0.7, 0.7, 0.1),
    (0.5, 0.5, 0.5),
])

# RNG stream namespaces (stream ids must not collide across purposes)
SAMPLE_STREAM = 0
SPLIT_STREAM = 1 << 40
CALIB_STREAM = 2 << 40
EPOCH_STREAM = 3 << 40
SPLITS = ("train", "val", "test")


class DataFormatError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    per_class: int = 100
    n_classes: int = 5
    image_size: int = 32
    cell: int = 8
    noise_sigma: float = 0.25
    class_tokens: int = 8
    filler_tokens: int = 8
    max_len: int = 16
    vocab: int = 64
    pad_id: int = 63
    mllm_mix: float = 0.88
    mllm_concentration: float = 8.0

    def validate(self):
        if self.n_classes != 5:
            raise ConfigError("the generator defines exactly 5 classes")
        if self.per_class < 10:
            raise ConfigError("need at least 10 samples per class")
        if self.image_size % self.cell:
            raise ConfigError("image size must be a multiple of the distractor cell")
        if self.class_tokens + self.filler_tokens > self.max_len:
            raise ConfigError("token draws exceed the sequence length")
        if not 0 <= self.mllm_mix <= 1:
            raise ConfigError("mllm_mix must lie in [0, 1]")


@dataclass
class Sample:
    id: int
    image: np.ndarray
    tokens: np.ndarray
    mllm_vector: np.ndarray
    label: int


@dataclass
class Dataset:
    images: np.ndarray      # float32 (N, 3, H, W) in [0, 1]
    tokens: np.ndarray      # int64 (N, L)
    vectors: np.ndarray     # float32 (N, 5)
    labels: np.ndarray      # int64 (N,)
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(int(i), self.images[i], self.tokens[i], self.vectors[i], int(self.labels[i]))

    def split_ids(self, name: str) -> np.ndarray:
        key = f"split.{name}"
        if key not in self.manifest:
            raise DataFormatError(f"dataset has no {name!r} split")
        return parse_ids(self.manifest[key])


# ---------------------------------------------------------------- generation

def generate_sample(i: int, label: int, cfg: GeneratorConfig, seed: int) -> Sample:
    rng = RngStream(seed, SAMPLE_STREAM + i)
    s = cfg.image_size
    img = np.broadcast_to(CLASS_COLORS[label][:, None, None], (3, s, s)).copy()
    others = [c for c in range(cfg.n_classes) if c != label]
    distractor = others[int(rng.integers(0, len(others)))]
    cells = s // cfg.cell
    cell = int(rng.integers(0, cells * cells))
    r, c = divmod(cell, cells)
    img[:, r * cfg.cell:(r + 1) * cfg.cell, c * cfg.cell:(c + 1) * cfg.cell] = \
        CLASS_COLORS[distractor][:, None, None]
    img = np.clip(img + rng.normal(0.0, cfg.noise_sigma, size=img.shape), 0.0, 1.0)

    band = rng.integers(10 + 10 * label, 20 + 10 * label, size=cfg.class_tokens)
    filler = rng.integers(0, 10, size=cfg.filler_tokens)
    toks = np.concatenate([band, filler])[rng.permutation(cfg.class_tokens + cfg.filler_tokens)]
    tokens = np.full(cfg.max_len, cfg.pad_id, dtype=np.int64)
    tokens[:len(toks)] = toks

    alpha = np.ones(cfg.n_classes)
    if rng.random() < cfg.mllm_mix:
        alpha[label] = cfg.mllm_concentration
    vec = rng.dirichlet(alpha)
    return Sample(i, img.astype(np.float32), tokens, vec.astype(np.float32), label)


def generate_dataset(cfg: GeneratorConfig = GeneratorConfig(), seed: int = 42) -> Dataset:
    """Build the full dataset in memory; labels cycle 0..4 over ids."""
    cfg.validate()
    n = cfg.per_class * cfg.n_classes
    samples = [generate_sample(i, i % cfg.n_classes, cfg, seed) for i in range(n)]
    ds = Dataset(
        images=np.stack([s.image for s in samples]),
        tokens=np.stack([s.tokens for s in samples]),
        vectors=np.stack([s.mllm_vector for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
    )
    acc = float((ds.vectors.argmax(axis=1) == ds.labels).mean())
    ds.manifest = {
        "format_version": str(FORMAT_VERSION),
        "seed": str(seed),
        "n_samples": str(n),
        "class_names": ",".join(CLASS_NAMES),
        "counts": ",".join(str(int((ds.labels == c).sum())) for c in range(cfg.n_classes)),
        "mllm_argmax_accuracy": repr(acc),
    }
    for k, v in asdict(cfg).items():
        ds.manifest[f"gen.{k}"] = str(v)
    return ds


def generator_config_from_manifest(manifest: dict) -> GeneratorConfig:
    kw = {}
    for k, default in asdict(GeneratorConfig()).items():
        key = f"gen.{k}"
        if key in manifest:
            kw[k] = type(default)(manifest[key])
    return GeneratorConfig(**kw)


# -------------------------------------------------------------------- splits

def format_ids(ids) -> str:
    return ",".join(str(int(i)) for i in ids)


def parse_ids(text: str) -> np.ndarray:
    return np.array([int(t) for t in text.split(",") if t], dtype=np.int64)


def split_dataset(labels, seed: int = 42, n_classes: int = 5) -> dict:
    """Stratified 8:1:1 split. Returns ``{'train': ids, 'val': ids, 'test': ids}`` (sorted)."""
    labels = np.asarray(labels)
    out = {k: [] for k in SPLITS}
    for c in range(n_classes):
        ids = np.flatnonzero(labels == c)
        if len(ids) % 10:
            raise ConfigError(f"class {c} has {len(ids)} samples, not divisible by 10")
        ids = ids[RngStream(seed, SPLIT_STREAM + c).permutation(len(ids))]
        n_tr, n_va = len(ids) * 8 // 10, len(ids) // 10
        out["train"].extend(ids[:n_tr])
        out["val"].extend(ids[n_tr:n_tr + n_va])
        out["test"].extend(ids[n_tr + n_va:])
    return {k: np.sort(np.array(v, dtype=np.int64)) for k, v in out.items()}


def attach_splits(ds: Dataset, splits: dict, seed: int):
    ds.manifest["split_seed"] = str(seed)
    for k in SPLITS:
        ds.manifest[f"split.{k}"] = format_ids(splits[k])


# ------------------------------------------------------------- preprocessing

def normalize_vector(v) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, None)
    total = v.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DegenerateVectorError("classification vector is all zero after clamping")
    return v / total


def preprocess(sample: Sample):
    """Model-ready ``(image, tokens, vector)`` for one sample."""
    image = (np.asarray(sample.image, dtype=np.float64) - 0.5) / 0.5
    return image, np.asarray(sample.tokens, dtype=np.int64), normalize_vector(sample.mllm_vector)


def preprocess_arrays(ds: Dataset, ids=None):
    """Batched :func:`preprocess` over ``ids`` (all samples by default)."""
    ids = np.arange(len(ds)) if ids is None else np.asarray(ids)
    images = (ds.images[ids].astype(np.float64) - 0.5) / 0.5
    return images, ds.tokens[ids].astype(np.int64), normalize_vector(ds.vectors[ids]), ds.labels[ids]


# ---------------------------------------------------------------- sampling

def sample_calibration(train_ids, n: int = 128, seed: int = 42) -> np.ndarray:
    train_ids = np.asarray(train_ids)
    if n > len(train_ids):
        raise ValueError(f"cannot draw {n} calibration samples from {len(train_ids)}")
    if n < 1:
        raise ValueError("calibration set must be non-empty")
    rng = RngStream(seed, CALIB_STREAM)
    return train_ids[rng.generator.choice(len(train_ids), size=n, replace=False)]


def make_batches(ids, batch_size: int, epoch_seed: int, epoch: int = 0) -> list:
    """Shuffle ``ids`` for one epoch and cut into batches (last partial batch kept)."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    ids = np.asarray(ids)
    order = ids[RngStream(epoch_seed, EPOCH_STREAM + epoch).permutation(len(ids))]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


# ------------------------------------------------------------------- disk I/O

def write_manifest(path, manifest: dict):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for k, v in manifest.items():
            f.write(f"{k}={v}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            k, sep, v = line.partition("=")
            if not sep:
                raise DataFormatError(f"bad manifest line: {line!r}")
            out[k] = v
    return out


def write_dataset(ds: Dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    arrays = {
        "images.bin": ds.images.astype("<f4"),
        "tokens.bin": ds.tokens.astype("<u2"),
        "vectors.bin": ds.vectors.astype("<f4"),
        "labels.bin": ds.labels.astype("u1"),
    }
    manifest = dict(ds.manifest)
    for name, arr in arrays.items():
        manifest[f"file.{name}.shape"] = "x".join(str(s) for s in arr.shape)
        manifest[f"file.{name}.dtype"] = arr.dtype.str
        manifest[f"file.{name}.offset"] = "0"
        manifest[f"file.{name}.bytes"] = str(arr.nbytes)
        with open(os.path.join(out_dir, name), "wb") as f:
            f.write(arr.tobytes())
    write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    ds.manifest = manifest


def read_dataset(data_dir) -> Dataset:
    manifest = read_manifest(os.path.join(data_dir, "manifest.txt"))
    if manifest.get("format_version") != str(FORMAT_VERSION):
        raise DataFormatError(f"unsupported dataset format {manifest.get('format_version')!r}")
    arrays = {}
    for name in ("images.bin", "tokens.bin", "vectors.bin", "labels.bin"):
        shape = tuple(int(s) for s in manifest[f"file.{name}.shape"].split("x"))
        dtype = np.dtype(manifest[f"file.{name}.dtype"])
        with open(os.path.join(data_dir, name), "rb") as f:
            raw = f.read()
        if len(raw) != int(manifest[f"file.{name}.bytes"]):
            raise DataFormatError(f"{name}: expected {manifest[f'file.{name}.bytes']} bytes, got {len(raw)}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return Dataset(
        images=arrays["images.bin"].astype(np.float32),
        tokens=arrays["tokens.bin"].astype(np.int64),
        vectors=arrays["vectors.bin"].astype(np.float32),
        labels=arrays["labels.bin"].astype(np.int64),
        manifest=manifest,
    )

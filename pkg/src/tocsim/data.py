"""Synthetic blob data, two-view augmentation, label subsampling, batching and
the little-endian raw-tensor file format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

MAGIC = b"TOCD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ConfigError("features must be a non-empty [N, d] array")
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise ConfigError("need exactly one label per sample")
            if y.min() < 0 or y.max() >= self.num_classes:
                raise ConfigError(f"labels must lie in [0, {self.num_classes})")
            object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def without_labels(self) -> "Dataset":
        return replace(self, labels=None)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.features[index], labels, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


class BlobMixture:
    """Isotropic Gaussian classes around random directions scaled by ``separation``."""

    def __init__(self, num_classes: int, dim: int, separation: float, seed):
        if num_classes < 2 or dim < 2:
            raise ConfigError("blobs need at least 2 classes and 2 dimensions")
        rng = np.random.default_rng(seed)
        directions = rng.normal(size=(num_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        self.centers = separation * directions
        self.num_classes = num_classes

    def sample(self, per_class: int, seed) -> Dataset:
        if per_class < 2:
            raise ConfigError("need at least 2 samples per class")
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(self.num_classes), per_class)
        noise = rng.normal(size=(labels.size, self.centers.shape[1]))
        return Dataset(self.centers[labels] + noise, labels, self.num_classes)


def make_blobs(num_classes: int, per_class: int, dim: int, separation: float, seed, centers_seed=None) -> Dataset:
    """Draw ``per_class`` samples of each blob; centres come from ``centers_seed``
    (defaults to ``seed``) so train/test splits can share a mixture."""
    mixture = BlobMixture(num_classes, dim, separation, seed if centers_seed is None else centers_seed)
    return mixture.sample(per_class, seed)


@dataclass(frozen=True)
class AugmentConfig:
    jitter_sigma: float = 0.0
    mask_prob: float = 0.0
    scale_range: tuple = (1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.scale_range
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))
        if self.jitter_sigma < 0:
            raise ConfigError("must be >= 0", key="augment.jitter_sigma")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("must lie in [0, 1]", key="augment.mask_prob")
        if not 0 < lo <= 1 <= hi:
            raise ConfigError("need 0 < lo <= 1 <= hi", key="augment.scale_range")


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """scale * (x + jitter), then each coordinate zeroed with probability mask_prob.

    Labels are untouched, so (x, augment(x)) is always a positive pair.
    """
    x = np.asarray(x, dtype=np.float64)
    out = x
    if cfg.jitter_sigma > 0:
        out = out + rng.normal(0.0, cfg.jitter_sigma, size=x.shape)
    lo, hi = cfg.scale_range
    if hi > lo:
        out = out * rng.uniform(lo, hi, size=(x.shape[0],) + (1,) * (x.ndim - 1))
    elif lo != 1.0:
        out = out * lo
    if cfg.mask_prob > 0:
        out = np.where(rng.random(x.shape) < cfg.mask_prob, 0.0, out)
    return out.copy() if out is x else out


@dataclass(frozen=True)
class LabelMask:
    available: np.ndarray
    fraction: float

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.available)


def subsample_labels(ds: Dataset, fraction: float, seed) -> LabelMask:
    """Stratified: ceil(fraction * n_c) labelled samples kept per class."""
    if not 0 < fraction <= 1:
        raise ConfigError("must lie in (0, 1]", key="label_fraction")
    rng = np.random.default_rng(seed)
    available = np.zeros(len(ds), dtype=bool)
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        # round() keeps 0.6 * 10 from ceiling to 7
        keep = math.ceil(round(fraction * members.size, 9))
        available[rng.permutation(members)[:keep]] = True
    return LabelMask(available, float(fraction))


def rounds_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch: a fresh permutation cut into ceil(n / B) consecutive batches."""
    if batch_size < 1:
        raise ConfigError("must be >= 1", key="train.batch_size")
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(ds: Dataset, batch_size: int, shuffle_seed, epoch: int = 0):
    """Yield (x, y) mini-batches for one epoch; epoch ``e`` reshuffles from (seed, e)."""
    rng = np.random.default_rng([int(shuffle_seed), int(epoch)])
    for idx in batch_indices(len(ds), batch_size, rng):
        yield ds.features[idx], (None if ds.labels is None else ds.labels[idx])


def save_raw(ds: Dataset, path):
    """Write ``ds`` in the TOCD raw-tensor format (features stored as float32)."""
    if ds.labels is None:
        raise ConfigError("the raw format stores labels; dataset has none")
    n, d = ds.features.shape
    payload = (
        _HEADER.pack(MAGIC, FORMAT_VERSION, n, d, ds.num_classes)
        + ds.features.astype("<f4").tobytes()
        + ds.labels.astype("<u4").tobytes()
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_raw(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise ParseError(
            f"header needs {_HEADER.size} bytes, file has {len(buf)} (missing {_HEADER.size - len(buf)} bytes)",
            offset=len(buf),
        )
    magic, version, n, d, c = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported version {version}", offset=4)
    if n < 1 or d < 1 or c < 1:
        raise ParseError("N, d and C must all be positive", offset=8)
    feat_end = _HEADER.size + 4 * n * d
    expected = feat_end + 4 * n
    if len(buf) < expected:
        raise ParseError(
            f"payload truncated: header N={n}, d={d} needs {expected} bytes, "
            f"file has {len(buf)} (missing {expected - len(buf)} bytes)",
            offset=len(buf),
        )
    if len(buf) > expected:
        raise ParseError(
            f"payload longer than header N={n}, d={d} implies ({len(buf) - expected} trailing bytes)",
            offset=expected,
        )
    features = np.frombuffer(buf, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=feat_end)
    bad = np.flatnonzero(labels >= c)
    if bad.size:
        i = int(bad[0])
        raise ParseError(f"label {int(labels[i])} of sample {i} is outside [0, {c})", offset=feat_end + 4 * i)
    if not np.isfinite(features).all():
        i = int(np.flatnonzero(~np.isfinite(features.ravel()))[0])
        raise ParseError("non-finite feature value", offset=_HEADER.size + 4 * i)
    return Dataset(features.astype(np.float64), labels.astype(np.int64), int(c))

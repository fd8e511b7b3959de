"""Per-dimension standardization of feature vectors."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NORM_MAGIC = b"DWNM"
_HEAD = struct.Struct("<4sIId")


class NormalizerFormatError(ValueError):
    pass


@dataclass
class FeatureNormalizer:
    mean: np.ndarray
    std: np.ndarray
    sigma_min: float = 1e-6

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return apply_normalizer(self, h)


def fit_normalizer(sample, sigma_min: float = 1e-6) -> FeatureNormalizer:
    """Mean and (population) standard deviation of a ``(n, d)`` feature sample."""
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("fit_normalizer needs a non-empty (n, d) sample")
    if sigma_min <= 0:
        raise ValueError("sigma_min must be > 0")
    mean = x.mean(axis=0)
    std = np.sqrt(((x - mean) ** 2).mean(axis=0))
    return FeatureNormalizer(mean, np.maximum(std, sigma_min), sigma_min)


def apply_normalizer(n: FeatureNormalizer, h) -> np.ndarray:
    h = np.asarray(h)
    if h.shape[-1] != n.mean.shape[0]:
        raise ValueError(f"feature length {h.shape[-1]} != normalizer length {n.mean.shape[0]}")
    return ((h - n.mean) / n.std).astype(np.float32)


def save_normalizer(n: FeatureNormalizer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(NORM_MAGIC, 1, n.mean.shape[0], n.sigma_min))
        fh.write(np.asarray(n.mean, "<f8").tobytes())
        fh.write(np.asarray(n.std, "<f8").tobytes())


def load_normalizer(path) -> FeatureNormalizer:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise NormalizerFormatError(f"{path}: truncated header")
    magic, version, d, sigma_min = _HEAD.unpack_from(raw)
    if magic != NORM_MAGIC or version != 1 or len(raw) != _HEAD.size + 16 * d:
        raise NormalizerFormatError(f"{path}: not a normalizer file")
    mean = np.frombuffer(raw, "<f8", d, _HEAD.size).copy()
    std = np.frombuffer(raw, "<f8", d, _HEAD.size + 8 * d).copy()
    return FeatureNormalizer(mean, std, sigma_min)

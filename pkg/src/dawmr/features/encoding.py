"""Feature encoders (soft threshold with reverse polarity, triangle K-means) and pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._chunked import chunked_matmul
from .dictionary import Dictionary

ENCODERS = ("soft_threshold_polarity", "triangle_kmeans")


@dataclass(frozen=True)
class EncoderConfig:
    method: str = "soft_threshold_polarity"
    alpha: float = 0.25

    def __post_init__(self):
        if self.method not in ENCODERS:
            raise ValueError(f"unknown encoder {self.method!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def dim(self, k: int) -> int:
        return 2 * k if self.method == "soft_threshold_polarity" else k


def encode(dictionary: Dictionary, encoder: EncoderConfig, patch) -> np.ndarray:
    """Encode one patch ``(P,)`` or a stack of patch rows ``(n, P)``.

    Soft threshold: ``[max(0, Dx - a), max(0, -Dx - a)]`` (length ``2k``).
    Triangle: ``max(0, mean_j(z) - z_j)`` with ``z_j = ||x - c_j||`` (length ``k``).
    """
    x = np.asarray(patch)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != dictionary.patch_length:
        raise ValueError(f"patch length {x.shape[1]} != dictionary length "
                         f"{dictionary.patch_length}")
    x = dictionary.preprocess(x).astype(np.float32, copy=False)
    if encoder.method == "soft_threshold_polarity":
        z = chunked_matmul(x, dictionary.atoms.T)
        out = np.concatenate([np.maximum(0.0, z - encoder.alpha),
                              np.maximum(0.0, -z - encoder.alpha)], axis=1)
    else:
        c = dictionary.centroids if dictionary.centroids is not None else dictionary.atoms
        c = np.asarray(c, dtype=np.float32)
        cross = chunked_matmul(x, c.T)
        xx = np.einsum("ij,ij->i", x, x)[:, None]
        cc = np.einsum("ij,ij->i", c, c)[None, :]
        dist = np.sqrt(np.maximum(xx - 2.0 * cross + cc, 0.0))
        out = np.maximum(0.0, dist.mean(axis=1, keepdims=True) - dist)
    out = out.astype(np.float32, copy=False)
    return out[0] if single else out


def swap_halves(f: np.ndarray) -> np.ndarray:
    """Exchange the positive and negative polarity halves of a soft-threshold code."""
    k = f.shape[-1] // 2
    return np.concatenate([f[..., k:], f[..., :k]], axis=-1)


def pool(encodings, mode: str = "max") -> np.ndarray:
    """Pool a stack of neighbourhood encodings ``(n_neighbours, E)`` elementwise."""
    enc = np.asarray(encodings)
    if enc.ndim != 2 or enc.shape[0] == 0:
        raise ValueError("pool needs a non-empty (n_neighbours, E) stack")
    if mode == "max":
        return enc.max(axis=0)
    if mode == "average":
        return enc.mean(axis=0)
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_dense(maps: np.ndarray, size, mode: str = "max") -> np.ndarray:
    """Pool an encoding map ``(Z, Y, X, E)`` over ``size = (mx, my, mz)`` windows.

    The output has shape ``(Z-mz+1, Y-my+1, X-mx+1, E)``; element ``i`` pools the
    window whose lowest corner is ``i``.  Windows are reduced one axis at a
    time with a fixed offset order, so each value depends only on its window.
    """
    mx, my, mz = size
    out = maps
    for axis, m in ((0, mz), (1, my), (2, mx)):
        if m == 1:
            continue
        n = out.shape[axis] - m + 1
        if n < 1:
            raise ValueError("pooling window larger than map")
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(0, n)
        acc = out[tuple(sl)].copy()
        for o in range(1, m):
            sl[axis] = slice(o, o + n)
            if mode == "max":
                np.maximum(acc, out[tuple(sl)], out=acc)
            else:
                acc += out[tuple(sl)]
        out = acc
    if mode == "average":
        out = out / np.float32(mx * my * mz)
    elif mode != "max":
        raise ValueError(f"unknown pooling mode {mode!r}")
    return out if out is not maps else maps.copy()

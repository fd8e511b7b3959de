"""Patch extraction, contrast normalization and ZCA whitening."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .._chunked import chunked_matmul

GROUPS = ("image", "affinity")
GROUP_CHANNELS = {"image": 1, "affinity": 3}


@dataclass(frozen=True)
class PatchSpec:
    """Patch side lengths ``(px, py, pz)`` and the input group it reads."""

    shape: tuple[int, int, int] = (5, 5, 5)
    group: str = "image"

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or any(s < 1 or s % 2 == 0 for s in shape):
            raise ValueError(f"patch sides must be odd and >= 1, got {self.shape}")
        if self.group not in GROUPS:
            raise ValueError(f"unknown channel group {self.group!r}")
        object.__setattr__(self, "shape", shape)

    @property
    def channels(self) -> int:
        return GROUP_CHANNELS[self.group]

    @property
    def length(self) -> int:
        px, py, pz = self.shape
        return px * py * pz * self.channels

    @property
    def half(self) -> tuple[int, int, int]:
        """Half-widths in array order ``(z, y, x)``."""
        px, py, pz = self.shape
        return (pz // 2, py // 2, px // 2)


def extract_patch(vol: np.ndarray, center, spec: PatchSpec) -> np.ndarray:
    """Flattened patch of ``vol[z, y, x, c]`` centred on ``center = (x, y, z)``."""
    vol = np.asarray(vol)
    if vol.ndim == 3:
        vol = vol[..., None]
    x, y, z = (int(c) for c in center)
    hz, hy, hx = spec.half
    lo = (z - hz, y - hy, x - hx)
    hi = (z + hz + 1, y + hy + 1, x + hx + 1)
    if any(a < 0 for a in lo) or any(b > n for b, n in zip(hi, vol.shape[:3])):
        raise IndexError(f"patch at {center} with sides {spec.shape} leaves the volume")
    return vol[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].reshape(-1).copy()


def patch_rows(vol: np.ndarray, shape, z_range=None) -> np.ndarray:
    """Every full patch of ``vol`` as rows, in scan order of the patch centres.

    ``shape`` is ``(px, py, pz)``.  ``z_range`` limits the patch origins along z
    (half-open) so callers can stream a volume slab by slab.
    """
    px, py, pz = shape
    win = sliding_window_view(vol, (pz, py, px), axis=(0, 1, 2))
    if z_range is not None:
        win = win[z_range[0]:z_range[1]]
    # (z, y, x, c, pz, py, px) -> (z, y, x, pz, py, px, c)
    win = np.moveaxis(win, 3, -1)
    return win.reshape(-1, px * py * pz * vol.shape[3])


def sample_patches(vol: np.ndarray, shape, count: int, rng) -> np.ndarray:
    """``count`` patches at uniformly random positions (with replacement)."""
    px, py, pz = shape
    nz, ny, nx = (vol.shape[0] - pz + 1, vol.shape[1] - py + 1, vol.shape[2] - px + 1)
    if min(nz, ny, nx) < 1:
        raise ValueError(f"volume {vol.shape[:3]} is smaller than patch {shape}")
    z = rng.integers(0, nz, count)
    y = rng.integers(0, ny, count)
    x = rng.integers(0, nx, count)
    out = np.empty((count, px * py * pz * vol.shape[3]), dtype=np.float32)
    for i in range(count):
        out[i] = vol[z[i]:z[i] + pz, y[i]:y[i] + py, x[i]:x[i] + px].reshape(-1)
    return out


def contrast_normalize(rows: np.ndarray, eps_cn: float) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    mean = rows.mean(axis=1, keepdims=True)
    std = rows.std(axis=1, keepdims=True)
    return (rows - mean) / (std + eps_cn)


@dataclass
class WhiteningTransform:
    """Optional per-patch contrast normalization followed by ZCA whitening."""

    mean: np.ndarray
    matrix: np.ndarray
    eps_zca: float = 0.1
    enabled: bool = True
    contrast: bool = True
    eps_cn: float = 1.0

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        return apply_whitening(self, rows)


def fit_whitening(patches: np.ndarray, eps_zca: float = 0.1, contrast: bool = True,
                  eps_cn: float = 1.0) -> WhiteningTransform:
    patches = np.asarray(patches, dtype=np.float64)
    if not np.all(np.isfinite(patches)):
        raise ValueError("whitening input contains non-finite values")
    if contrast:
        patches = contrast_normalize(patches, eps_cn)
    mean = patches.mean(axis=0)
    cov = np.cov(patches, rowvar=False)
    evals, evecs = np.linalg.eigh(np.atleast_2d(cov))
    evals = np.clip(evals, 0.0, None)
    scale = 1.0 / np.sqrt(evals + eps_zca)
    matrix = (evecs * scale) @ evecs.T
    matrix = 0.5 * (matrix + matrix.T)
    return WhiteningTransform(mean, matrix, eps_zca, True, contrast, eps_cn)


def apply_whitening(t: WhiteningTransform | None, rows: np.ndarray) -> np.ndarray:
    """Whiten a patch or a stack of patch rows; ``None`` or disabled is identity."""
    if t is None or not t.enabled:
        return rows
    rows = np.asarray(rows)
    single = rows.ndim == 1
    x = np.atleast_2d(rows).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("whitening input contains non-finite values")
    if t.contrast:
        x = contrast_normalize(x, t.eps_cn)
    out = chunked_matmul(x - t.mean, t.matrix)
    return out[0] if single else out

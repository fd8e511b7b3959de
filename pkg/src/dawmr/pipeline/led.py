"""Local error density (LED) masks and the sampler weights derived from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LEDMask:
    """Binary mask over training voxels plus the settings that produced it."""

    mask: np.ndarray
    window: tuple[int, int, int] = (5, 5, 5)
    frac: float = 0.5
    multiplier: float = 10.0

    @property
    def shape(self):
        return self.mask.shape


def _box_sum(a: np.ndarray, window) -> np.ndarray:
    """Sum of ``a`` over a centered window clipped to the volume (exact integers)."""
    out = a.astype(np.int64)
    for axis, w in enumerate(window):
        r = w // 2
        n = out.shape[axis]
        pad = [(0, 0)] * out.ndim
        pad[axis] = (1, 0)
        cum = np.pad(np.cumsum(out, axis=axis), pad)
        hi = np.minimum(np.arange(n) + r + 1, n)
        lo = np.maximum(np.arange(n) - r, 0)
        out = np.take(cum, hi, axis=axis) - np.take(cum, lo, axis=axis)
    return out


def compute_led_mask(pred: np.ndarray, truth: np.ndarray, window=5, frac: float = 0.5,
                     multiplier: float = 10.0) -> LEDMask:
    """Mask voxels whose neighbourhood has more than ``frac`` misclassified edges.

    ``pred`` is an analog affinity graph ``(Z, Y, X, 3)`` and ``truth`` the ternary
    label mask.  An edge is misclassified when ``pred > 0.5`` disagrees with a
    positive label; edges with label 0 are ignored.  The window (``(x, y, z)``
    sides or a single odd int) is clipped at the volume border.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 4 or pred.shape[3] != 3:
        raise ValueError(f"prediction {pred.shape} and labels {truth.shape} must both be (Z, Y, X, 3)")
    w = (int(window),) * 3 if np.isscalar(window) else tuple(int(v) for v in window)
    if len(w) != 3 or any(v < 1 or v % 2 == 0 for v in w):
        raise ValueError("LED window sides must be odd and >= 1")
    if not 0.0 <= frac < 1.0:
        raise ValueError("frac must be in [0, 1)")
    valid = truth != 0
    wrong = valid & ((pred > 0.5) != (truth > 0))
    zyx = w[::-1]
    n_valid = _box_sum(valid.sum(axis=3), zyx)
    n_wrong = _box_sum(wrong.sum(axis=3), zyx)
    mask = (n_valid > 0) & (n_wrong > frac * n_valid)
    return LEDMask(mask, w, frac, multiplier)


def merge_masks(a: LEDMask, b: LEDMask) -> LEDMask:
    """Voxelwise OR; settings are taken from ``a``."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return LEDMask(a.mask | b.mask, a.window, a.frac, a.multiplier)


def led_weights(masks, entry: np.ndarray, xyz: np.ndarray, multiplier: float = 10.0) -> np.ndarray:
    """Per-record sampler weights: ``multiplier`` on masked voxels, 1 elsewhere.

    ``masks`` is indexed by subvolume (``None`` entries mean no mask).
    """
    w = np.ones(len(entry), dtype=np.float64)
    for i in np.unique(entry):
        m = masks[i] if masks is not None else None
        if m is None:
            continue
        arr = m.mask if isinstance(m, LEDMask) else np.asarray(m)
        sel = np.flatnonzero(entry == i)
        x, y, z = xyz[sel].T
        w[sel[arr[z, y, x]]] = multiplier
    return w

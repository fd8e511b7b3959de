"""Unsupervised dictionaries: OMP-1 and K-means, plus the ``DWDC`` file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .patches import WhiteningTransform, apply_whitening, fit_whitening

DICT_MAGIC = b"DWDC"
DICT_VERSION = 1
METHODS = {"omp1": 0, "kmeans": 1}
_METHOD_NAMES = {v: k for k, v in METHODS.items()}
# whitening flag bits
_WH_ZCA = 1
_WH_CONTRAST = 2
_HEAD = struct.Struct("<4sII3IIBdB")


class DictionaryFormatError(ValueError):
    pass


@dataclass
class Dictionary:
    """``k`` unit-norm atoms over flattened ``(pz, py, px, channels)`` patches.

    ``centroids`` keeps the raw (unnormalized) K-means centres needed by the
    triangle encoder; it is ``None`` for OMP-1 dictionaries.
    """

    atoms: np.ndarray
    patch_shape: tuple[int, int, int]
    channels: int
    method: str = "omp1"
    alpha: float = 0.25
    whitening: WhiteningTransform | None = None
    centroids: np.ndarray | None = None
    history: list[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.atoms = np.ascontiguousarray(self.atoms, dtype=np.float32)
        self.patch_shape = tuple(int(s) for s in self.patch_shape)
        if self.method not in METHODS:
            raise ValueError(f"unknown dictionary method {self.method!r}")
        px, py, pz = self.patch_shape
        if self.atoms.ndim != 2 or self.atoms.shape[1] != px * py * pz * self.channels:
            raise ValueError(f"atoms {self.atoms.shape} do not match patch "
                             f"{self.patch_shape} x {self.channels} channels")
        if self.centroids is not None:
            self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)

    @property
    def k(self) -> int:
        return self.atoms.shape[0]

    @property
    def patch_length(self) -> int:
        return self.atoms.shape[1]

    def preprocess(self, rows: np.ndarray) -> np.ndarray:
        return apply_whitening(self.whitening, rows)


def _prepare(patches, whitening, eps_zca, eps_cn):
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise ValueError("patches must be a 2-D (n, length) array")
    if not np.all(np.isfinite(patches)):
        raise ValueError("patches contain non-finite values")
    t = fit_whitening(patches, eps_zca, eps_cn=eps_cn) if whitening else None
    x = apply_whitening(t, patches).astype(np.float64) if t is not None else patches
    return x, t


def _random_patch(x: np.ndarray, rng) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    candidates = np.flatnonzero(norms > 0)
    if not len(candidates):
        v = rng.standard_normal(x.shape[1])
        return v / np.linalg.norm(v)
    i = candidates[rng.integers(len(candidates))]
    return x[i] / norms[i]


def omp1_error(x: np.ndarray, atoms: np.ndarray) -> float:
    """1-sparse reconstruction error ``sum ||x - s d_j*||^2`` under best assignment."""
    z = x @ atoms.T
    best = np.abs(z).max(axis=1)
    return float(np.sum(np.einsum("ij,ij->i", x, x) - best**2))


def learn_dictionary_omp1(patches, k: int, epochs: int = 10, seed: int = 0,
                          shape=(5, 5, 5), channels: int = 1, alpha: float = 0.25,
                          whitening: bool = False, eps_zca: float = 0.1,
                          eps_cn: float = 1.0) -> Dictionary:
    """Alternating 1-sparse coding and power-step atom updates.

    Each epoch assigns every patch to ``argmax_j |d_j . x|`` and replaces atom
    ``j`` by the normalized sum of ``(d_j . x) x`` over its patches, which never
    increases the 1-sparse reconstruction error.  Atoms with no patches are
    re-seeded from random patches.  ``history`` holds the error before the first
    epoch and after each one.
    """
    x, t = _prepare(patches, whitening, eps_zca, eps_cn)
    n, dim = x.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"need at least k={k} patches, got {n}")
    rng = np.random.default_rng(seed)
    atoms = rng.standard_normal((k, dim))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    history = [omp1_error(x, atoms)]
    for _ in range(epochs):
        z = x @ atoms.T
        assign = np.abs(z).argmax(axis=1)
        s = z[np.arange(n), assign]
        update = np.zeros_like(atoms)
        np.add.at(update, assign, s[:, None] * x)
        counts = np.bincount(assign, minlength=k)
        norms = np.linalg.norm(update, axis=1)
        for j in range(k):
            if norms[j] > 1e-12:
                atoms[j] = update[j] / norms[j]
            elif counts[j] == 0:
                atoms[j] = _random_patch(x, rng)
        history.append(omp1_error(x, atoms))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    return Dictionary(atoms, shape, channels, "omp1", alpha, t, None, history)


def kmeans_objective(x: np.ndarray, centroids: np.ndarray) -> float:
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    return float(d2.min(axis=1).sum())


def learn_dictionary_kmeans(patches, k: int, epochs: int = 10, seed: int = 0,
                            shape=(5, 5, 5), channels: int = 1, alpha: float = 0.25,
                            whitening: bool = False, eps_zca: float = 0.1,
                            eps_cn: float = 1.0) -> Dictionary:
    """Lloyd iterations from ``k`` distinct random patches; empty clusters re-seeded."""
    x, t = _prepare(patches, whitening, eps_zca, eps_cn)
    n, _ = x.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"need at least k={k} patches, got {n}")
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(n, size=k, replace=False)].copy()
    sq = np.einsum("ij,ij->i", x, x)

    def assign(c):
        d2 = sq[:, None] - 2.0 * (x @ c.T) + np.einsum("ij,ij->i", c, c)[None, :]
        return d2.argmin(axis=1)

    history = []
    for _ in range(epochs):
        labels = assign(centroids)
        history.append(float(((x - centroids[labels]) ** 2).sum()))
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        for j in range(k):
            if counts[j]:
                centroids[j] = sums[j] / counts[j]
            else:
                centroids[j] = x[rng.integers(n)]
    labels = assign(centroids)
    history.append(float(((x - centroids[labels]) ** 2).sum()))
    norms = np.linalg.norm(centroids, axis=1, keepdims=True)
    atoms = np.divide(centroids, norms, out=np.zeros_like(centroids), where=norms > 0)
    return Dictionary(atoms, shape, channels, "kmeans", alpha, t, centroids, history)


# ---------------------------------------------------------------------------
# file format


def save_dictionary(d: Dictionary, path) -> None:
    t = d.whitening
    flags = 0
    if t is not None and t.enabled:
        flags |= _WH_ZCA | (_WH_CONTRAST if t.contrast else 0)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(DICT_MAGIC, DICT_VERSION, d.k, *d.patch_shape, d.channels,
                            METHODS[d.method], float(d.alpha), flags))
        if flags & _WH_ZCA:
            fh.write(struct.pack("<dd", t.eps_zca, t.eps_cn))
            fh.write(np.asarray(t.mean, dtype="<f8").tobytes())
            fh.write(np.asarray(t.matrix, dtype="<f8").tobytes())
        fh.write(d.atoms.astype("<f4").tobytes())
        if d.method == "kmeans":
            fh.write(np.asarray(d.centroids, dtype="<f4").tobytes())


def load_dictionary(path) -> Dictionary:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise DictionaryFormatError(f"{path}: truncated header")
    magic, version, k, px, py, pz, channels, method, alpha, flags = _HEAD.unpack_from(raw)
    if magic != DICT_MAGIC:
        raise DictionaryFormatError(f"{path}: bad magic {magic!r}")
    if version != DICT_VERSION or method not in _METHOD_NAMES:
        raise DictionaryFormatError(f"{path}: unsupported version/method")
    dim = px * py * pz * channels
    pos = _HEAD.size

    def take(count, dtype):
        nonlocal pos
        size = np.dtype(dtype).itemsize * count
        if pos + size > len(raw):
            raise DictionaryFormatError(f"{path}: truncated payload")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
        pos += size
        return arr

    t = None
    if flags & _WH_ZCA:
        eps_zca, eps_cn = take(2, "<f8")
        mean = take(dim, "<f8").copy()
        matrix = take(dim * dim, "<f8").reshape(dim, dim).copy()
        t = WhiteningTransform(mean, matrix, float(eps_zca), True,
                               bool(flags & _WH_CONTRAST), float(eps_cn))
    atoms = take(k * dim, "<f4").reshape(k, dim)
    name = _METHOD_NAMES[method]
    centroids = take(k * dim, "<f4").reshape(k, dim) if name == "kmeans" else None
    if pos != len(raw):
        raise DictionaryFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return Dictionary(atoms.copy(), (px, py, pz), channels, name, float(alpha), t,
                      None if centroids is None else centroids.copy())

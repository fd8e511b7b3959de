"""Affinity graph -> segmentation, and boundary/segmentation metrics."""

from __future__ import annotations

import heapq
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.stats import rankdata

from .volume import EDGE_AXES, affinities_from_segmentation, edge_validity

DIRECTIONS = ("x", "y", "z")


def _flat_neighbors(shape):
    """Flat index arrays ``(u, v, d)`` of every valid edge ``u -> u + e_d``."""
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    us, vs, ds = [], [], []
    for d, axis in enumerate(EDGE_AXES):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        us.append(idx[tuple(lo)].ravel())
        vs.append(idx[tuple(hi)].ravel())
        ds.append(np.full(us[-1].shape, d))
    return np.concatenate(us), np.concatenate(vs), np.concatenate(ds)


def segment_components(aff: np.ndarray, threshold: float) -> np.ndarray:
    """Connected components over edges with affinity strictly above ``threshold``.

    Voxels without any such incident edge are background (0); components are
    numbered 1..n in order of their first voxel in scan order.
    """
    aff = np.asarray(aff)
    shape = aff.shape[:3]
    n = int(np.prod(shape))
    u, v, d = _flat_neighbors(shape)
    flat = aff.reshape(n, 3)
    keep = flat[u, d] > threshold
    u, v = u[keep], v[keep]
    ids = np.zeros(n, dtype=np.uint32)
    if len(u):
        graph = coo_matrix((np.ones(len(u), np.int8), (u, v)), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
        touched = np.zeros(n, dtype=bool)
        touched[u] = True
        touched[v] = True
        first = np.full(labels.max() + 1, n, dtype=np.int64)
        np.minimum.at(first, labels[touched], np.flatnonzero(touched))
        comps = np.flatnonzero(first < n)
        rank = np.zeros(labels.max() + 1, dtype=np.uint32)
        rank[comps[np.argsort(first[comps], kind="stable")]] = np.arange(1, len(comps) + 1)
        ids[touched] = rank[labels[touched]]
    return ids.reshape(shape)


@numba.njit(nogil=True, cache=True)
def _priority_flood(ids, aff, nz, ny, nx):
    n = nz * ny * nx
    heap = [(0.0, np.uint32(0), np.int64(0))]
    heap.pop()
    for i in range(n):
        if ids[i] != 0:
            _push_neighbors(heap, ids, aff, i, ids[i], nz, ny, nx)
    while len(heap):
        _, sid, j = heapq.heappop(heap)
        if ids[j] != 0:
            continue
        ids[j] = sid
        _push_neighbors(heap, ids, aff, j, sid, nz, ny, nx)
    return ids


@numba.njit(nogil=True, cache=True)
def _push_neighbors(heap, ids, aff, i, sid, nz, ny, nx):
    z = i // (ny * nx)
    y = (i // nx) % ny
    x = i % nx
    # +x/+y/+z edges are anchored at i, -x/-y/-z edges at the neighbour
    if x + 1 < nx and ids[i + 1] == 0:
        heapq.heappush(heap, (-np.float64(aff[i, 0]), sid, np.int64(i + 1)))
    if x > 0 and ids[i - 1] == 0:
        heapq.heappush(heap, (-np.float64(aff[i - 1, 0]), sid, np.int64(i - 1)))
    if y + 1 < ny and ids[i + nx] == 0:
        heapq.heappush(heap, (-np.float64(aff[i, 1]), sid, np.int64(i + nx)))
    if y > 0 and ids[i - nx] == 0:
        heapq.heappush(heap, (-np.float64(aff[i - nx, 1]), sid, np.int64(i - nx)))
    if z + 1 < nz and ids[i + ny * nx] == 0:
        heapq.heappush(heap, (-np.float64(aff[i, 2]), sid, np.int64(i + ny * nx)))
    if z > 0 and ids[i - ny * nx] == 0:
        heapq.heappush(heap, (-np.float64(aff[i - ny * nx, 2]), sid, np.int64(i - ny * nx)))


def watershed_grow(seeds: np.ndarray, aff: np.ndarray) -> np.ndarray:
    """Grow seeded segments along maximum-affinity edges until the volume is covered.

    Ties are broken by lower seed id, then lower voxel index.  Without any
    seed the input is returned unchanged.
    """
    seeds = np.asarray(seeds)
    if not seeds.any():
        return seeds.astype(np.uint32, copy=True)
    nz, ny, nx = seeds.shape
    ids = np.ascontiguousarray(seeds, dtype=np.uint32).ravel().copy()
    flat = np.ascontiguousarray(aff, dtype=np.float32).reshape(-1, 3)
    return _priority_flood(ids, flat, nz, ny, nx).reshape(seeds.shape)


# ---------------------------------------------------------------------------
# edge classification metrics


@dataclass
class EdgeScore:
    per_direction: tuple[float, float, float]
    mean: float
    undefined: tuple[str, ...] = ()


def _per_direction(pred, truth, fn) -> EdgeScore:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and labels {truth.shape} differ")
    scores, undefined = [], []
    for d in range(3):
        p, t = pred[..., d], truth[..., d]
        pos, neg = p[t > 0], p[t < 0]
        if not len(pos) or not len(neg):
            scores.append(math.nan)
            undefined.append(DIRECTIONS[d])
            continue
        scores.append(fn(pos, neg))
    if undefined:
        warnings.warn(f"directions {undefined} lack one edge class; excluded from the mean",
                      RuntimeWarning, stacklevel=3)
    good = [s for s in scores if not math.isnan(s)]
    mean = float(np.mean(good)) if good else math.nan
    return EdgeScore(tuple(scores), mean, tuple(undefined))


def balanced_accuracy(pred, truth, threshold: float = 0.5) -> EdgeScore:
    """``0.5 * acc(positive edges) + 0.5 * acc(negative edges)`` per direction."""
    return _per_direction(pred, truth, lambda pos, neg: 0.5 * float(np.mean(pos > threshold))
                          + 0.5 * float(np.mean(neg <= threshold)))


def _auc(pos, neg):
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = len(pos), len(neg)
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_edge(pred, truth) -> EdgeScore:
    """ROC area per direction: ``P(s+ > s-) + 0.5 P(s+ = s-)``."""
    return _per_direction(pred, truth, _auc)


# ---------------------------------------------------------------------------
# Rand index


def _pairs(n):
    return n * (n - 1) // 2


def rand_index(a: np.ndarray, b: np.ndarray, mode: str = "foreground_restricted") -> float:
    """Fraction of voxel pairs on which segmentations ``a`` (truth) and ``b`` agree.

    Ids are used as cluster labels as-is (0 included).  In
    ``foreground_restricted`` mode only voxels with ``a != 0`` take part.
    """
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError("segmentations differ in size")
    if mode == "foreground_restricted":
        keep = a != 0
        a, b = a[keep], b[keep]
    elif mode != "all_pairs":
        raise ValueError(f"unknown mode {mode!r}")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two voxels in the pair universe")
    _, a_inv = np.unique(a, return_inverse=True)
    _, b_inv = np.unique(b, return_inverse=True)
    joint = a_inv.astype(np.int64) * (int(b_inv.max()) + 1) + b_inv
    same_both = sum(_pairs(int(c)) for c in np.unique(joint, return_counts=True)[1])
    same_a = sum(_pairs(int(c)) for c in np.bincount(a_inv))
    same_b = sum(_pairs(int(c)) for c in np.bincount(b_inv))
    total = _pairs(n)
    agree = total + 2 * same_both - same_a - same_b
    return agree / total


# ---------------------------------------------------------------------------
# threshold sweep


@dataclass
class ThresholdSweep:
    thresholds: np.ndarray

    @classmethod
    def from_affinities(cls, aff, count: int = 1000, valid=None) -> "ThresholdSweep":
        """``count`` evenly spaced quantiles of the affinity values, deduplicated."""
        aff = np.asarray(aff)
        if valid is None:
            valid = edge_validity(aff.shape[:3])
        values = aff[valid]
        if not len(values):
            raise ValueError("no affinity values to build a sweep from")
        q = np.quantile(values, np.linspace(0.0, 1.0, count), method="lower")
        return cls(np.unique(q))

    def __len__(self):
        return len(self.thresholds)


@dataclass
class RandCurve:
    thresholds: np.ndarray
    rand: np.ndarray
    clusters: np.ndarray
    auc_ri: float
    max_ri: float


def rand_point(aff, truth_seg, threshold, mode="foreground_restricted"):
    seeds = segment_components(aff, threshold)
    clusters = int(seeds.max())
    grown = watershed_grow(seeds, aff)
    return rand_index(truth_seg, grown, mode), clusters


def rand_curve(aff, truth_seg, sweep: ThresholdSweep, mode: str = "foreground_restricted",
               workers: int = 1) -> RandCurve:
    """Rand index after components + watershed at each threshold of ``sweep``.

    AUC-RI is the unweighted mean over the sweep; max RI its maximum.
    """
    if not len(sweep):
        raise ValueError("empty threshold sweep")
    ts = list(sweep.thresholds)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            points = list(pool.map(lambda t: rand_point(aff, truth_seg, t, mode), ts))
    else:
        points = [rand_point(aff, truth_seg, t, mode) for t in ts]
    ri = np.array([p[0] for p in points])
    clusters = np.array([p[1] for p in points])
    return RandCurve(np.asarray(sweep.thresholds), ri, clusters, float(ri.mean()), float(ri.max()))


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    bal_acc: EdgeScore
    auc_edge: EdgeScore
    curve: RandCurve | None = None
    extra: dict = field(default_factory=dict)

    @property
    def auc_ri(self) -> float:
        return self.curve.auc_ri if self.curve else math.nan

    @property
    def max_ri(self) -> float:
        return self.curve.max_ri if self.curve else math.nan

    def as_dict(self) -> dict[str, float]:
        out = {}
        for name, score in (("bal_acc", self.bal_acc), ("auc_edge", self.auc_edge)):
            for d, v in zip(DIRECTIONS, score.per_direction):
                out[f"{name}_{d}"] = v
            out[name] = score.mean
        out["auc_ri"] = self.auc_ri
        out["max_ri"] = self.max_ri
        out.update(self.extra)
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v:.6f}\n" if isinstance(v, float) else f"{k}={v}\n"
                       for k, v in self.as_dict().items())

    def table_text(self) -> str:
        lines = ["threshold\tclusters\trand_index"]
        if self.curve is not None:
            for t, c, r in zip(self.curve.thresholds, self.curve.clusters, self.curve.rand):
                lines.append(f"{t:.9g}\t{c}\t{r:.9f}")
        return "\n".join(lines) + "\n"

    def write(self, path, table_path=None) -> None:
        Path(path).write_text(self.to_text())
        if table_path is not None:
            Path(table_path).write_text(self.table_text())


def read_metrics(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = float(value)
    return out


def valid_box(aff: np.ndarray) -> tuple[slice, slice, slice]:
    """Bounding box of voxels with any non-zero affinity (predicted region)."""
    nz = np.argwhere((np.asarray(aff) > 0).any(axis=-1))
    if not len(nz):
        return tuple(slice(0, n) for n in aff.shape[:3])
    lo, hi = nz.min(axis=0), nz.max(axis=0) + 1
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def evaluate(pred: np.ndarray, truth_seg: np.ndarray, region=None, sweep_size: int = 1000,
             mode: str = "foreground_restricted", workers: int = 1,
             with_rand: bool = True) -> MetricsReport:
    """All metrics for a predicted affinity graph against a ground-truth segmentation.

    Both are cropped to ``region`` (``(z, y, x)`` slices, default: the box of
    voxels with any non-zero prediction); edges leaving the crop are ignored.
    """
    pred = np.asarray(pred)
    truth_seg = np.asarray(truth_seg)
    if pred.shape[:3] != truth_seg.shape:
        raise ValueError(f"prediction {pred.shape[:3]} and truth {truth_seg.shape} differ")
    region = valid_box(pred) if region is None else region
    p = np.ascontiguousarray(pred[region])
    s = np.ascontiguousarray(truth_seg[region])
    _, mask = affinities_from_segmentation(s)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        bal = balanced_accuracy(p, mask)
        auc = auc_edge(p, mask)
    curve = None
    if with_rand:
        sweep = ThresholdSweep.from_affinities(p, sweep_size)
        curve = rand_curve(p, s, sweep, mode, workers)
    return MetricsReport(bal, auc, curve)

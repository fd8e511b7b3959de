"""Sharded feature store (``DWFS`` files) and parallel feature precompute.

Records are ordered globally by (subvolume, z, y, x) and dealt round-robin to
shards: global record ``i`` lives in shard ``i % S`` at row ``i // S``.
Precompute happens in two pure phases.  Workers first compute features for
disjoint spatial tiles and write them into their (pre-assigned) shard rows;
nothing is shared between workers except write-once, non-overlapping rows.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from ..features import FeatureExtractor
from ..volume import CatalogEntry

SHARD_MAGIC = b"DWFS"
SHARD_VERSION = 1
_HEAD = struct.Struct("<4sIIQ")


class ShardFormatError(ValueError):
    pass


def record_dtype(d: int) -> np.dtype:
    return np.dtype([("xyz", "<u4", (3,)), ("labels", "i1", (3,)), ("pad", "u1"),
                     ("features", "<f4", (d,))])


def record_size(d: int) -> int:
    return record_dtype(d).itemsize


def _create_shard(path, d: int, count: int) -> np.ndarray:
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(SHARD_MAGIC, SHARD_VERSION, d, count))
        fh.truncate(_HEAD.size + count * record_size(d))
    if count == 0:
        return np.zeros(0, dtype=record_dtype(d))
    return np.memmap(path, dtype=record_dtype(d), mode="r+", offset=_HEAD.size, shape=(count,))


def write_shard(records: np.ndarray, path) -> None:
    d = records.dtype["features"].shape[0]
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(SHARD_MAGIC, SHARD_VERSION, d, len(records)))
        fh.write(np.ascontiguousarray(records, dtype=record_dtype(d)).tobytes())


def read_shard(path, mmap: bool = True) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size)
    if len(head) < _HEAD.size:
        raise ShardFormatError(f"{path}: truncated header")
    magic, version, d, count = _HEAD.unpack(head)
    if magic != SHARD_MAGIC or version != SHARD_VERSION:
        raise ShardFormatError(f"{path}: not a feature shard")
    expected = _HEAD.size + count * record_size(d)
    if path.stat().st_size != expected:
        raise ShardFormatError(f"{path}: size {path.stat().st_size} != expected {expected}")
    if count == 0:
        return np.zeros(0, dtype=record_dtype(d))
    if mmap:
        return np.memmap(path, dtype=record_dtype(d), mode="r", offset=_HEAD.size, shape=(count,))
    return np.fromfile(path, dtype=record_dtype(d), offset=_HEAD.size)


class FeatureStore:
    """Global view over round-robin shards.

    ``entry`` and ``labels`` are kept in memory for sampling; feature rows are
    fetched from the (possibly memory-mapped) shards on demand.
    """

    def __init__(self, shards: Sequence[np.ndarray], entry: np.ndarray | None = None,
                 paths: Sequence[Path] | None = None):
        self.shards = list(shards)
        self.paths = list(paths) if paths is not None else None
        self.d = self.shards[0].dtype["features"].shape[0]
        self.n = sum(len(s) for s in self.shards)
        count = len(self.shards)
        order = np.arange(self.n)
        self._shard_of = order % count
        self._row_of = order // count
        self.labels = self._collect("labels").astype(np.int8)
        self.xyz = self._collect("xyz").astype(np.int64)
        self.entry = np.zeros(self.n, np.int64) if entry is None else np.asarray(entry)

    def _collect(self, name):
        out = np.empty((self.n,) + self.shards[0].dtype[name].shape, self.shards[0].dtype[name].base)
        for j, shard in enumerate(self.shards):
            out[j::len(self.shards)] = shard[name]
        return out

    def __len__(self):
        return self.n

    @property
    def shape(self):
        return (self.n, self.d)

    def __getitem__(self, idx) -> np.ndarray:
        """Feature rows for global record indices (array or slice)."""
        if isinstance(idx, slice):
            idx = np.arange(self.n)[idx]
        idx = np.asarray(idx, dtype=np.int64)
        out = np.empty((len(idx), self.d), dtype=np.float32)
        shard, row = self._shard_of[idx], self._row_of[idx]
        for j in np.unique(shard):
            sel = shard == j
            out[sel] = self.shards[j]["features"][row[sel]]
        return out

    def records(self) -> np.ndarray:
        """All records in global order (concatenated and re-sorted)."""
        out = np.empty(self.n, dtype=record_dtype(self.d))
        for j, shard in enumerate(self.shards):
            out[j::len(self.shards)] = shard
        return out

    @classmethod
    def open(cls, directory, entry=None) -> "FeatureStore":
        paths = sorted(Path(directory).glob("shard_*.dwfs"))
        if not paths:
            raise FileNotFoundError(f"no shards in {directory}")
        return cls([read_shard(p) for p in paths], entry, paths)


def _tile_groups(xyz: np.ndarray, tile: int) -> list[np.ndarray]:
    key = xyz // tile
    _, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    return np.split(order, np.flatnonzero(np.diff(inverse[order])) + 1)


def precompute_features(extractor: FeatureExtractor, catalog: Sequence[CatalogEntry],
                        locations: Sequence[tuple[int, np.ndarray]], shard_count: int = 1,
                        workers: int = 1, directory=None, tile: int = 32) -> FeatureStore:
    """Extract features for every ``(entry, xyz)`` location into ``shard_count`` shards.

    Output is bit-identical for any ``workers``; with ``directory`` the shards
    are written as ``shard_00000.dwfs`` ... and memory-mapped.
    """
    if shard_count < 1 or workers < 1:
        raise ValueError("shard_count and workers must be >= 1")
    d = extractor.dims
    pieces, entries = [], []
    for i, xyz in sorted(locations, key=lambda t: t[0]):
        xyz = np.asarray(xyz, dtype=np.int64).reshape(-1, 3)
        order = np.lexsort((xyz[:, 0], xyz[:, 1], xyz[:, 2]))
        pieces.append(xyz[order])
        entries.append(np.full(len(xyz), i, dtype=np.int64))
    xyz_all = np.concatenate(pieces) if pieces else np.zeros((0, 3), np.int64)
    entry_all = np.concatenate(entries) if entries else np.zeros(0, np.int64)
    n = len(xyz_all)
    if n == 0:
        raise ValueError("no locations to precompute")
    for i in np.unique(entry_all):
        inputs = _inputs(catalog[i], extractor)
        shape = next(iter(inputs.values())).shape[:3]
        extractor.check_support(xyz_all[entry_all == i], shape)

    counts = [len(range(j, n, shard_count)) for j in range(shard_count)]
    if directory is not None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for old in directory.glob("shard_*.dwfs"):
            old.unlink()
        paths = [directory / f"shard_{j:05d}.dwfs" for j in range(shard_count)]
        shards = [_create_shard(p, d, c) for p, c in zip(paths, counts)]
    else:
        paths = None
        shards = [np.zeros(c, dtype=record_dtype(d)) for c in counts]

    units = []
    for i in np.unique(entry_all):
        idx = np.flatnonzero(entry_all == i)
        for g in _tile_groups(xyz_all[idx], tile):
            units.append((int(i), idx[g]))

    def run(unit):
        i, gidx = unit
        entry = catalog[i]
        feats = extractor.features(_inputs(entry, extractor), xyz_all[gidx], tile=None)
        x, y, z = xyz_all[gidx].T
        labels = entry.labels[z, y, x]
        for j in np.unique(gidx % shard_count):
            sel = gidx % shard_count == j
            rows = gidx[sel] // shard_count
            shard = shards[j]
            shard["xyz"][rows] = xyz_all[gidx[sel]]
            shard["labels"][rows] = labels[sel]
            shard["features"][rows] = feats[sel]

    if workers == 1:
        for u in units:
            run(u)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, units))
    if paths is not None:
        for s in shards:
            if isinstance(s, np.memmap):
                s.flush()
        shards = [read_shard(p) for p in paths]
    return FeatureStore(shards, entry_all, paths)


def _inputs(entry: CatalogEntry, extractor: FeatureExtractor) -> dict[str, np.ndarray]:
    inputs = {"image": entry.image}
    if "affinity" in extractor.spec.groups:
        if entry.affinity is None:
            raise ValueError(f"subvolume {entry.name or '?'} lacks the affinity input")
        inputs["affinity"] = entry.affinity
    return inputs

"""Volumes, ground-truth affinities, augmentation and synthetic data.

Array layout
------------
Voxel data is held in C-order numpy arrays indexed ``[z, y, x, c]`` so that
the flat offset of ``(x, y, z, c)`` is ``((z*Y + y)*X + x)*C + c``.  Public
coordinates (``VoxelCoord``, shard records, CLI flags) are always ``(x, y, z)``.

Affinity channel ``d`` (0 = x, 1 = y, 2 = z) at voxel ``v`` is the edge
``(v, v + e_d)``.  Edges leaving the volume are stored as 0 with label 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

# array axis carrying each affinity direction (x, y, z) in [z, y, x] layout
EDGE_AXES = (2, 1, 0)

VOLUME_MAGIC = b"DWMR"
VOLUME_VERSION = 1
DTYPE_FLOAT32 = 1
DTYPE_UINT32 = 2
_HEADER = struct.Struct("<4sIQQQII")


class VolumeFormatError(ValueError):
    """Raised when a volume file is malformed."""


class VoxelCoord(NamedTuple):
    x: int
    y: int
    z: int


@dataclass(frozen=True)
class Volume:
    """Multi-channel float32 volume stored as ``data[z, y, x, c]``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (Z, Y, X, C), got {data.shape}")
        object.__setattr__(self, "data", np.ascontiguousarray(data, dtype=np.float32))

    @property
    def dims(self) -> tuple[int, int, int]:
        z, y, x, _ = self.data.shape
        return (x, y, z)

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class SegmentationVolume:
    """Segment ids stored as ``ids[z, y, x]``; 0 is background."""

    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 3 or min(ids.shape) < 1:
            raise ValueError(f"segmentation must be (Z, Y, X), got {ids.shape}")
        if ids.size and ids.min() < 0:
            raise ValueError("segment ids must be non-negative")
        object.__setattr__(self, "ids", np.ascontiguousarray(ids, dtype=np.uint32))

    @property
    def dims(self) -> tuple[int, int, int]:
        z, y, x = self.ids.shape
        return (x, y, z)


# ---------------------------------------------------------------------------
# ground truth


def _edge_slices(axis: int, ndim: int = 3):
    """Slices selecting the anchor voxels and their +1 neighbours along axis."""
    lo = [slice(None)] * ndim
    hi = [slice(None)] * ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return tuple(lo), tuple(hi)


def affinities_from_segmentation(seg) -> tuple[np.ndarray, np.ndarray]:
    """Binary affinity graph and ternary label mask of a segmentation.

    Returns ``(aff, mask)`` with shapes ``(Z, Y, X, 3)``.  ``aff`` is float32 in
    {0, 1}; ``mask`` is int8 with +1 for edges inside one foreground object,
    -1 for every other in-volume edge and 0 for edges leaving the volume.
    """
    ids = seg.ids if isinstance(seg, SegmentationVolume) else np.asarray(seg)
    aff = np.zeros(ids.shape + (3,), dtype=np.float32)
    mask = np.zeros(ids.shape + (3,), dtype=np.int8)
    for d, axis in enumerate(EDGE_AXES):
        lo, hi = _edge_slices(axis)
        a, b = ids[lo], ids[hi]
        same = (a == b) & (a != 0)
        aff[lo + (d,)] = same
        mask[lo + (d,)] = np.where(same, 1, -1)
    return aff, mask


def edge_validity(shape: Sequence[int]) -> np.ndarray:
    """Boolean ``(Z, Y, X, 3)`` array of edges whose endpoint lies in the volume."""
    valid = np.zeros(tuple(shape) + (3,), dtype=bool)
    for d, axis in enumerate(EDGE_AXES):
        lo, _ = _edge_slices(axis)
        valid[lo + (d,)] = True
    return valid


# ---------------------------------------------------------------------------
# resampling and augmentation


def downsample_average(vol: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling of a ``(Z, Y, X[, C])`` array.

    Partial trailing blocks are dropped.  Every output voxel is summed in the
    same fixed offset order, so a voxel's value does not depend on which crop
    of the volume it was computed from.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    vol = np.asarray(vol)
    out_shape = tuple(n // factor for n in vol.shape[:3])
    if min(out_shape) == 0:
        raise ValueError(f"downsampling {vol.shape[:3]} by {factor} leaves an empty axis")
    if factor == 1:
        return vol.astype(np.float32, copy=True)
    zs, ys, xs = (n * factor for n in out_shape)
    acc = np.zeros(out_shape + vol.shape[3:], dtype=np.float64)
    for dz in range(factor):
        for dy in range(factor):
            for dx in range(factor):
                acc += vol[dz:zs:factor, dy:ys:factor, dx:xs:factor]
    return (acc / factor**3).astype(np.float32)


def _dihedral(arr: np.ndarray, index: int) -> np.ndarray:
    """Apply element ``index`` (0..7) of the xy-plane dihedral group.

    ``index = 4*reflect + quarter_turns``; the reflection (applied first) maps
    ``y -> Y-1-y``, i.e. it mirrors across the x axis.
    """
    turns, reflect = index % 4, index // 4
    if reflect:
        arr = arr[:, ::-1]
    return np.ascontiguousarray(np.rot90(arr, turns, axes=(1, 2)))


def augment_eightfold(seg, img) -> list[tuple[np.ndarray, np.ndarray]]:
    """The 8 xy rotations/reflections of an ``(image, segmentation)`` pair.

    Element 0 is the identity.  Labels for each element should be regenerated
    with :func:`affinities_from_segmentation` on the transformed segmentation.
    """
    ids = seg.ids if isinstance(seg, SegmentationVolume) else np.asarray(seg)
    image = img.data[..., 0] if isinstance(img, Volume) else np.asarray(img)
    if image.ndim == 4:
        if image.shape[3] != 1:
            raise ValueError("augment_eightfold expects a single-channel image")
        image = image[..., 0]
    if image.shape != ids.shape:
        raise ValueError(f"image {image.shape} and segmentation {ids.shape} differ")
    return [(_dihedral(image, i), _dihedral(ids, i)) for i in range(8)]


# ---------------------------------------------------------------------------
# labelled subvolumes


Box = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]  # (z, y, x) half-open


@dataclass
class CatalogEntry:
    """One labelled subvolume: image, optional affinity input, labels, labelled box.

    ``box`` is half-open per array axis ``((z0, z1), (y0, y1), (x0, x1))``.
    """

    image: np.ndarray
    labels: np.ndarray
    box: Box | None = None
    affinity: np.ndarray | None = None
    seg: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        shape = self.image.shape[:3]
        if self.labels.shape != shape + (3,):
            raise ValueError("label mask must be (Z, Y, X, 3) matching the image")
        if self.box is None:
            self.box = tuple((0, n) for n in shape)
        for (lo, hi), n in zip(self.box, shape):
            if not 0 <= lo <= hi <= n:
                raise ValueError(f"box {self.box} outside volume {shape}")

    @classmethod
    def from_segmentation(cls, image, seg, box=None, name=""):
        _, mask = affinities_from_segmentation(seg)
        return cls(np.asarray(image, dtype=np.float32), mask, box, seg=np.asarray(seg), name=name)

    def restrict(self, box: Box) -> "CatalogEntry":
        inter = tuple((max(a0, b0), max(min(a1, b1), max(a0, b0)))
                      for (a0, a1), (b0, b1) in zip(self.box, box))
        return CatalogEntry(self.image, self.labels, inter, self.affinity, self.seg, self.name)

    def labeled_locations(self) -> np.ndarray:
        """``(n, 3)`` int array of ``(x, y, z)`` labelled voxels in scan order."""
        (z0, z1), (y0, y1), (x0, x1) = self.box
        sub = self.labels[z0:z1, y0:y1, x0:x1]
        zyx = np.argwhere((sub != 0).any(axis=-1))
        if not len(zyx):
            return np.zeros((0, 3), dtype=np.int64)
        zyx += (z0, y0, x0)
        return zyx[:, ::-1].astype(np.int64)


def subsample_locations(catalog: Sequence[CatalogEntry], fraction: float,
                        seed: int) -> list[tuple[int, np.ndarray]]:
    """Sample ``round(fraction * n)`` labelled voxels independently per subvolume.

    Returns ``[(entry_index, xyz), ...]`` with ``xyz`` sorted in scan order.
    """
    if not catalog:
        raise ValueError("empty catalog")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    out = []
    for i, entry in enumerate(catalog):
        locs = entry.labeled_locations()
        n = int(round(fraction * len(locs)))
        if n >= len(locs):
            out.append((i, locs))
            continue
        rng = np.random.default_rng([seed, i])
        pick = np.sort(rng.choice(len(locs), size=n, replace=False))
        out.append((i, locs[pick]))
    return out


# ---------------------------------------------------------------------------
# synthetic data

INTERIOR_LEVEL = 200.0
BOUNDARY_LEVEL = 50.0


@dataclass
class SyntheticVolume:
    image: np.ndarray
    seg: np.ndarray
    seeds: np.ndarray = field(repr=False)


def generate_synthetic(dims, num_seeds: int, boundary_width: float = 2.0,
                       noise_sigma: float = 20.0, blur_sigma: float = 1.0,
                       seed: int = 0, faint_box: Box | None = None,
                       faint_contrast: float = 0.25) -> SyntheticVolume:
    """Voronoi neuropil stand-in.

    ``dims`` is ``(X, Y, Z)`` or a single int for a cube.  Cell ``i`` gets id
    ``i + 1``; voxels closer than ``boundary_width / 2`` to a bisecting plane
    become background, as do cell fragments that are not the cell's largest
    face-connected piece.  Boundaries inside ``faint_box`` keep only
    ``faint_contrast`` of the normal intensity drop, which makes a locally hard
    region.
    """
    if np.isscalar(dims):
        dims = (int(dims),) * 3
    X, Y, Z = (int(n) for n in dims)
    if num_seeds < 1:
        raise ValueError("num_seeds must be >= 1")
    if min(X, Y, Z) < 8:
        raise ValueError("every dimension must be >= 8")
    if boundary_width < 0 or noise_sigma < 0 or blur_sigma < 0:
        raise ValueError("boundary_width, noise_sigma and blur_sigma must be >= 0")
    if not 0.0 <= faint_contrast <= 1.0:
        raise ValueError("faint_contrast must be in [0, 1]")

    rng = np.random.default_rng(seed)
    seeds = rng.uniform(0.0, 1.0, size=(num_seeds, 3)) * (X, Y, Z)
    zz, yy, xx = np.meshgrid(np.arange(Z), np.arange(Y), np.arange(X), indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3).astype(np.float64)
    d2 = ((pts[:, None, :] - seeds[None, :, :]) ** 2).sum(-1)
    nearest = d2.argmin(axis=1)
    ids = (nearest + 1).astype(np.uint32)

    if num_seeds > 1 and boundary_width > 0:
        own = d2[np.arange(len(pts)), nearest]
        sep = np.linalg.norm(seeds[nearest][:, None, :] - seeds[None, :, :], axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            plane = (d2 - own[:, None]) / (2.0 * sep)
        plane[np.arange(len(pts)), nearest] = np.inf
        plane[~np.isfinite(plane)] = np.inf
        ids[plane.min(axis=1) < boundary_width / 2.0] = 0

    ids = ids.reshape(Z, Y, X)
    for cell in range(1, num_seeds + 1):
        parts, n = ndimage.label(ids == cell)
        if n > 1:
            sizes = np.bincount(parts.ravel())[1:]
            keep = 1 + int(np.argmax(sizes))
            ids[(parts != keep) & (parts != 0)] = 0

    drop = np.full(ids.shape, INTERIOR_LEVEL - BOUNDARY_LEVEL)
    if faint_box is not None:
        (z0, z1), (y0, y1), (x0, x1) = faint_box
        drop[z0:z1, y0:y1, x0:x1] *= faint_contrast
    image = np.where(ids != 0, INTERIOR_LEVEL, INTERIOR_LEVEL - drop)
    if blur_sigma > 0:
        image = ndimage.gaussian_filter(image, blur_sigma, mode="nearest")
    if noise_sigma > 0:
        image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    return SyntheticVolume(image.astype(np.float32), ids, seeds)


# ---------------------------------------------------------------------------
# file format


def write_volume(vol, path) -> None:
    """Write a :class:`Volume` (dtype 1) or :class:`SegmentationVolume` (dtype 2)."""
    if isinstance(vol, SegmentationVolume):
        payload, channels, code = vol.ids, 1, DTYPE_UINT32
        z, y, x = vol.ids.shape
    elif isinstance(vol, Volume):
        payload, channels, code = vol.data, vol.channels, DTYPE_FLOAT32
        z, y, x, _ = vol.data.shape
    else:
        raise TypeError("write_volume expects a Volume or SegmentationVolume")
    dtype = "<u4" if code == DTYPE_UINT32 else "<f4"
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, x, y, z, channels, code))
        fh.write(np.ascontiguousarray(payload, dtype=dtype).tobytes())


def read_volume(path) -> Volume | SegmentationVolume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, x, y, z, channels, code = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if code not in (DTYPE_FLOAT32, DTYPE_UINT32):
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    if min(x, y, z, channels) < 1:
        raise VolumeFormatError(f"{path}: empty dimension")
    count = x * y * z * channels
    if count * 4 > 2**62 or count * 4 != len(raw) - _HEADER.size:
        raise VolumeFormatError(
            f"{path}: payload is {len(raw) - _HEADER.size} bytes, header implies {count * 4}")
    if code == DTYPE_UINT32:
        if channels != 1:
            raise VolumeFormatError(f"{path}: segmentations must have one channel")
        ids = np.frombuffer(raw, dtype="<u4", offset=_HEADER.size).reshape(z, y, x)
        return SegmentationVolume(ids.astype(np.uint32))
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(z, y, x, channels)
    return Volume(data.astype(np.float32))

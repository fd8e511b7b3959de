"""Representation assembly: RF / foveated features over one or more scales.

Feature extraction is organized around dense *maps*.  For a crop of the input
volumes, every (scale, channel group) pair gets an encoding map (one code per
downsampled voxel with full patch support) and, for foveated specs, a pooled
map.  Gathering features for a location then only indexes into those maps.
Because every map value is computed by a per-voxel deterministic sequence of
operations, features do not depend on the crop they were computed from; the
tiling helpers below exploit that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from ..volume import downsample_average
from .dictionary import Dictionary, learn_dictionary_kmeans, learn_dictionary_omp1
from .encoding import EncoderConfig, encode, pool_dense
from .patches import GROUP_CHANNELS, GROUPS, patch_rows, sample_patches

REPRESENTATIONS = ("rf", "foveated")
_SLAB_FLOATS = 1 << 21


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """Architecture of one feature-extraction stage.

    ``patch_shape`` and ``neighborhood`` are ``(x, y, z)`` side lengths;
    ``dict_size`` counts atoms per (scale, channel group).
    """

    representation: str = "foveated"
    dict_size: int = 1000
    scales: tuple[int, ...] = (1, 2)
    patch_shape: tuple[int, int, int] = (5, 5, 5)
    neighborhood: tuple[int, int, int] = (5, 5, 5)
    pooling: str = "max"
    groups: tuple[str, ...] = ("image",)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", _triple(self.patch_shape))
        object.__setattr__(self, "neighborhood", _triple(self.neighborhood))
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.pooling not in ("max", "average"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if any(p < 1 or p % 2 == 0 for p in self.patch_shape + self.neighborhood):
            raise ValueError("patch and neighbourhood sides must be odd and >= 1")
        if not self.scales or any(s < 1 for s in self.scales) or len(set(self.scales)) != len(self.scales):
            raise ValueError(f"scales must be distinct positive integers, got {self.scales}")
        if not self.groups or any(g not in GROUPS for g in self.groups):
            raise ValueError(f"bad channel groups {self.groups}")
        if self.dict_size < 1:
            raise ValueError("dict_size must be >= 1")

    # -- arithmetic -------------------------------------------------------

    @property
    def encoding_dim(self) -> int:
        return self.encoder.dim(self.dict_size)

    @property
    def dims(self) -> int:
        return representation_dims(self)

    @property
    def alignment(self) -> int:
        return math.lcm(*self.scales)

    def radius(self) -> tuple[int, int, int]:
        """Support radius at the downsampled grid, in array order ``(z, y, x)``."""
        return tuple((p // 2) + (m // 2) for p, m in
                     zip(self.patch_shape[::-1], self.neighborhood[::-1]))

    def field_of_view(self) -> tuple[int, int, int]:
        """Per-axis ``(x, y, z)`` field of view: ``max_s (p + m - 1) * s``."""
        return tuple(max((p + m - 1) * s for s in self.scales)
                     for p, m in zip(self.patch_shape, self.neighborhood))

    def axis_box(self, coord: int, axis: int) -> tuple[int, int]:
        """Inclusive input range along array ``axis`` that can affect ``coord``."""
        r = self.radius()[axis]
        lo = min((coord // s - r) * s for s in self.scales)
        hi = max((coord // s + r) * s + s - 1 for s in self.scales)
        return lo, hi

    def box(self, xyz) -> tuple[tuple[int, int], ...]:
        """Inclusive ``((z0, z1), (y0, y1), (x0, x1))`` support of location ``xyz``."""
        x, y, z = xyz
        return tuple(self.axis_box(c, a) for a, c in enumerate((z, y, x)))

    def valid_range(self, axis: int, lo: int, hi: int) -> tuple[int, int]:
        """Half-open range of coordinates whose support lies within ``[lo, hi]``."""
        good = [c for c in range(lo, hi + 1)
                if self.axis_box(c, axis)[0] >= lo and self.axis_box(c, axis)[1] <= hi]
        if not good:
            return (lo, lo)
        return (good[0], good[-1] + 1)


def representation_dims(spec: FeatureExtractorSpec) -> int:
    """Feature dimensionality ``d`` of a spec."""
    e = spec.encoding_dim
    mx, my, mz = spec.neighborhood
    per = e * mx * my * mz if spec.representation == "rf" else 2 * e
    return len(spec.scales) * len(spec.groups) * per


# preset single-iteration architectures, all with 8000 feature dims
ARCHITECTURES = {
    "5rf": FeatureExtractorSpec("rf", 32, (1,), (5, 5, 5), (5, 5, 5)),
    "ss": FeatureExtractorSpec("rf", 4000, (1,), (5, 5, 5), (1, 1, 1)),
    "ss-fv-2d": FeatureExtractorSpec("foveated", 2000, (1,), (5, 5, 1), (5, 5, 1)),
    "ss-fv": FeatureExtractorSpec("foveated", 2000, (1,), (5, 5, 5), (5, 5, 5)),
    "ms-fv": FeatureExtractorSpec("foveated", 1000, (1, 2), (5, 5, 5), (5, 5, 5)),
}


def recursive_spec(spec: FeatureExtractorSpec, iteration: int) -> FeatureExtractorSpec:
    """Spec used at ``iteration``: from the second on, split the atom budget
    equally between image and affinity filters."""
    if iteration <= 1:
        return replace(spec, groups=("image",))
    if spec.dict_size % 2:
        raise ValueError("dict_size must be even to split between image and affinity")
    return replace(spec, groups=("image", "affinity"), dict_size=spec.dict_size // 2)


# ---------------------------------------------------------------------------
# dense maps


def encoding_map(vol: np.ndarray, dictionary: Dictionary, encoder: EncoderConfig) -> np.ndarray:
    """Encodings of every full patch of ``vol`` ``(Z, Y, X, C)`` -> ``(Z', Y', X', E)``."""
    px, py, pz = dictionary.patch_shape
    nz, ny, nx = vol.shape[0] - pz + 1, vol.shape[1] - py + 1, vol.shape[2] - px + 1
    if min(nz, ny, nx) < 1:
        raise ValueError(f"volume {vol.shape[:3]} smaller than patch {dictionary.patch_shape}")
    e = encoder.dim(dictionary.k)
    out = np.empty((nz, ny, nx, e), dtype=np.float32)
    slab = max(1, _SLAB_FLOATS // (ny * nx * dictionary.patch_length))
    for z0 in range(0, nz, slab):
        z1 = min(nz, z0 + slab)
        rows = patch_rows(vol, dictionary.patch_shape, (z0, z1))
        out[z0:z1] = encode(dictionary, encoder, rows).reshape(z1 - z0, ny, nx, e)
    return out


@dataclass
class _ScaleMaps:
    scale: int
    origin: tuple[int, int, int]   # downsampled (z, y, x) of map index 0 for encodings
    enc: dict[str, np.ndarray]
    pooled: dict[str, np.ndarray]


class FeatureMaps:
    """Dense encoding/pooled maps over one crop, able to gather features."""

    def __init__(self, spec: FeatureExtractorSpec, scales: list[_ScaleMaps]):
        self.spec = spec
        self._scales = scales

    def gather(self, xyz: np.ndarray) -> np.ndarray:
        """Feature vectors ``(n, d)`` for global ``(x, y, z)`` locations."""
        spec = self.spec
        xyz = np.asarray(xyz, dtype=np.int64).reshape(-1, 3)
        zyx = xyz[:, ::-1]
        hm = np.array(spec.neighborhood[::-1]) // 2
        parts = []
        for sm in self._scales:
            c = zyx // sm.scale - np.array(sm.origin)   # index of centre in the enc map
            for g in spec.groups:
                enc = sm.enc[g]
                lo = c - hm
                hi = c + hm
                if (lo < 0).any() or (hi >= np.array(enc.shape[:3])).any():
                    raise IndexError("location lacks field-of-view support in this crop")
                if spec.representation == "rf":
                    mz, my, mx = spec.neighborhood[::-1]
                    offs = np.stack(np.meshgrid(np.arange(mz), np.arange(my), np.arange(mx),
                                                indexing="ij"), -1).reshape(-1, 3)
                    idx = lo[:, None, :] + offs[None, :, :]
                    parts.append(enc[idx[..., 0], idx[..., 1], idx[..., 2]].reshape(len(xyz), -1))
                else:
                    parts.append(enc[c[:, 0], c[:, 1], c[:, 2]])
                    parts.append(sm.pooled[g][lo[:, 0], lo[:, 1], lo[:, 2]])
        return np.concatenate(parts, axis=1) if parts else np.zeros((len(xyz), 0), np.float32)


@dataclass
class FeatureExtractor:
    """A spec together with its learned dictionaries, keyed by ``(scale, group)``."""

    spec: FeatureExtractorSpec
    dictionaries: dict[tuple[int, str], Dictionary]

    def __post_init__(self):
        for s in self.spec.scales:
            for g in self.spec.groups:
                d = self.dictionaries.get((s, g))
                if d is None:
                    raise ValueError(f"missing dictionary for scale {s}, group {g}")
                if d.k != self.spec.dict_size or d.patch_shape != self.spec.patch_shape \
                        or d.channels != GROUP_CHANNELS[g]:
                    raise ValueError(f"dictionary for ({s}, {g}) does not match the extractor settings")

    @property
    def dims(self) -> int:
        return self.spec.dims

    def maps(self, inputs: Mapping[str, np.ndarray], origin=(0, 0, 0)) -> FeatureMaps:
        """Maps for input crops whose voxel ``[0, 0, 0]`` sits at global ``origin``
        ``(z, y, x)``; ``origin`` must be a multiple of every scale."""
        spec = self.spec
        if any(o % spec.alignment for o in origin):
            raise ValueError(f"crop origin {origin} not aligned to {spec.alignment}")
        hp = np.array(spec.patch_shape[::-1]) // 2
        out = []
        for s in spec.scales:
            enc, pooled = {}, {}
            for g in spec.groups:
                vol = _as4d(inputs[g])
                if vol.shape[3] != GROUP_CHANNELS[g]:
                    raise ValueError(f"group {g} expects {GROUP_CHANNELS[g]} channels")
                ds = downsample_average(vol, s)
                enc[g] = encoding_map(ds, self.dictionaries[(s, g)], spec.encoder)
                if spec.representation == "foveated":
                    pooled[g] = pool_dense(enc[g], spec.neighborhood, spec.pooling)
            org = tuple(int(o) // s + h for o, h in zip(origin, hp))
            out.append(_ScaleMaps(s, org, enc, pooled))
        return FeatureMaps(spec, out)

    def crop_box(self, xyz: np.ndarray) -> tuple[tuple[int, int], ...]:
        """Aligned half-open ``(z, y, x)`` crop covering the support of ``xyz``."""
        xyz = np.asarray(xyz).reshape(-1, 3)
        lo = [self.spec.axis_box(int(xyz[:, 2 - a].min()), a)[0] for a in range(3)]
        hi = [self.spec.axis_box(int(xyz[:, 2 - a].max()), a)[1] + 1 for a in range(3)]
        al = self.spec.alignment
        return tuple(((l // al) * al, h) for l, h in zip(lo, hi))

    def features(self, inputs: Mapping[str, np.ndarray], xyz, tile: int | None = 32) -> np.ndarray:
        """Features ``(n, d)`` at locations ``xyz``, computed tile by tile.

        Locations are grouped by ``tile``-sized blocks and each block's maps are
        built from a crop just large enough for it; ``tile=None`` builds one crop
        for all locations.  Both give bit-identical output.
        """
        xyz = np.asarray(xyz, dtype=np.int64).reshape(-1, 3)
        out = np.empty((len(xyz), self.dims), dtype=np.float32)
        if not len(xyz):
            return out
        shape = _as4d(inputs[self.spec.groups[0]]).shape[:3]
        self.check_support(xyz, shape)
        if tile is None:
            groups = [np.arange(len(xyz))]
        else:
            key = xyz // tile
            _, inverse = np.unique(key, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
            order = np.argsort(inverse, kind="stable")
            groups = np.split(order, np.flatnonzero(np.diff(inverse[order])) + 1)
        for idx in groups:
            box = self.crop_box(xyz[idx])
            sl = tuple(slice(a, b) for a, b in box)
            crop = {g: _as4d(inputs[g])[sl] for g in self.spec.groups}
            maps = self.maps(crop, origin=tuple(a for a, _ in box))
            out[idx] = maps.gather(xyz[idx])
        return out

    def check_support(self, xyz: np.ndarray, shape) -> None:
        xyz = np.asarray(xyz).reshape(-1, 3)
        for a in range(3):
            col = xyz[:, 2 - a]
            lo = self.spec.axis_box(int(col.min()), a)[0]
            hi = self.spec.axis_box(int(col.max()), a)[1]
            if lo < 0 or hi >= shape[a]:
                raise ValueError("location too close to the volume border for the "
                                 f"field of view (axis {'zyx'[a]})")


def _as4d(vol) -> np.ndarray:
    vol = np.asarray(vol)
    return vol[..., None] if vol.ndim == 3 else vol


def extract_features(extractor: FeatureExtractor, inputs: Mapping[str, np.ndarray], xyz) -> np.ndarray:
    """Feature vector ``h_l`` at a single location ``(x, y, z)``."""
    return extractor.features(inputs, np.asarray(xyz).reshape(1, 3), tile=None)[0]


# ---------------------------------------------------------------------------
# learning


@dataclass(frozen=True)
class LearningConfig:
    """How dictionaries are learned for every (scale, group) of a spec."""

    method: str = "omp1"
    patches: int = 10000
    epochs: int = 10
    whitening: bool = False
    eps_zca: float = 0.1
    eps_cn: float = 1.0

    def __post_init__(self):
        if self.method not in ("omp1", "kmeans"):
            raise ValueError(f"unknown dictionary method {self.method!r}")
        if self.patches < 1 or self.epochs < 0:
            raise ValueError("patches must be >= 1 and epochs >= 0")


def learn_extractor(spec: FeatureExtractorSpec, volumes: Sequence[Mapping[str, np.ndarray]],
                    learning: LearningConfig = LearningConfig(), seed: int = 0) -> FeatureExtractor:
    """Learn one dictionary per (scale, group) from random patches of ``volumes``."""
    if not volumes:
        raise ValueError("no volumes to learn dictionaries from")
    learn = learn_dictionary_omp1 if learning.method == "omp1" else learn_dictionary_kmeans
    dictionaries = {}
    for si, s in enumerate(spec.scales):
        for gi, g in enumerate(spec.groups):
            rng = np.random.default_rng([seed, si, gi])
            per = -(-learning.patches // len(volumes))
            chunks = [sample_patches(downsample_average(_as4d(v[g]), s), spec.patch_shape, per, rng)
                      for v in volumes]
            patches = np.concatenate(chunks)[: learning.patches]
            dictionaries[(s, g)] = learn(
                patches, spec.dict_size, learning.epochs, seed=int(rng.integers(2**31)),
                shape=spec.patch_shape, channels=GROUP_CHANNELS[g], alpha=spec.encoder.alpha,
                whitening=learning.whitening, eps_zca=learning.eps_zca, eps_cn=learning.eps_cn)
    return FeatureExtractor(spec, dictionaries)

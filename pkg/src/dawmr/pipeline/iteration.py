"""One network iteration: dictionaries, feature precompute, normalizer and MLP."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from ..features import (ARCHITECTURES, FeatureExtractor, FeatureExtractorSpec, FeatureNormalizer,
                        LearningConfig, apply_normalizer, fit_normalizer, learn_extractor,
                        recursive_spec)
from ..mlp import MLPParams, TrainConfig, predict, train
from ..volume import Box, CatalogEntry, subsample_locations
from .led import led_weights
from .shards import FeatureStore, precompute_features

log = logging.getLogger(__name__)

# stage tags for derived seeds
DICTIONARY, SUBSAMPLE, NORMALIZER, CLASSIFIER, PREVIEW = range(5)


def stage_seed(seed: int, iteration: int, stage: int) -> int:
    """Independent 32-bit seed for one (iteration, stage) of a run."""
    return int(np.random.SeedSequence([seed, iteration, stage]).generate_state(1)[0])


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to train a (possibly recursive) network."""

    spec: FeatureExtractorSpec = ARCHITECTURES["ms-fv"]
    learning: LearningConfig = LearningConfig()
    train: TrainConfig = TrainConfig()
    subsample_fraction: float = 0.1
    shard_count: int = 1
    workers: int = 1
    normalizer_sample: int = 100_000
    tile: int = 32
    led_window: int = 5
    led_frac: float = 0.5
    led_multiplier: float = 10.0
    preview_fraction: float = 0.2
    seed: int = 0
    shard_dir: str | None = None

    def __post_init__(self):
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must be in (0, 1]")
        if min(self.shard_count, self.workers, self.normalizer_sample, self.tile) < 1:
            raise ValueError("shard_count, workers, normalizer_sample and tile must be >= 1")
        if self.led_multiplier < 1:
            raise ValueError("led_multiplier must be >= 1")
        if not 0 < self.preview_fraction <= 1:
            raise ValueError("preview_fraction must be in (0, 1]")


@dataclass
class IterationModel:
    """Feature extractor, normalizer and classifier of iteration ``iteration``.

    ``mlp`` is normally :class:`MLPParams`; any callable mapping normalized
    features ``(n, d)`` to ``(n, 3)`` outputs is accepted as well.
    """

    extractor: FeatureExtractor
    normalizer: FeatureNormalizer
    mlp: MLPParams | Callable[[np.ndarray], np.ndarray]
    iteration: int = 1

    @property
    def spec(self) -> FeatureExtractorSpec:
        return self.extractor.spec

    @property
    def groups(self) -> tuple[str, ...]:
        return self.spec.groups

    def region(self, support: Box) -> Box:
        """Half-open ``(z, y, x)`` box of voxels predictable from inputs valid on ``support``."""
        return region_for(self.spec, support)

    def classify(self, features: np.ndarray) -> np.ndarray:
        h = apply_normalizer(self.normalizer, features)
        if isinstance(self.mlp, MLPParams):
            return predict(self.mlp, h)
        return np.asarray(self.mlp(h), dtype=np.float32)


def region_for(spec: FeatureExtractorSpec, support: Box) -> Box:
    return tuple(spec.valid_range(a, lo, hi - 1) if hi > lo else (lo, lo)
                 for a, (lo, hi) in enumerate(support))


def box_mask(shape, box: Box) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[tuple(slice(a, b) for a, b in box)] = True
    return m


def full_box(shape) -> Box:
    return tuple((0, int(n)) for n in shape[:3])


def _blocks(region: Box, tile: int | None) -> list[Box]:
    if tile is None:
        return [region]
    out = []
    (z0, z1), (y0, y1), (x0, x1) = region
    for zs in range(z0, z1, tile):
        for ys in range(y0, y1, tile):
            for xs in range(x0, x1, tile):
                out.append(((zs, min(z1, zs + tile)), (ys, min(y1, ys + tile)),
                            (xs, min(x1, xs + tile))))
    return out


def infer_iteration(model: IterationModel, inputs: Mapping[str, np.ndarray],
                    support: Box | None = None, tile: int | None = 32,
                    workers: int = 1) -> np.ndarray:
    """Affinity graph ``(Z, Y, X, 3)`` predicted by ``model``.

    Voxels outside ``model.region(support)`` get affinity 0.  ``tile`` sets the
    block side used to bound memory (``None`` evaluates the whole region at
    once); the output is bit-identical for every ``tile`` and ``workers``.
    """
    if "affinity" in model.groups and inputs.get("affinity") is None:
        raise ValueError(f"iteration {model.iteration} needs the affinity input")
    shape = np.asarray(inputs["image"]).shape[:3]
    for g in model.groups:
        if np.asarray(inputs[g]).shape[:3] != shape:
            raise ValueError(f"input {g} has dims {np.asarray(inputs[g]).shape[:3]} != {shape}")
    support = full_box(shape) if support is None else support
    region = model.region(support)
    out = np.zeros(tuple(shape) + (3,), dtype=np.float32)
    if any(b <= a for a, b in region):
        return out
    feed = {g: inputs[g] for g in model.groups}

    def run(block: Box):
        zz, yy, xx = np.meshgrid(*(np.arange(a, b) for a, b in block), indexing="ij")
        xyz = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
        feats = model.extractor.features(feed, xyz, tile=None)
        pred = model.classify(feats)
        out[tuple(slice(a, b) for a, b in block)] = pred.reshape(zz.shape + (3,))

    blocks = _blocks(region, tile)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, blocks))
    else:
        for b in blocks:
            run(b)
    return out


@dataclass
class IterationData:
    """Everything shared between the preview and full classifier of an iteration."""

    iteration: int
    extractor: FeatureExtractor
    normalizer: FeatureNormalizer
    store: FeatureStore
    catalog: list[CatalogEntry]


def entry_inputs(entry: CatalogEntry) -> dict[str, np.ndarray]:
    inputs = {"image": entry.image}
    if entry.affinity is not None:
        inputs["affinity"] = entry.affinity
    return inputs


def prepare_iteration(catalog: Sequence[CatalogEntry], config: PipelineConfig, iteration: int = 1,
                      supports: Sequence[Box] | None = None, shard_dir=None) -> IterationData:
    """Learn dictionaries, precompute features and fit the normalizer.

    ``supports`` gives, per subvolume, the box on which all inputs are valid
    (defaults to the whole volume).  Labelled voxels are restricted to those
    whose field of view lies inside their support.
    """
    if not catalog:
        raise ValueError("empty training catalog")
    spec = recursive_spec(config.spec, iteration)
    if supports is None:
        supports = [full_box(e.image.shape) for e in catalog]
    for e in catalog:
        if "affinity" in spec.groups and e.affinity is None:
            raise ValueError(f"iteration {iteration} needs affinity inputs for every subvolume")
    crops = [{g: entry_inputs(e)[g][tuple(slice(a, b) for a, b in s)] for g in spec.groups}
             for e, s in zip(catalog, supports)]
    extractor = learn_extractor(spec, crops, config.learning,
                                seed=stage_seed(config.seed, iteration, DICTIONARY))
    restricted = [e.restrict(region_for(spec, s)) for e, s in zip(catalog, supports)]
    if not any(len(e.labeled_locations()) for e in restricted):
        raise ValueError("insufficient labelled interior: no labelled voxel has full "
                         f"image support at iteration {iteration}")
    locations = subsample_locations(restricted, config.subsample_fraction,
                                    stage_seed(config.seed, iteration, SUBSAMPLE))
    locations = [(i, xyz) for i, xyz in locations if len(xyz)]
    store = precompute_features(extractor, restricted, locations, config.shard_count,
                                config.workers, shard_dir, config.tile)
    rng = np.random.default_rng(stage_seed(config.seed, iteration, NORMALIZER))
    n = min(config.normalizer_sample, len(store))
    pick = np.sort(rng.choice(len(store), size=n, replace=False))
    normalizer = fit_normalizer(store[pick])
    log.info("iteration %d: %d records, d=%d", iteration, len(store), store.d)
    return IterationData(iteration, extractor, normalizer, store, restricted)


def fit_iteration(data: IterationData, train_config: TrainConfig, masks=None,
                  multiplier: float = 10.0) -> IterationModel:
    """Train the classifier on prepared features; ``masks`` are per-subvolume LED masks."""
    weights = None
    if masks is not None and any(m is not None for m in masks):
        weights = led_weights(masks, data.store.entry, data.store.xyz, multiplier)
    params = train(data.store, data.store.labels, train_config, weights=weights,
                   transform=data.normalizer)
    return IterationModel(data.extractor, data.normalizer, params, data.iteration)


def train_iteration(catalog: Sequence[CatalogEntry], config: PipelineConfig, iteration: int = 1,
                    masks=None, supports: Sequence[Box] | None = None,
                    shard_dir=None) -> IterationModel:
    """Train one iteration end to end (sampler weights come from ``masks``)."""
    data = prepare_iteration(catalog, config, iteration, supports, shard_dir)
    cfg = replace(config.train, seed=stage_seed(config.seed, iteration, CLASSIFIER))
    return fit_iteration(data, cfg, masks, config.led_multiplier)

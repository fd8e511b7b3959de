"""Recursive stacking of iterations, LED weighting and field-of-view accounting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..volume import Box, CatalogEntry
from .iteration import (CLASSIFIER, PREVIEW, IterationModel, PipelineConfig, entry_inputs,
                        fit_iteration, full_box, infer_iteration, prepare_iteration, stage_seed)
from .led import LEDMask, compute_led_mask, merge_masks

log = logging.getLogger(__name__)


@dataclass
class DawmrModel:
    """Ordered iteration models plus the cumulative LED masks from training."""

    iterations: list[IterationModel]
    led_masks: list[LEDMask | None] | None = None
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.iterations:
            raise ValueError("a model needs at least one iteration")
        for i, m in enumerate(self.iterations, 1):
            if m.iteration != i:
                raise ValueError(f"iteration {i} holds a model for iteration {m.iteration}")

    @property
    def k(self) -> int:
        return len(self.iterations)

    def per_iteration_fov(self) -> list[tuple[int, int, int]]:
        return [m.spec.field_of_view() for m in self.iterations]


def field_of_view(model: DawmrModel) -> tuple[int, int, int]:
    """Reported ``(x, y, z)`` field of view: the sum of per-iteration values."""
    return tuple(int(v) for v in np.sum(model.per_iteration_fov(), axis=0))


def strict_field_of_view(model: DawmrModel) -> tuple[int, int, int]:
    """Receptive-field composition: stacking two windows of sides a, b spans a + b - 1."""
    total = np.sum(model.per_iteration_fov(), axis=0) - (model.k - 1)
    return tuple(int(v) for v in total)


def model_box(model: DawmrModel, xyz) -> tuple[tuple[int, int], ...]:
    """Inclusive ``(z, y, x)`` input box that can influence the final prediction at ``xyz``."""
    x, y, z = xyz
    out = []
    for a, c in enumerate((z, y, x)):
        lo = hi = c
        for m in reversed(model.iterations):
            lo = m.spec.axis_box(lo, a)[0]
            hi = m.spec.axis_box(hi, a)[1]
        out.append((lo, hi))
    return tuple(out)


def infer_model(model: DawmrModel, image: np.ndarray, tile: int | None = 32,
                workers: int = 1) -> list[tuple[np.ndarray, Box]]:
    """Run the chain on ``image``; returns ``(affinity, valid box)`` per iteration."""
    image = np.asarray(image, dtype=np.float32)
    support = full_box(image.shape)
    aff, out = None, []
    for m in model.iterations:
        inputs = {"image": image}
        if aff is not None:
            inputs["affinity"] = aff
        aff = infer_iteration(m, inputs, support, tile, workers)
        support = m.region(support)
        out.append((aff, support))
    return out


def _restricted_labels(entry: CatalogEntry, region: Box) -> np.ndarray:
    labels = np.zeros_like(entry.labels)
    sl = tuple(slice(a, b) for a, b in region)
    labels[sl] = entry.labels[sl]
    return labels


def train_recursive(catalog: Sequence[CatalogEntry], config: PipelineConfig, iterations: int = 1,
                    led: bool = False, shard_root=None) -> DawmrModel:
    """Train ``iterations`` stacked networks on ``catalog``.

    With ``led``, each iteration first trains a preview classifier on a fraction
    of the update budget, masks voxels with high local error density and ORs
    the result into a cumulative mask that up-weights those voxels tenfold (by
    default) when the full classifier is trained from scratch.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    entries = list(catalog)
    supports = [full_box(e.image.shape) for e in entries]
    masks: list[LEDMask | None] = [None] * len(entries)
    models: list[IterationModel] = []
    history: dict = {"records": [], "led_fraction": []}
    for it in range(1, iterations + 1):
        shard_dir = None if shard_root is None else Path(shard_root) / f"iter{it}"
        data = prepare_iteration(entries, config, it, supports, shard_dir)
        history["records"].append(len(data.store))
        if led:
            updates = int(round(config.preview_fraction * config.train.updates))
            cfg = replace(config.train, updates=updates,
                          seed=stage_seed(config.seed, it, PREVIEW))
            preview = fit_iteration(data, cfg, masks, config.led_multiplier)
            for j, e in enumerate(entries):
                pred = infer_iteration(preview, entry_inputs(e), supports[j], config.tile,
                                       config.workers)
                region = preview.region(supports[j])
                new = compute_led_mask(pred, _restricted_labels(e, region), config.led_window,
                                       config.led_frac, config.led_multiplier)
                masks[j] = new if masks[j] is None else merge_masks(masks[j], new)
            total = sum(m.mask.size for m in masks)
            history["led_fraction"].append(sum(int(m.mask.sum()) for m in masks) / total)
        cfg = replace(config.train, seed=stage_seed(config.seed, it, CLASSIFIER))
        model = fit_iteration(data, cfg, masks if led else None, config.led_multiplier)
        models.append(model)
        if it < iterations:
            nxt = []
            for j, e in enumerate(entries):
                aff = infer_iteration(model, entry_inputs(e), supports[j], config.tile,
                                      config.workers)
                nxt.append(CatalogEntry(e.image, e.labels, e.box, aff, e.seg, e.name))
                supports[j] = model.region(supports[j])
            entries = nxt
        log.info("finished iteration %d", it)
    return DawmrModel(models, masks if led else None, history)

"""Training and inference orchestration for single and stacked networks."""

from .bundle import BundleFormatError, load_model, read_manifest, save_model
from .iteration import (IterationData, IterationModel, PipelineConfig, fit_iteration, full_box,
                        infer_iteration, prepare_iteration, region_for, stage_seed,
                        train_iteration)
from .led import LEDMask, compute_led_mask, led_weights, merge_masks
from .recursive import (DawmrModel, field_of_view, infer_model, model_box, strict_field_of_view,
                        train_recursive)
from .shards import (FeatureStore, ShardFormatError, precompute_features, read_shard,
                     record_dtype, record_size, write_shard)

__all__ = [
    "BundleFormatError", "DawmrModel", "FeatureStore", "IterationData", "IterationModel",
    "LEDMask", "PipelineConfig", "ShardFormatError", "compute_led_mask", "field_of_view",
    "fit_iteration", "full_box", "infer_iteration", "infer_model", "led_weights", "load_model",
    "merge_masks", "model_box", "precompute_features", "prepare_iteration", "read_manifest",
    "read_shard",
    "record_dtype", "record_size", "region_for", "save_model", "stage_seed",
    "strict_field_of_view", "train_iteration", "train_recursive", "write_shard",
]

"""Unsupervised feature learning and feature extraction."""

from .dictionary import (Dictionary, learn_dictionary_kmeans, learn_dictionary_omp1,
                         load_dictionary, save_dictionary)
from .encoding import EncoderConfig, encode, pool, pool_dense, swap_halves
from .extractor import (ARCHITECTURES, FeatureExtractor, FeatureExtractorSpec, FeatureMaps,
                        LearningConfig, extract_features, learn_extractor, recursive_spec,
                        representation_dims)
from .normalizer import FeatureNormalizer, apply_normalizer, fit_normalizer
from .patches import PatchSpec, WhiteningTransform, apply_whitening, extract_patch, fit_whitening

__all__ = [
    "ARCHITECTURES", "Dictionary", "EncoderConfig", "FeatureExtractor", "FeatureExtractorSpec",
    "FeatureMaps", "FeatureNormalizer", "LearningConfig", "PatchSpec", "WhiteningTransform",
    "apply_normalizer", "apply_whitening", "encode", "extract_features", "extract_patch",
    "fit_normalizer", "fit_whitening", "learn_dictionary_kmeans", "learn_dictionary_omp1",
    "learn_extractor", "load_dictionary", "pool", "pool_dense", "recursive_spec",
    "representation_dims", "save_dictionary", "swap_halves",
]
